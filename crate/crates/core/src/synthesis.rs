//! Pointwise evaluation of `H_T(x0)`.
//!
//! The inner minimum over the trajectory is replaced by the p-norm of the
//! reciprocal stage values `1 / (g_k + htilde)`, which is minimized over the
//! input sequence by projected gradient descent. The terminal condition
//! enters as a quadratic penalty. The reported value is always the exact
//! discrete minimum `g_{k*}` along the optimized trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classk::ClippedAlpha;
use crate::constraint::{ConstraintField, InvariantSubset, SynthesisSpec, TerminalMode, Variant};
use crate::dynamics::{rk4_into, rk4_vjp, ControlSystem, StateBuf, MAX_INPUT, MAX_STATE};
use crate::error::{Error, Result};

/// Tuning of the pointwise optimizer. Stored in grid metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Terminal penalty weights, one optimization round each.
    pub penalty_schedule: Vec<f64>,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub decrease_tolerance: f64,
    pub decrease_window: usize,
    pub armijo: f64,
    /// The penalty targets `threshold + terminal_margin` so that converged
    /// trajectories meet the threshold exactly.
    pub terminal_margin: f64,
    /// Steps held constant by the greedy initial guess when scoring a
    /// candidate input.
    pub greedy_lookahead: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            penalty_schedule: vec![1e2, 1e4, 1e6],
            max_iterations: 400,
            step_tolerance: 1e-10,
            decrease_tolerance: 1e-9,
            decrease_window: 5,
            armijo: 1e-4,
            terminal_margin: 1e-4,
            greedy_lookahead: 3,
        }
    }
}

/// Result of one pointwise solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSolve {
    pub x0: Vec<f64>,
    /// `N` inputs, each inside the box.
    pub u_star: Vec<Vec<f64>>,
    /// `N + 1` states starting at `x0`.
    pub x_star: Vec<Vec<f64>>,
    /// Index of the inner minimizer, smallest on ties.
    pub k_star: usize,
    pub value: f64,
    pub feasible: bool,
    /// First index whose state lies in `F`.
    pub terminal_index: Option<usize>,
    pub restarts_used: usize,
    pub converged: bool,
}

impl PointSolve {
    pub fn first_input(&self) -> &[f64] {
        &self.u_star[0]
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-node seed derived from the run seed and the flat node index.
pub fn point_seed(global: u64, index: u64) -> u64 {
    splitmix64(global ^ splitmix64(index))
}

fn stage_value(spec: &SynthesisSpec, abar: &ClippedAlpha, h: f64, k: usize) -> f64 {
    let t = k as f64 * spec.dt();
    match spec.variant {
        Variant::GammaPenalty => h - spec.gamma * t,
        Variant::AlphaPenalty => h + abar.eval(h) * t,
    }
}

fn stage_slope(spec: &SynthesisSpec, abar: &ClippedAlpha, h: f64, k: usize) -> f64 {
    match spec.variant {
        Variant::GammaPenalty => 1.0,
        Variant::AlphaPenalty => 1.0 + abar.derivative(h) * k as f64 * spec.dt(),
    }
}

/// Stage values `g_k` along a state sequence: `h(x_k) - gamma k dt`, or
/// `h(x_k) + alpha_bar(h(x_k)) k dt` for the alpha variant.
pub fn stage_values(spec: &SynthesisSpec, field: &ConstraintField, x_seq: &[Vec<f64>]) -> Vec<f64> {
    let abar = spec.class_ke().clipped();
    x_seq
        .iter()
        .enumerate()
        .map(|(k, x)| stage_value(spec, &abar, field.eval(x), k))
        .collect()
}

/// Smallest index attaining the minimum.
fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc })
        .0
}

/// `ln ||v||_p` with `v_k = 1 / d_k`, computed with max-scaling, and the
/// weights `dln/dg_k`.
fn ln_pnorm(dens: &[f64], p: f64, dg: Option<&mut [f64]>) -> f64 {
    let vmax = dens.iter().map(|d| 1.0 / d).fold(0.0, f64::max);
    let s: f64 = dens.iter().map(|d| (1.0 / (d * vmax)).powf(p)).sum();
    if let Some(dg) = dg {
        for (g, d) in dg.iter_mut().zip(dens) {
            let v = 1.0 / d;
            *g = -(v / vmax).powf(p) / s * v;
        }
    }
    vmax.ln() + s.ln() / p
}

fn check_denominators(dens: &[f64]) -> Result<()> {
    match dens.iter().position(|d| !(*d > 0.0)) {
        Some(index) => Err(Error::NonPositiveDenominator {
            index,
            value: dens[index],
        }),
        None => Ok(()),
    }
}

/// `|| (1 / (g_k + htilde))_k ||_p` along a state sequence.
pub fn pnorm_objective(
    spec: &SynthesisSpec,
    field: &ConstraintField,
    x_seq: &[Vec<f64>],
    htilde: f64,
) -> Result<f64> {
    let dens: Vec<f64> = stage_values(spec, field, x_seq)
        .into_iter()
        .map(|g| g + htilde)
        .collect();
    check_denominators(&dens)?;
    Ok(ln_pnorm(&dens, spec.pnorm as f64, None).exp())
}

/// The p-norm objective of the rollout from `x0` under `u_seq` and its
/// gradient with respect to every input, by an adjoint sweep through RK4.
pub fn pnorm_objective_gradient(
    spec: &SynthesisSpec,
    sys: &ControlSystem,
    field: &ConstraintField,
    x0: &[f64],
    u_seq: &[Vec<f64>],
    htilde: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if u_seq.len() != spec.steps {
        return Err(Error::DimensionMismatch {
            what: "input sequence",
            expected: spec.steps,
            got: u_seq.len(),
        });
    }
    let m = sys.input_dim();
    let flat: Vec<f64> = u_seq.iter().flat_map(|u| u.iter().copied()).collect();
    if flat.len() != spec.steps * m {
        return Err(Error::DimensionMismatch {
            what: "input",
            expected: m,
            got: u_seq.iter().map(|u| u.len()).find(|l| *l != m).unwrap_or(0),
        });
    }
    let eval = Evaluator::new(spec, sys, field, 0.0, htilde);
    let mut ws = Workspace::new(spec.steps, m);
    eval.rollout(x0, &flat, &mut ws)
        .map_err(|step| Error::NonFiniteState { step })?;
    ws.u.copy_from_slice(&flat);
    eval.stage(&mut ws);
    let dens: Vec<f64> = ws.g.iter().map(|g| g + htilde).collect();
    check_denominators(&dens)?;
    let ln = eval.objective(&mut ws, 0.0, true);
    let value = ln.exp();
    let grad = ws
        .grad
        .chunks(m)
        .map(|c| c.iter().map(|g| g * value).collect())
        .collect();
    Ok((value, grad))
}

/// `min(value, level)` with the level from [`SynthesisSpec::saturation_level`].
pub fn saturate(spec: &SynthesisSpec, value: f64) -> f64 {
    value.min(spec.saturation_level())
}

/// The saturation level for states in `F` when saturation is enabled.
pub fn f_shortcut(
    spec: &SynthesisSpec,
    sub: &InvariantSubset,
    field: &ConstraintField,
    x0: &[f64],
) -> Option<f64> {
    (spec.saturate && sub.contains(field, x0, spec.delta)).then(|| spec.saturation_level())
}

struct Workspace {
    xs: Vec<StateBuf>,
    h: Vec<f64>,
    dh: Vec<StateBuf>,
    g: Vec<f64>,
    dg: Vec<f64>,
    grad: Vec<f64>,
    u: Vec<f64>,
}

impl Workspace {
    fn new(steps: usize, m: usize) -> Self {
        Self {
            xs: vec![[0.0; MAX_STATE]; steps + 1],
            h: vec![0.0; steps + 1],
            dh: vec![[0.0; MAX_STATE]; steps + 1],
            g: vec![0.0; steps + 1],
            dg: vec![0.0; steps + 1],
            grad: vec![0.0; steps * m],
            u: vec![0.0; steps * m],
        }
    }
}

/// Objective evaluation in physical input coordinates.
struct Evaluator<'a> {
    spec: &'a SynthesisSpec,
    sys: &'a ControlSystem,
    field: &'a ConstraintField,
    abar: ClippedAlpha,
    threshold: f64,
    htilde: f64,
    n: usize,
    m: usize,
    dt: f64,
}

impl<'a> Evaluator<'a> {
    fn new(
        spec: &'a SynthesisSpec,
        sys: &'a ControlSystem,
        field: &'a ConstraintField,
        threshold: f64,
        htilde: f64,
    ) -> Self {
        Self {
            spec,
            sys,
            field,
            abar: spec.class_ke().clipped(),
            threshold,
            htilde,
            n: sys.state_dim(),
            m: sys.input_dim(),
            dt: spec.dt(),
        }
    }

    /// Fills `ws.xs`; on failure returns the 1-based step that blew up.
    fn rollout(&self, x0: &[f64], u: &[f64], ws: &mut Workspace) -> std::result::Result<(), usize> {
        ws.xs[0][..self.n].copy_from_slice(&x0[..self.n]);
        for k in 0..self.spec.steps {
            let (head, tail) = ws.xs.split_at_mut(k + 1);
            rk4_into(self.sys, &head[k], &u[k * self.m..(k + 1) * self.m], self.dt, &mut tail[0])
                .map_err(|_| k + 1)?;
        }
        Ok(())
    }

    /// Constraint values, gradients and stage values of the current rollout.
    fn stage(&self, ws: &mut Workspace) {
        for k in 0..=self.spec.steps {
            let x = ws.xs[k];
            ws.h[k] = self.field.eval_with_gradient(&x[..self.n], &mut ws.dh[k][..self.n]);
            ws.g[k] = stage_value(self.spec, &self.abar, ws.h[k], k);
        }
    }

    /// Index whose terminal violation is penalized and its violation of
    /// `target`.
    fn terminal(&self, h: &[f64], target: f64) -> (usize, f64) {
        let idx = match self.spec.terminal_mode {
            TerminalMode::AtFinalStep => h.len() - 1,
            TerminalMode::AnyTime => argmin(&h.iter().map(|v| target - v).collect::<Vec<_>>()),
        };
        (idx, (target - h[idx]).max(0.0))
    }

    /// `ln ||v||_p + mu * violation^2` of the staged rollout, and optionally
    /// its gradient with respect to the inputs in `ws.grad`. Returns
    /// `+inf` if a denominator is not positive.
    fn objective(&self, ws: &mut Workspace, mu: f64, want_grad: bool) -> f64 {
        let dens: Vec<f64> = ws.g.iter().map(|g| g + self.htilde).collect();
        if dens.iter().any(|d| !(*d > 0.0)) {
            return f64::INFINITY;
        }
        let p = self.spec.pnorm as f64;
        let mut j = ln_pnorm(&dens, p, if want_grad { Some(&mut ws.dg) } else { None });
        let mut pen_idx = 0;
        let mut pen_slope = 0.0;
        if mu > 0.0 {
            let (idx, viol) = self.terminal(&ws.h, self.threshold);
            j += mu * viol * viol;
            pen_idx = idx;
            pen_slope = -2.0 * mu * viol;
        }
        if !want_grad {
            return j;
        }
        let (n, m) = (self.n, self.m);
        let coef = |ws: &Workspace, k: usize| {
            let mut c = ws.dg[k] * stage_slope(self.spec, &self.abar, ws.h[k], k);
            if k == pen_idx {
                c += pen_slope;
            }
            c
        };
        let steps = self.spec.steps;
        let mut adj = [0.0; MAX_STATE];
        let c = coef(ws, steps);
        for (a, d) in adj[..n].iter_mut().zip(&ws.dh[steps]) {
            *a = c * d;
        }
        let mut adj_x = [0.0; MAX_STATE];
        let mut adj_u = [0.0; MAX_INPUT];
        for k in (0..steps).rev() {
            rk4_vjp(
                self.sys,
                &ws.xs[k],
                &ws.u[k * m..(k + 1) * m],
                self.dt,
                &adj,
                &mut adj_x,
                &mut adj_u,
            );
            ws.grad[k * m..(k + 1) * m].copy_from_slice(&adj_u[..m]);
            let c = coef(ws, k);
            for i in 0..n {
                adj[i] = adj_x[i] + c * ws.dh[k][i];
            }
        }
        j
    }
}

/// Score of a candidate trajectory; larger is better.
#[derive(Debug, Clone, Copy)]
struct Score {
    feasible: bool,
    violation: f64,
    value: f64,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.value > other.value,
            (false, false) => {
                self.violation < other.violation
                    || (self.violation == other.violation && self.value > other.value)
            }
        }
    }
}

/// Pointwise solver bound to one synthesis problem.
pub struct PointSolver<'a> {
    spec: &'a SynthesisSpec,
    sys: &'a ControlSystem,
    field: &'a ConstraintField,
    sub: InvariantSubset,
    threshold: f64,
    htilde: f64,
    options: SolverOptions,
}

impl<'a> PointSolver<'a> {
    pub fn new(
        spec: &'a SynthesisSpec,
        sys: &'a ControlSystem,
        field: &'a ConstraintField,
        sub: &InvariantSubset,
        htilde: f64,
        options: SolverOptions,
    ) -> Result<Self> {
        if spec.steps == 0 || !(spec.horizon > 0.0) {
            return Err(Error::Config("horizon and steps must be positive".into()));
        }
        if spec.pnorm == 0 || !spec.pnorm.is_multiple_of(2) {
            return Err(Error::Config(format!("p must be even and positive, got {}", spec.pnorm)));
        }
        if field.min_state_dim() > sys.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "constraint state",
                expected: sys.state_dim(),
                got: field.min_state_dim(),
            });
        }
        Ok(Self {
            spec,
            sys,
            field,
            sub: *sub,
            threshold: sub.threshold(spec.delta),
            htilde,
            options,
        })
    }

    pub fn spec(&self) -> &SynthesisSpec {
        self.spec
    }

    pub fn htilde(&self) -> f64 {
        self.htilde
    }

    fn lo_width(&self) -> Vec<(f64, f64)> {
        self.sys
            .input_box()
            .iter()
            .map(|[lo, hi]| (*lo, hi - lo))
            .collect()
    }

    fn to_physical(&self, s: &[f64], u: &mut [f64]) {
        let lw = self.lo_width();
        let m = lw.len();
        for (i, (ui, si)) in u.iter_mut().zip(s).enumerate() {
            let (lo, w) = lw[i % m];
            *ui = lo + si * w;
        }
    }

    fn to_normalized(&self, u: &[f64]) -> Vec<f64> {
        let lw = self.lo_width();
        let m = lw.len();
        u.iter()
            .enumerate()
            .map(|(i, ui)| {
                let (lo, w) = lw[i % m];
                if w > 0.0 {
                    ((ui - lo) / w).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn score(&self, ws: &Workspace) -> Score {
        let eval = self.evaluator(self.htilde);
        let (_, viol) = eval.terminal(&ws.h, self.threshold);
        let k = argmin(&ws.g);
        Score {
            feasible: viol <= 0.0,
            violation: viol,
            value: ws.g[k],
        }
    }

    fn evaluator(&self, htilde: f64) -> Evaluator<'_> {
        Evaluator::new(self.spec, self.sys, self.field, self.threshold, htilde)
    }

    /// Rolls out `inputs` from `x0` without optimizing and scores them.
    pub fn evaluate_inputs(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<PointSolve> {
        let m = self.sys.input_dim();
        let mut flat: Vec<f64> = inputs.iter().flat_map(|u| u.iter().copied()).collect();
        if flat.len() != self.spec.steps * m {
            return Err(Error::DimensionMismatch {
                what: "input sequence",
                expected: self.spec.steps * m,
                got: flat.len(),
            });
        }
        for u in flat.chunks_mut(m) {
            self.sys.clamp_input(u);
        }
        let mut ws = Workspace::new(self.spec.steps, m);
        self.evaluator(self.htilde)
            .rollout(x0, &flat, &mut ws)
            .map_err(|step| Error::NonFiniteState { step })?;
        ws.u.copy_from_slice(&flat);
        self.evaluator(self.htilde).stage(&mut ws);
        Ok(self.finish(x0, &ws, 0, true))
    }

    fn finish(&self, x0: &[f64], ws: &Workspace, restarts: usize, converged: bool) -> PointSolve {
        let (n, m) = (self.sys.state_dim(), self.sys.input_dim());
        let x_star: Vec<Vec<f64>> = ws.xs.iter().map(|x| x[..n].to_vec()).collect();
        let g = stage_values(self.spec, self.field, &x_star);
        let k_star = argmin(&g);
        let terminal_index = match self.spec.terminal_mode {
            TerminalMode::AnyTime => x_star
                .iter()
                .position(|x| self.sub.contains(self.field, x, self.spec.delta)),
            TerminalMode::AtFinalStep => {
                let last = x_star.len() - 1;
                self.sub
                    .contains(self.field, &x_star[last], self.spec.delta)
                    .then_some(last)
            }
        };
        PointSolve {
            x0: x0.to_vec(),
            u_star: ws.u.chunks(m).map(|c| c.to_vec()).collect(),
            k_star,
            value: g[k_star],
            feasible: terminal_index.is_some(),
            terminal_index,
            x_star,
            restarts_used: restarts,
            converged,
        }
    }

    /// Input held at the box lattice point maximizing `h` after a short
    /// lookahead, chosen step by step.
    fn greedy_start(&self, x0: &[f64]) -> Vec<f64> {
        let (n, m) = (self.sys.state_dim(), self.sys.input_dim());
        let dt = self.spec.dt();
        let lattice: Vec<Vec<f64>> = (0..3usize.pow(m as u32))
            .map(|mut code| {
                self.sys
                    .input_box()
                    .iter()
                    .map(|[lo, hi]| {
                        let v = lo + (hi - lo) * (code % 3) as f64 / 2.0;
                        code /= 3;
                        v
                    })
                    .collect()
            })
            .collect();
        let steps = self.spec.steps;
        let mut x: StateBuf = [0.0; MAX_STATE];
        x[..n].copy_from_slice(x0);
        let mut out = Vec::with_capacity(steps * m);
        for k in 0..steps {
            let look = self.options.greedy_lookahead.max(1).min(steps - k);
            let mut best = (f64::NEG_INFINITY, 0);
            for (ci, c) in lattice.iter().enumerate() {
                let mut y = x;
                let mut ok = true;
                for _ in 0..look {
                    let mut next = [0.0; MAX_STATE];
                    if rk4_into(self.sys, &y, c, dt, &mut next).is_err() {
                        ok = false;
                        break;
                    }
                    y = next;
                }
                let score = if ok { self.field.eval(&y[..n]) } else { f64::NEG_INFINITY };
                if score > best.0 {
                    best = (score, ci);
                }
            }
            let c = &lattice[best.1];
            let mut next = [0.0; MAX_STATE];
            if rk4_into(self.sys, &x, c, dt, &mut next).is_ok() {
                x = next;
            }
            out.extend_from_slice(c);
        }
        out
    }

    fn initial_guesses(&self, x0: &[f64], seed: u64, warm: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let steps = self.spec.steps;
        let rest: Vec<f64> = (0..steps).flat_map(|_| self.sys.rest_input()).collect();
        let mut starts = vec![self.to_normalized(&rest), self.to_normalized(&self.greedy_start(x0))];
        if let Some(w) = warm {
            let flat: Vec<f64> = w.iter().flat_map(|u| u.iter().copied()).collect();
            if flat.len() == rest.len() {
                starts.push(self.to_normalized(&flat));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        starts.push((0..rest.len()).map(|_| rng.random::<f64>()).collect());
        starts
    }

    /// Solves from `x0`. `seed` drives the random restart; `warm` is an
    /// optional extra initial guess.
    pub fn solve(&self, x0: &[f64], seed: u64, warm: Option<&[Vec<f64>]>) -> Result<PointSolve> {
        if x0.len() != self.sys.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.sys.state_dim(),
                got: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite initial state {x0:?}")));
        }
        let starts = self.initial_guesses(x0, seed, warm);
        let m = self.sys.input_dim();
        let mut ws = Workspace::new(self.spec.steps, m);
        let mut best: Option<(Score, PointSolve)> = None;
        for (r, s0) in starts.iter().enumerate() {
            let Some(converged) = self.optimize(x0, s0.clone(), &mut ws) else {
                continue;
            };
            let score = self.score(&ws);
            if best.as_ref().is_none_or(|(b, _)| score.better_than(b)) {
                best = Some((score, self.finish(x0, &ws, r + 1, converged)));
            }
        }
        match best {
            Some((_, mut sol)) => {
                sol.restarts_used = starts.len();
                Ok(sol)
            }
            None => Err(Error::NonFiniteState { step: 1 }),
        }
    }

    /// Optimizes from `inputs` alone, without the other restarts.
    pub fn refine(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<PointSolve> {
        let m = self.sys.input_dim();
        let flat: Vec<f64> = inputs.iter().flat_map(|u| u.iter().copied()).collect();
        if flat.len() != self.spec.steps * m {
            return Err(Error::DimensionMismatch {
                what: "input sequence",
                expected: self.spec.steps * m,
                got: flat.len(),
            });
        }
        let mut ws = Workspace::new(self.spec.steps, m);
        let converged = self
            .optimize(x0, self.to_normalized(&flat), &mut ws)
            .ok_or(Error::NonFiniteState { step: 1 })?;
        Ok(self.finish(x0, &ws, 1, converged))
    }

    /// Runs the penalty rounds from normalized start `s`; leaves the final
    /// rollout staged in `ws`. Returns `None` if the start cannot be rolled
    /// out, otherwise whether every round converged.
    fn optimize(&self, x0: &[f64], mut s: Vec<f64>, ws: &mut Workspace) -> Option<bool> {
        self.to_physical(&s, &mut ws.u);
        let u = ws.u.clone();
        self.evaluator(self.htilde).rollout(x0, &u, ws).ok()?;
        self.evaluator(self.htilde).stage(ws);
        // keep the surrogate well defined for starts that dip below the
        // configured offset
        let gmin = ws.g.iter().copied().fold(f64::INFINITY, f64::min);
        let htilde = self.htilde.max(1.0 - gmin);
        let eval = self.evaluator(htilde);
        let target = self.threshold + self.options.terminal_margin;
        let eval = Evaluator { threshold: target, ..eval };

        let mut all_converged = true;
        for &mu in &self.options.penalty_schedule {
            let converged = self.descend(&eval, x0, &mut s, mu, ws);
            all_converged &= converged;
            if self.score(ws).feasible {
                break;
            }
        }
        // restage the accepted iterate
        self.to_physical(&s, &mut ws.u);
        let u = ws.u.clone();
        eval.rollout(x0, &u, ws).ok()?;
        eval.stage(ws);
        Some(all_converged)
    }

    fn eval_at(&self, eval: &Evaluator, x0: &[f64], s: &[f64], mu: f64, ws: &mut Workspace, grad: bool) -> f64 {
        self.to_physical(s, &mut ws.u);
        let u = std::mem::take(&mut ws.u);
        let ok = eval.rollout(x0, &u, ws).is_ok();
        ws.u = u;
        if !ok {
            return f64::INFINITY;
        }
        eval.stage(ws);
        let j = eval.objective(ws, mu, grad);
        if grad && j.is_finite() {
            // chain rule into normalized coordinates
            let lw = self.lo_width();
            let m = lw.len();
            for (i, g) in ws.grad.iter_mut().enumerate() {
                *g *= lw[i % m].1;
            }
        }
        j
    }

    /// Projected gradient descent with Barzilai-Borwein steps and Armijo
    /// backtracking on the box `[0, 1]^(N m)`. Returns whether a stopping
    /// tolerance was met before the iteration cap.
    fn descend(&self, eval: &Evaluator, x0: &[f64], s: &mut [f64], mu: f64, ws: &mut Workspace) -> bool {
        let o = &self.options;
        let mut j = self.eval_at(eval, x0, s, mu, ws, true);
        if !j.is_finite() {
            return false;
        }
        let mut grad = ws.grad.clone();
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let mut t = if gmax > 0.0 { 0.1 / gmax } else { 1.0 };
        let mut history = vec![j];
        let mut trial = vec![0.0; s.len()];
        for _ in 0..o.max_iterations {
            let mut accepted = false;
            let mut step_norm = 0.0f64;
            for _ in 0..40 {
                let mut slope = 0.0;
                step_norm = 0.0;
                for i in 0..s.len() {
                    trial[i] = (s[i] - t * grad[i]).clamp(0.0, 1.0);
                    let d = trial[i] - s[i];
                    slope += grad[i] * d;
                    step_norm = step_norm.max(d.abs());
                }
                if step_norm < o.step_tolerance {
                    return true;
                }
                let jt = self.eval_at(eval, x0, &trial, mu, ws, false);
                if jt <= j + o.armijo * slope {
                    accepted = true;
                    j = jt;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return true;
            }
            let _ = step_norm;
            let jt = self.eval_at(eval, x0, &trial, mu, ws, true);
            debug_assert_eq!(jt, j);
            let mut sy = 0.0;
            let mut ss = 0.0;
            for i in 0..s.len() {
                let ds = trial[i] - s[i];
                sy += ds * (ws.grad[i] - grad[i]);
                ss += ds * ds;
            }
            t = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (t * 2.0).min(1e10) };
            s.copy_from_slice(&trial);
            grad.copy_from_slice(&ws.grad);
            history.push(j);
            let w = o.decrease_window;
            if history.len() > w {
                let old = history[history.len() - 1 - w];
                if old - j <= o.decrease_tolerance * j.abs().max(1.0) {
                    return true;
                }
            }
        }
        false
    }
}

/// One-shot solve with default options. Without a configured offset the
/// offset is derived from `h(x0)`; starts that need more get it per restart.
pub fn solve_point(
    spec: &SynthesisSpec,
    sys: &ControlSystem,
    field: &ConstraintField,
    sub: &InvariantSubset,
    x0: &[f64],
    seed: u64,
) -> Result<PointSolve> {
    let htilde = spec.resolved_htilde(field.eval(x0));
    PointSolver::new(spec, sys, field, sub, htilde, SolverOptions::default())?.solve(x0, seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DiscreteStepper;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn si_spec() -> SynthesisSpec {
        crate::constraint::test_support::single_integrator_spec()
    }

    fn obstacle() -> ConstraintField {
        ConstraintField::circle([0.0, 0.0], 9.0)
    }

    fn f1() -> InvariantSubset {
        InvariantSubset::Superlevel { threshold: 1.0 }
    }

    #[test]
    fn pnorm_examples() {
        let spec = SynthesisSpec { steps: 1, ..si_spec() };
        let h = ConstraintField::circle([0.0, 0.0], 0.0);
        // single entry h = 1, offset 2
        let one = pnorm_objective(&spec, &h, &[vec![1.0, 0.0]], 2.0).unwrap();
        assert_abs_diff_eq!(one, 1.0 / 3.0, epsilon = 1e-15);
        // equal denominators: h(x1) - gamma dt = h(x0)
        let dt = spec.dt();
        let xs = vec![vec![1.0, 0.0], vec![1.0 + 2.0 * dt, 0.0]];
        let two = pnorm_objective(&spec, &h, &xs, 2.0).unwrap();
        assert_abs_diff_eq!(two, 2f64.powf(1.0 / 40.0) / 3.0, epsilon = 1e-14);

        let err = pnorm_objective(&spec, &h, &[vec![1.0, 0.0]], -1.0).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDenominator { index: 0, .. }));
    }

    #[test]
    fn saturation_examples() {
        let spec = si_spec();
        assert_eq!(saturate(&spec, 5.1421), 1.0);
        assert_eq!(saturate(&spec, -3.0), -3.0);
        let alpha = SynthesisSpec {
            variant: Variant::AlphaPenalty,
            delta: 5.0,
            ..spec.clone()
        };
        assert_eq!(saturate(&alpha, 7.0), 5.0);

        let sat = SynthesisSpec { saturate: true, ..spec };
        assert_eq!(f_shortcut(&sat, &f1(), &obstacle(), &[12.0, 0.0]), Some(1.0));
        assert_eq!(f_shortcut(&sat, &f1(), &obstacle(), &[10.0, 0.0]), Some(1.0));
        assert_eq!(f_shortcut(&sat, &f1(), &obstacle(), &[9.5, 0.0]), None);
    }

    #[test]
    fn escape_keeps_constraint_value() {
        let spec = si_spec();
        let sys = ControlSystem::single_integrator([[-2.0, 2.0], [-2.0, 2.0]]).unwrap();
        let x0 = [10.0, 10.0];
        let sol = solve_point(&spec, &sys, &obstacle(), &f1(), &x0, 7).unwrap();
        assert!(sol.feasible);
        assert_abs_diff_eq!(sol.value, 200f64.sqrt() - 9.0, epsilon = 0.05);
        assert!(sol.value <= obstacle().eval(&x0) + 1e-9);
        assert!(sol.u_star.iter().all(|u| sys.contains_input(u)));
        // value is recomputed from the trajectory
        let g = stage_values(&spec, &obstacle(), &sol.x_star);
        assert_eq!(sol.value, g[sol.k_star]);
        assert!(g[..sol.k_star].iter().all(|v| *v > sol.value));
    }

    #[test]
    fn unreachable_terminal_set_is_infeasible() {
        let spec = SynthesisSpec {
            horizon: 1.0,
            steps: 5,
            terminal_mode: TerminalMode::AtFinalStep,
            ..si_spec()
        };
        let sys = ControlSystem::single_integrator([[1.0, 2.0], [-2.0, 2.0]]).unwrap();
        let sol = solve_point(&spec, &sys, &obstacle(), &f1(), &[0.0, 0.0], 1).unwrap();
        assert!(!sol.feasible);
        assert!(sol.terminal_index.is_none());
    }

    #[test]
    fn forward_only_value_below_constraint() {
        let spec = si_spec();
        let sys = ControlSystem::single_integrator([[1.0, 2.0], [-2.0, 2.0]]).unwrap();
        let x0 = [-9.5, 0.0];
        let sol = solve_point(&spec, &sys, &obstacle(), &f1(), &x0, 3).unwrap();
        assert!(sol.feasible);
        assert!(sol.value < 0.0, "{}", sol.value);
        assert_abs_diff_eq!(obstacle().eval(&x0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let spec = SynthesisSpec { steps: 10, ..si_spec() };
        let sys = ControlSystem::single_integrator([[1.0, 2.0], [-2.0, 2.0]]).unwrap();
        let a = solve_point(&spec, &sys, &obstacle(), &f1(), &[-9.0, 2.0], 11).unwrap();
        let b = solve_point(&spec, &sys, &obstacle(), &f1(), &[-9.0, 2.0], 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_inputs_scores_given_sequence() {
        let spec = SynthesisSpec { steps: 5, horizon: 2.0, ..si_spec() };
        let sys = ControlSystem::single_integrator([[-2.0, 2.0], [-2.0, 2.0]]).unwrap();
        let field = obstacle();
        let solver = PointSolver::new(&spec, &sys, &field, &f1(), 30.0, SolverOptions::default()).unwrap();
        let sol = solver.evaluate_inputs(&[9.5, 0.0], &vec![vec![2.0, 0.0]; 5]).unwrap();
        let xs = DiscreteStepper::for_horizon(2.0, 5)
            .unwrap()
            .rollout(&sys, &[9.5, 0.0], &vec![vec![2.0, 0.0]; 5])
            .unwrap();
        assert_eq!(sol.x_star, xs);
        assert_eq!(sol.terminal_index, Some(1));
        // speed equals gamma so every stage value ties; the first wins
        assert_eq!(sol.k_star, 0);
    }

    fn gradient_check(sys: &ControlSystem, field: &ConstraintField, x0: &[f64], seed: u64) {
        let spec = SynthesisSpec { steps: 8, horizon: 4.0, ..si_spec() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<Vec<f64>> = (0..spec.steps)
            .map(|_| {
                sys.input_box()
                    .iter()
                    .map(|[lo, hi]| lo + (hi - lo) * rng.random::<f64>())
                    .collect()
            })
            .collect();
        let (val, grad) = pnorm_objective_gradient(&spec, sys, field, x0, &u, 60.0).unwrap();
        let stepper = DiscreteStepper::for_horizon(spec.horizon, spec.steps).unwrap();
        let f = |u: &[Vec<f64>]| {
            let xs = stepper.rollout(sys, x0, u).unwrap();
            pnorm_objective(&spec, field, &xs, 60.0).unwrap()
        };
        assert_abs_diff_eq!(val, f(&u), epsilon = 1e-15);
        for k in 0..spec.steps {
            for j in 0..sys.input_dim() {
                let e = 1e-6;
                let mut up = u.clone();
                let mut um = u.clone();
                up[k][j] += e;
                um[k][j] -= e;
                let fd = (f(&up) - f(&um)) / (2.0 * e);
                let err = (grad[k][j] - fd).abs() / fd.abs().max(grad[k][j].abs()).max(1e-9 * val);
                assert!(err < 1e-4, "k={k} j={j} adjoint={} fd={fd}", grad[k][j]);
            }
        }
    }

    #[test]
    fn adjoint_gradient_all_models() {
        use crate::dynamics::BicycleParams;
        let circle = obstacle();
        let si = ControlSystem::single_integrator([[-2.0, 2.0], [-2.0, 2.0]]).unwrap();
        let di = ControlSystem::double_integrator([[-1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let bi = ControlSystem::kinematic_bicycle(BicycleParams::default()).unwrap();
        let un = ControlSystem::unicycle([[1.0, 2.0], [-0.9, 0.9]]).unwrap();
        let mdi = ConstraintField::ModifiedDoubleIntegrator {
            center: [0.0, 0.0],
            radius: 9.0,
            eta: 1.0,
            velocity_bound: 2.0,
        };
        gradient_check(&si, &circle, &[3.0, -11.0], 1);
        gradient_check(&di, &mdi, &[12.0, 3.0, 0.3, -0.2], 2);
        gradient_check(&bi, &circle, &[-11.0, 2.0, 0.4], 3);
        gradient_check(&un, &circle, &[5.0, 10.0, -1.0], 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn pnorm_sandwich(v in prop::collection::vec(1e-3f64..10.0, 1..=31)) {
            let dens: Vec<f64> = v.iter().map(|x| 1.0 / x).collect();
            let norm = ln_pnorm(&dens, 40.0, None).exp();
            let vmax = v.iter().copied().fold(0.0, f64::max);
            prop_assert!(vmax <= norm * (1.0 + 1e-15));
            prop_assert!(norm <= vmax * (v.len() as f64).powf(1.0 / 40.0) * (1.0 + 1e-15));
        }
    }
}
