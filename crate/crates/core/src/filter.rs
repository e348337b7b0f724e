//! Baseline line tracking, the sampled safety filter and the closed-loop
//! simulator.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classk::ClassKe;
use crate::dynamics::{rk4_into, ControlSystem, Model, MAX_STATE};
use crate::error::{Error, Result};
use crate::grid::CbfGrid;
use crate::shift::ShiftSchedule;

/// Straight line to follow: `point + s * direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingLine {
    pub point: [f64; 2],
    pub direction: [f64; 2],
    /// Speed along the line for the integrators.
    pub cruise: f64,
}

impl TrackingLine {
    fn frame(&self) -> ([f64; 2], [f64; 2]) {
        let n = self.direction[0].hypot(self.direction[1]);
        let d = [self.direction[0] / n, self.direction[1] / n];
        (d, [-d[1], d[0]])
    }

    /// Signed distance to the line, positive to the left of `direction`.
    pub fn cross_track(&self, p: &[f64]) -> f64 {
        let (_, nrm) = self.frame();
        (p[0] - self.point[0]) * nrm[0] + (p[1] - self.point[1]) * nrm[1]
    }
}

fn one() -> f64 {
    1.0
}

fn three() -> f64 {
    3.0
}

/// Gains of the baseline controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineGains {
    /// Lateral gain of the integrator laws, 1/s.
    #[serde(default = "one")]
    pub lateral: f64,
    /// Velocity gain of the double integrator, 1/s.
    #[serde(default = "one")]
    pub velocity: f64,
    /// Pure-pursuit lookahead distance.
    #[serde(default = "three")]
    pub lookahead: f64,
    /// Heading gain of the unicycle, 1/s.
    #[serde(default = "one")]
    pub heading: f64,
}

impl Default for BaselineGains {
    fn default() -> Self {
        Self {
            lateral: 1.0,
            velocity: 1.0,
            lookahead: 3.0,
            heading: 1.0,
        }
    }
}

fn default_candidates() -> usize {
    21
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Symmetric positive-definite weight `P`; identity when absent.
    #[serde(default)]
    pub weight: Option<Vec<Vec<f64>>>,
    /// Robustness margin; each grid's synthesis value when absent.
    #[serde(default)]
    pub c_alpha: Option<f64>,
    /// Lattice points per input coordinate.
    #[serde(default = "default_candidates")]
    pub input_candidates: usize,
    /// Step of the directional difference; derived from the grid when absent.
    #[serde(default)]
    pub sigma_dini: Option<f64>,
    #[serde(default)]
    pub gains: BaselineGains,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            weight: None,
            c_alpha: None,
            input_candidates: 21,
            sigma_dini: None,
            gains: BaselineGains::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        self.weight_matrix(m)?;
        if matches!(self.c_alpha, Some(c) if !(c >= 0.0)) {
            return Err(Error::Config("filter c_alpha must be >= 0".into()));
        }
        if self.input_candidates < 2 {
            return Err(Error::Config("filter needs at least 2 input candidates per coordinate".into()));
        }
        if matches!(self.sigma_dini, Some(s) if !(s > 0.0)) {
            return Err(Error::Config("sigma_dini must be positive".into()));
        }
        Ok(())
    }

    /// `P` as a dense matrix, checked by Cholesky factorization.
    pub fn weight_matrix(&self, m: usize) -> Result<DMatrix<f64>> {
        let p = match &self.weight {
            None => return Ok(DMatrix::identity(m, m)),
            Some(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    return Err(Error::Config(format!("filter weight must be {m}x{m}")));
                }
                DMatrix::from_fn(m, m, |i, j| rows[i][j])
            }
        };
        let symmetric = (0..m).all(|i| (0..m).all(|j| (p[(i, j)] - p[(j, i)]).abs() <= 1e-12 * p.amax().max(1.0)));
        if !symmetric || p.clone().cholesky().is_none() {
            return Err(Error::Config("filter weight must be symmetric positive definite".into()));
        }
        Ok(p)
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Line-tracking input, clamped to the box.
pub fn baseline_input(sys: &ControlSystem, x: &[f64], line: &TrackingLine, gains: &BaselineGains) -> Vec<f64> {
    let (d, nrm) = line.frame();
    let e = line.cross_track(x);
    let mut u = match sys.model() {
        Model::SingleIntegrator => vec![
            line.cruise * d[0] - gains.lateral * e * nrm[0],
            line.cruise * d[1] - gains.lateral * e * nrm[1],
        ],
        Model::DoubleIntegrator => {
            let vd = [
                line.cruise * d[0] - gains.lateral * e * nrm[0],
                line.cruise * d[1] - gains.lateral * e * nrm[1],
            ];
            vec![gains.velocity * (vd[0] - x[2]), gains.velocity * (vd[1] - x[3])]
        }
        Model::Bicycle(_) | Model::Unicycle => {
            // pure pursuit towards the point `lookahead` ahead of the
            // projection onto the line
            let along = (x[0] - line.point[0]) * d[0] + (x[1] - line.point[1]) * d[1];
            let target = [
                line.point[0] + (along + gains.lookahead) * d[0],
                line.point[1] + (along + gains.lookahead) * d[1],
            ];
            let desired = (target[1] - x[1]).atan2(target[0] - x[0]);
            let err = wrap_angle(desired - x[2]);
            let [vlo, vhi] = sys.input_box()[0];
            let v = 0.5 * (vlo + vhi);
            match sys.model() {
                Model::Bicycle(p) => {
                    let dist = (target[0] - x[0]).hypot(target[1] - x[1]).max(1e-9);
                    let kl = 2.0 * err.sin() / dist * p.wheelbase;
                    // cos(beta(zeta)) tan(zeta) = kappa L
                    let tan = if kl.abs() < 2.0 {
                        kl / (1.0 - 0.25 * kl * kl).sqrt()
                    } else {
                        kl.signum() * 1e3
                    };
                    vec![v, tan.atan()]
                }
                _ => vec![v, gains.heading * err],
            }
        }
    };
    sys.clamp_input(&mut u);
    u
}

/// One value function acting as a constraint of the filter.
#[derive(Debug, Clone)]
pub struct FilterTerm<'a> {
    pub grid: &'a CbfGrid,
    pub schedule: ShiftSchedule,
    pub alpha: ClassKe,
    pub c_alpha: f64,
}

impl<'a> FilterTerm<'a> {
    /// Term with `alpha` and `c_alpha` from the grid metadata, `c_alpha`
    /// overridden by the filter configuration if set.
    pub fn from_grid(grid: &'a CbfGrid, schedule: ShiftSchedule, cfg: &FilterConfig) -> Self {
        let spec = &grid.meta().spec;
        Self {
            grid,
            schedule,
            alpha: spec.class_ke(),
            c_alpha: cfg.c_alpha.unwrap_or(spec.c_alpha),
        }
    }
}

/// Result of one filter call.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u: Vec<f64>,
    /// Some constraint rejected the baseline input.
    pub active: bool,
    /// No candidate satisfied every constraint.
    pub infeasible: bool,
    /// A query left the grid and was clamped.
    pub clamped: bool,
    /// A query touched an infeasible node.
    pub flagged: bool,
    /// `H_i(x) + lambda_i(t)` per term.
    pub shifted: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `dH_i + lambda_i' + alpha(H_i + lambda_i) - c_alpha` at `u`.
    pub residuals: Vec<f64>,
}

struct Prepared {
    shifted: Vec<f64>,
    lambda: Vec<f64>,
    rhs: Vec<f64>,
    base: Vec<f64>,
    clamped: bool,
    flagged: bool,
}

fn prepare(terms: &[FilterTerm], t: f64, x: &[f64]) -> Result<Prepared> {
    let mut p = Prepared {
        shifted: Vec::new(),
        lambda: Vec::new(),
        rhs: Vec::new(),
        base: Vec::new(),
        clamped: false,
        flagged: false,
    };
    for term in terms {
        let s = term.grid.sample_clamped(x)?;
        let l = term.schedule.eval(t);
        p.clamped |= s.clamped;
        p.flagged |= s.flagged;
        p.shifted.push(s.value + l);
        p.lambda.push(l);
        p.base.push(s.value);
        // constant part of the residual
        p.rhs.push(term.schedule.derivative(t) + term.alpha.eval(s.value + l) - term.c_alpha);
    }
    Ok(p)
}

struct Residuals<'a, 'b> {
    sys: &'a ControlSystem,
    terms: &'a [FilterTerm<'b>],
    prep: &'a Prepared,
    x: &'a [f64],
    sigma: Option<f64>,
}

impl Residuals<'_, '_> {
    /// Per-term residuals at `u`, and whether any query was clamped or
    /// flagged.
    fn eval(&self, u: &[f64], out: &mut Vec<f64>) -> (bool, bool) {
        out.clear();
        let mut f = [0.0; MAX_STATE];
        let n = self.sys.state_dim();
        self.sys.field(self.x, u, &mut f);
        let fv = &f[..n];
        let norm = fv.iter().map(|c| c * c).sum::<f64>().sqrt();
        let (mut clamped, mut flagged) = (false, false);
        let mut y = [0.0; MAX_STATE];
        for (i, term) in self.terms.iter().enumerate() {
            let d = if norm == 0.0 {
                0.0
            } else {
                let s = self
                    .sigma
                    .unwrap_or_else(|| 0.1 * term.grid.min_spacing() / norm.max(1.0));
                for j in 0..n {
                    y[j] = self.x[j] + s * fv[j];
                }
                match term.grid.sample_clamped(&y[..n]) {
                    Ok(smp) => {
                        clamped |= smp.clamped;
                        flagged |= smp.flagged;
                        (smp.value - self.prep.base[i]) / s
                    }
                    Err(_) => f64::NEG_INFINITY,
                }
            };
            out.push(d + self.prep.rhs[i]);
        }
        (clamped, flagged)
    }
}

fn worst(r: &[f64]) -> f64 {
    r.iter().copied().fold(f64::INFINITY, f64::min)
}

fn cost(p: &DMatrix<f64>, u: &[f64], ub: &[f64]) -> f64 {
    let m = u.len();
    let mut c = 0.0;
    for i in 0..m {
        for j in 0..m {
            c += (u[i] - ub[i]) * p[(i, j)] * (u[j] - ub[j]);
        }
    }
    c
}

/// Points of a `k^m` lattice over `lo..hi` per coordinate.
fn lattice(lo: &[f64], hi: &[f64], k: usize) -> Vec<Vec<f64>> {
    let m = lo.len();
    let total = k.pow(m as u32);
    (0..total)
        .map(|mut code| {
            let mut u = vec![0.0; m];
            for j in (0..m).rev() {
                let i = code % k;
                code /= k;
                u[j] = if hi[j] > lo[j] { lo[j] + (hi[j] - lo[j]) * i as f64 / (k - 1) as f64 } else { lo[j] };
            }
            u
        })
        .collect()
}

/// Minimally modified input `argmin (u - u_base)' P (u - u_base)` over the
/// box subject to every term's ascent condition.
///
/// A lattice over the box picks the best feasible candidate, which is then
/// refined by repeatedly laying a finer lattice around it. Without any
/// feasible candidate the input maximizing the worst residual is returned
/// and flagged.
pub fn safe_input(
    cfg: &FilterConfig,
    sys: &ControlSystem,
    terms: &[FilterTerm],
    t: f64,
    x: &[f64],
    u_base: &[f64],
) -> Result<FilterOutput> {
    let m = sys.input_dim();
    if x.len() != sys.state_dim() || u_base.len() != m {
        return Err(Error::DimensionMismatch {
            what: "filter state or input",
            expected: sys.state_dim(),
            got: x.len(),
        });
    }
    let p = cfg.weight_matrix(m)?;
    let prep = prepare(terms, t, x)?;
    let res = Residuals { sys, terms, prep: &prep, x, sigma: cfg.sigma_dini };
    let mut ub = u_base.to_vec();
    sys.clamp_input(&mut ub);
    let mut r = Vec::with_capacity(terms.len());
    let (mut clamped, mut flagged) = res.eval(&ub, &mut r);
    clamped |= prep.clamped;
    flagged |= prep.flagged;
    let finish = |u: Vec<f64>, residuals: Vec<f64>, active, infeasible, clamped, flagged| FilterOutput {
        u,
        active,
        infeasible,
        clamped,
        flagged,
        shifted: prep.shifted.clone(),
        lambda: prep.lambda.clone(),
        residuals,
    };
    if worst(&r) >= 0.0 {
        return Ok(finish(ub, r, false, false, clamped, flagged));
    }

    // score: feasible candidates by cost, otherwise by worst residual
    let better = |a: (bool, f64, f64), b: (bool, f64, f64)| match (a.0, b.0) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.1 < b.1,
        (false, false) => a.2 > b.2,
    };
    let lo: Vec<f64> = sys.input_box().iter().map(|b| b[0]).collect();
    let hi: Vec<f64> = sys.input_box().iter().map(|b| b[1]).collect();
    let k = cfg.input_candidates;
    let mut best_u = ub.clone();
    let mut best = (false, f64::INFINITY, worst(&r));
    let mut consider = |u: Vec<f64>, best_u: &mut Vec<f64>, best: &mut (bool, f64, f64), r: &mut Vec<f64>| {
        let (c, f) = res.eval(&u, r);
        clamped |= c;
        flagged |= f;
        let w = worst(r);
        let score = (w >= 0.0, cost(&p, &u, &ub), w);
        if better(score, *best) {
            *best = score;
            *best_u = u;
        }
    };
    for u in lattice(&lo, &hi, k) {
        consider(u, &mut best_u, &mut best, &mut r);
    }
    let mut half: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 2.0 * (b - a) / (k - 1) as f64).collect();
    for _ in 0..8 {
        let wlo: Vec<f64> = (0..m).map(|j| (best_u[j] - half[j]).max(lo[j])).collect();
        let whi: Vec<f64> = (0..m).map(|j| (best_u[j] + half[j]).min(hi[j])).collect();
        for u in lattice(&wlo, &whi, k) {
            consider(u, &mut best_u, &mut best, &mut r);
        }
        for h in half.iter_mut() {
            *h *= 4.0 / (k - 1) as f64;
        }
    }
    res.eval(&best_u, &mut r);
    Ok(finish(best_u, r.clone(), true, !best.0, clamped, flagged))
}

/// One row per step of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u_base: Vec<f64>,
    pub u_safe: Vec<f64>,
    /// Minimum over terms of `H_i(x) + lambda_i(t)`; `+inf` without terms.
    pub shifted_min: f64,
    /// `lambda` of the term attaining `shifted_min`.
    pub lambda_min: f64,
    /// Minimum over terms of the constraint function `h_i(x)`.
    pub h_min: f64,
    pub active: bool,
    pub infeasible: bool,
    pub clamped: bool,
    pub flagged: bool,
}

impl SimRow {
    pub fn flags(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.active, 'A'), (self.infeasible, 'I'), (self.clamped, 'C'), (self.flagged, 'F')] {
            if on {
                s.push(c);
            }
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub dt: f64,
    pub rows: Vec<SimRow>,
    /// Emitted as a leading `#` comment line.
    pub comment: Option<String>,
}

impl SimLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(c) = &self.comment {
            for line in c.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        let (n, m) = self
            .rows
            .first()
            .map(|r| (r.x.len(), r.u_base.len()))
            .unwrap_or((0, 0));
        s.push('t');
        for i in 0..n {
            let _ = write!(s, ",x{i}");
        }
        for p in ["ub", "us"] {
            for i in 0..m {
                let _ = write!(s, ",{p}{i}");
            }
        }
        s.push_str(",H_shifted_min,lambda_min,h_min,flags\n");
        for r in &self.rows {
            let _ = write!(s, "{:.16e}", r.t);
            for v in r.x.iter().chain(&r.u_base).chain(&r.u_safe) {
                let _ = write!(s, ",{v:.16e}");
            }
            let _ = writeln!(s, ",{:.16e},{:.16e},{:.16e},{}", r.shifted_min, r.lambda_min, r.h_min, r.flags());
        }
        s
    }

    pub fn min_shifted(&self) -> f64 {
        self.rows.iter().map(|r| r.shifted_min).fold(f64::INFINITY, f64::min)
    }

    pub fn min_h(&self) -> f64 {
        self.rows.iter().map(|r| r.h_min).fold(f64::INFINITY, f64::min)
    }
}

/// Fixed-step closed loop: baseline, filter, RK4 step. States leaving the
/// grid are queried clamped and flagged; the run continues.
pub fn simulate(
    sys: &ControlSystem,
    dt: f64,
    terms: &[FilterTerm],
    cfg: &FilterConfig,
    line: &TrackingLine,
    x0: &[f64],
    t_end: f64,
) -> Result<SimLog> {
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::Config(format!("need dt > 0 and t_end > 0, got {dt}, {t_end}")));
    }
    if x0.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.state_dim(),
            got: x0.len(),
        });
    }
    cfg.validate(sys.input_dim())?;
    let steps = (t_end / dt).round() as usize;
    let n = sys.state_dim();
    let mut x = x0.to_vec();
    let mut rows = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let ub = baseline_input(sys, &x, line, &cfg.gains);
        let out = safe_input(cfg, sys, terms, t, &x, &ub)?;
        let (mut smin, mut lmin) = (f64::INFINITY, f64::NAN);
        for (s, l) in out.shifted.iter().zip(&out.lambda) {
            if *s < smin {
                smin = *s;
                lmin = *l;
            }
        }
        if terms.is_empty() {
            lmin = 0.0;
        }
        let h_min = terms
            .iter()
            .map(|term| term.grid.meta().constraint.eval(&x))
            .fold(f64::INFINITY, f64::min);
        rows.push(SimRow {
            t,
            x: x.clone(),
            u_base: ub,
            u_safe: out.u.clone(),
            shifted_min: smin,
            lambda_min: lmin,
            h_min,
            active: out.active,
            infeasible: out.infeasible,
            clamped: out.clamped,
            flagged: out.flagged,
        });
        if k == steps {
            break;
        }
        let mut next = [0.0; MAX_STATE];
        rk4_into(sys, &x, &out.u, dt, &mut next).map_err(|_| Error::NonFiniteState { step: k + 1 })?;
        x.copy_from_slice(&next[..n]);
        for &a in sys.model().angular_coordinates() {
            x[a] = wrap_angle(x[a]);
        }
    }
    Ok(SimLog { dt, rows, comment: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::Axis;
    use crate::dynamics::BicycleParams;
    use crate::grid::test_support::grid_from;
    use approx::assert_abs_diff_eq;

    fn si() -> ControlSystem {
        ControlSystem::single_integrator([[-2.0, 2.0], [-2.0, 2.0]]).unwrap()
    }

    fn line() -> TrackingLine {
        TrackingLine { point: [0.0, 0.5], direction: [1.0, 0.0], cruise: 0.4 }
    }

    #[test]
    fn baseline_examples() {
        let g = BaselineGains::default();
        assert_eq!(baseline_input(&si(), &[-3.0, 0.5], &line(), &g), vec![0.4, 0.0]);
        assert!(baseline_input(&si(), &[-3.0, 1.5], &line(), &g)[1] < 0.0);
        let bike = ControlSystem::kinematic_bicycle(BicycleParams::default()).unwrap();
        let u = baseline_input(&bike, &[-3.0, 0.5, 0.0], &line(), &g);
        assert_eq!(u, vec![1.5, 0.0]);
        let uni = ControlSystem::unicycle([[1.0, 2.0], [-0.9, 0.9]]).unwrap();
        let u = baseline_input(&uni, &[-3.0, 2.5, 0.0], &line(), &g);
        assert!(u[1] < 0.0 && bike.contains_input(&[1.5, 0.0]));
    }

    #[test]
    fn weight_must_be_spd() {
        let bad = FilterConfig { weight: Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]), ..Default::default() };
        assert!(bad.validate(2).is_err());
        let good = FilterConfig { weight: Some(vec![vec![2.0, 0.5], vec![0.5, 1.0]]), ..Default::default() };
        assert!(good.validate(2).is_ok());
    }

    fn linear_term(grid: &CbfGrid) -> FilterTerm<'_> {
        FilterTerm {
            grid,
            schedule: ShiftSchedule::Constant { value: 0.0 },
            alpha: ClassKe::new(2.0, 2.0).unwrap(),
            c_alpha: 0.2,
        }
    }

    #[test]
    fn inactive_constraint_returns_baseline() {
        let g = grid_from(vec![Axis::new(-10.0, 10.0, 5); 2], |x| 20.0 + x[0]);
        let term = linear_term(&g);
        let out = safe_input(&FilterConfig::default(), &si(), &[term], 0.0, &[0.0, 0.0], &[-1.3, 0.7]).unwrap();
        assert_eq!(out.u, vec![-1.3, 0.7]);
        assert!(!out.active && !out.infeasible);
    }

    #[test]
    fn matches_box_projection_on_linear_constraint() {
        // H = a.x + b is linear, so dH(x; u) = a.u and the constraint is the
        // half-space a.u >= c_alpha - alpha(H)
        let a = [0.6, 0.8];
        let g = grid_from(vec![Axis::new(-10.0, 10.0, 5); 2], |x| a[0] * x[0] + a[1] * x[1] - 0.5);
        let x = [0.5, 0.0];
        let term = linear_term(&g);
        let hval = a[0] * x[0] - 0.5;
        let rhs = 0.2 - term.alpha.eval(hval);
        let ub = [-1.5, -1.0];
        let out = safe_input(&FilterConfig::default(), &si(), &[term], 0.0, &x, &ub).unwrap();
        assert!(out.active && !out.infeasible);
        assert!(out.residuals[0] >= 0.0);
        // oracle: project onto a.u = rhs, then clamp along the boundary line
        let dot = a[0] * ub[0] + a[1] * ub[1];
        let mut u = [ub[0] + (rhs - dot) * a[0], ub[1] + (rhs - dot) * a[1]];
        if u[0] < -2.0 || u[0] > 2.0 {
            u[0] = u[0].clamp(-2.0, 2.0);
            u[1] = (rhs - a[0] * u[0]) / a[1];
        }
        assert!(si().contains_input(&u));
        assert_abs_diff_eq!(out.u[0], u[0], epsilon = 1e-3);
        assert_abs_diff_eq!(out.u[1], u[1], epsilon = 1e-3);
    }

    #[test]
    fn ascent_condition_holds_at_boundary() {
        let g = grid_from(vec![Axis::new(-10.0, 10.0, 21); 2], |x| x[0].hypot(x[1]) - 9.0);
        let term = linear_term(&g);
        let x = [9.0, 0.0];
        let out = safe_input(&FilterConfig::default(), &si(), &[term], 0.0, &x, &[-2.0, 0.0]).unwrap();
        assert!(out.residuals[0] >= 0.0);
        let d = g.dini_directional(&x, &out.u).unwrap();
        assert!(d >= 0.2 - 1e-9);
    }

    #[test]
    fn no_terms_tracks_baseline_and_logs() {
        let log = simulate(&si(), 0.1, &[], &FilterConfig::default(), &line(), &[-9.5, 0.5], 1.0).unwrap();
        assert_eq!(log.rows.len(), 11);
        assert_abs_diff_eq!(log.rows[10].x[0], -9.1, epsilon = 1e-12);
        assert!(log.rows.iter().all(|r| r.u_safe == r.u_base));
        let csv = log.to_csv();
        assert!(csv.starts_with("t,x0,x1,ub0,ub1,us0,us1,H_shifted_min,lambda_min,h_min,flags\n"));
        let again = simulate(&si(), 0.1, &[], &FilterConfig::default(), &line(), &[-9.5, 0.5], 1.0).unwrap();
        assert_eq!(csv, again.to_csv());
    }
}
