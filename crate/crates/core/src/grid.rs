//! Value-function grids: synthesis over a domain, multilinear interpolation,
//! directional differences, superlevel queries and the binary file format.
//!
//! Nodes are stored row-major with the last axis fastest. On a wrapping
//! axis the last node duplicates the first.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::constraint::{validate_spec, Axis, ConstraintField, DomainBox, InvariantSubset, SynthesisSpec};
use crate::dynamics::ControlSystem;
use crate::error::{Error, Result};
use crate::synthesis::{f_shortcut, point_seed, saturate, PointSolve, PointSolver, SolverOptions};

const MAGIC: &[u8; 4] = b"CBFG";
const VERSION: u32 = 1;

/// Everything needed to reproduce a grid. Serialized into the file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub axes: Vec<Axis>,
    pub model: ModelConfig,
    pub constraint: ConstraintField,
    pub invariant_subset: InvariantSubset,
    pub spec: SynthesisSpec,
    pub solver: SolverOptions,
    pub htilde: f64,
    pub seed: u64,
    pub saturated: bool,
    /// Producer name and version.
    pub creator: String,
    /// Run configuration text, verbatim, when synthesized from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

/// Largest admissible shift of the value function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftBound {
    pub capital_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbfGrid {
    meta: GridMeta,
    values: Vec<f64>,
    feasible: Vec<bool>,
}

/// A multilinear query: value and whether any weighted corner is flagged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub flagged: bool,
    /// The query was moved onto the domain.
    pub clamped: bool,
}

impl CbfGrid {
    pub fn new(meta: GridMeta, values: Vec<f64>, feasible: Vec<bool>) -> Result<Self> {
        let domain = DomainBox::new(meta.axes.clone())?;
        if values.len() != domain.len() || feasible.len() != domain.len() {
            return Err(Error::DimensionMismatch {
                what: "grid values",
                expected: domain.len(),
                got: values.len().min(feasible.len()),
            });
        }
        Ok(Self { meta, values, feasible })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn axes(&self) -> &[Axis] {
        &self.meta.axes
    }

    pub fn domain(&self) -> DomainBox {
        DomainBox { axes: self.meta.axes.clone() }
    }

    pub fn dim(&self) -> usize {
        self.meta.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feasible(&self) -> &[bool] {
        &self.feasible
    }

    pub fn system(&self) -> Result<ControlSystem> {
        self.meta.model.build()
    }

    /// Mutable access for tooling that corrupts or edits grids on purpose.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.domain().node(flat)
    }

    /// Stored value, or the strongly negative sentinel for flagged nodes.
    pub fn node_value(&self, flat: usize) -> f64 {
        if self.feasible[flat] {
            self.values[flat]
        } else {
            self.meta.spec.infeasible_sentinel()
        }
    }

    /// Level of the saturated grid, if saturated.
    pub fn saturation_level(&self) -> Option<f64> {
        self.meta.saturated.then(|| self.meta.spec.saturation_level())
    }

    /// Cell index and local coordinate per axis. `clamp` moves
    /// out-of-range coordinates onto the domain instead of failing.
    fn locate(&self, x: &[f64], clamp: bool) -> Result<(Vec<(usize, f64)>, bool)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut clamped = false;
        let mut cells = Vec::with_capacity(self.dim());
        for (d, (v, a)) in x.iter().zip(&self.meta.axes).enumerate() {
            if !v.is_finite() {
                return Err(Error::OutOfRange { axis: d, value: *v, min: a.min, max: a.max });
            }
            let span = a.max - a.min;
            let mut v = *v;
            if a.wraps {
                v = a.min + (v - a.min).rem_euclid(span);
            } else if v < a.min || v > a.max {
                let slack = 1e-12 * span;
                if !clamp && (v < a.min - slack || v > a.max + slack) {
                    return Err(Error::OutOfRange { axis: d, value: v, min: a.min, max: a.max });
                }
                clamped |= v < a.min - slack || v > a.max + slack;
                v = v.clamp(a.min, a.max);
            }
            let mut pos = (v - a.min) / a.spacing();
            // snap onto nodes so that node queries are exact
            if (pos - pos.round()).abs() < 1e-9 {
                pos = pos.round();
            }
            let i = (pos.floor() as usize).min(a.count - 2);
            cells.push((i, (pos - i as f64).clamp(0.0, 1.0)));
        }
        Ok((cells, clamped))
    }

    fn blend(&self, cells: &[(usize, f64)]) -> (f64, bool) {
        let n = cells.len();
        let mut value = 0.0;
        let mut flagged = false;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut flat = 0;
            for (d, &(i, t)) in cells.iter().enumerate() {
                let up = (corner >> (n - 1 - d)) & 1 == 1;
                w *= if up { t } else { 1.0 - t };
                flat = flat * self.meta.axes[d].count + i + up as usize;
            }
            if w == 0.0 {
                continue;
            }
            value += w * self.node_value(flat);
            flagged |= !self.feasible[flat];
        }
        (value, flagged)
    }

    /// Multilinear interpolation; exact at nodes.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        let (cells, _) = self.locate(x, false)?;
        Ok(self.blend(&cells).0)
    }

    /// Interpolation with flag reporting.
    pub fn sample(&self, x: &[f64]) -> Result<Sample> {
        let (cells, clamped) = self.locate(x, false)?;
        let (value, flagged) = self.blend(&cells);
        Ok(Sample { value, flagged, clamped })
    }

    /// Interpolation that projects out-of-range states onto the domain.
    pub fn sample_clamped(&self, x: &[f64]) -> Result<Sample> {
        let (cells, clamped) = self.locate(x, true)?;
        let (value, flagged) = self.blend(&cells);
        Ok(Sample { value, flagged, clamped })
    }

    /// Smallest cell edge over all axes.
    pub fn min_spacing(&self) -> f64 {
        self.meta.axes.iter().map(|a| a.spacing()).fold(f64::INFINITY, f64::min)
    }

    fn dini_step(&self, v: &[f64]) -> f64 {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        0.1 * self.min_spacing() / norm.max(1.0)
    }

    /// Forward difference `(H(x + s v) - H(x)) / s` with
    /// `s = 0.1 min_edge / max(1, |v|)`; zero for `v = 0`.
    pub fn dini_directional(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.dini_with(x, v, None, false).map(|s| s.value)
    }

    /// Directional difference with an optional step override; `clamp`
    /// selects the projecting query used by the filter.
    pub fn dini_with(&self, x: &[f64], v: &[f64], step: Option<f64>, clamp: bool) -> Result<Sample> {
        if v.len() != x.len() {
            return Err(Error::DimensionMismatch {
                what: "direction",
                expected: x.len(),
                got: v.len(),
            });
        }
        let query = |y: &[f64]| if clamp { self.sample_clamped(y) } else { self.sample(y) };
        let base = query(x)?;
        if v.iter().all(|c| *c == 0.0) {
            return Ok(Sample { value: 0.0, ..base });
        }
        let s = step.unwrap_or_else(|| self.dini_step(v));
        let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + s * b).collect();
        let next = query(&y)?;
        Ok(Sample {
            value: (next.value - base.value) / s,
            flagged: base.flagged || next.flagged,
            clamped: base.clamped || next.clamped,
        })
    }

    /// Nodes on the outer shell of every non-wrapping axis.
    fn boundary_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        let domain = self.domain();
        (0..self.len()).filter(move |&i| {
            domain
                .multi_index(i)
                .iter()
                .zip(&self.meta.axes)
                .any(|(j, a)| !a.wraps && (*j == 0 || *j + 1 == a.count))
        })
    }

    /// Largest shift for which the shifted zero superlevel set stays off the
    /// domain boundary.
    ///
    /// If the value is non-positive on the whole boundary this is minus the
    /// boundary maximum. If it is positive on the whole boundary (the unsafe
    /// set is enclosed by the domain) every superlevel set contains the
    /// boundary, and shifts up to the depth of the lowest node keep a
    /// nonempty unsafe region. Mixed signs give zero.
    pub fn capital_lambda(&self) -> ShiftBound {
        let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in self.boundary_nodes() {
            let v = self.node_value(i);
            bmin = bmin.min(v);
            bmax = bmax.max(v);
        }
        let capital_lambda = if bmax == f64::NEG_INFINITY || bmin > 0.0 {
            let lowest = (0..self.len()).map(|i| self.node_value(i)).fold(f64::INFINITY, f64::min);
            (-lowest).max(0.0)
        } else if bmax <= 0.0 {
            -bmax
        } else {
            0.0
        };
        ShiftBound { capital_lambda }
    }

    /// Largest ratio `|H_i - H_j| / dist` over axis-adjacent feasible nodes.
    pub fn observed_lipschitz(&self) -> f64 {
        let domain = self.domain();
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            if !self.feasible[i] {
                continue;
            }
            let idx = domain.multi_index(i);
            for (d, a) in self.meta.axes.iter().enumerate() {
                if idx[d] + 1 < a.count {
                    let mut nb = idx.clone();
                    nb[d] += 1;
                    let j = domain.flat_index(&nb);
                    if self.feasible[j] {
                        worst = worst.max((self.values[i] - self.values[j]).abs() / a.spacing());
                    }
                }
            }
        }
        worst
    }

    fn encode_meta(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.meta)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = self.encode_meta()?;
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * self.len() + self.len() / 8 + 5);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; self.len().div_ceil(8)];
        for (i, f) in self.feasible.iter().enumerate() {
            if *f {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        let crc = crc32c::crc32c(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32c::crc32c(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize.checked_add(meta_len).ok_or(Error::Truncated)?;
        if meta_end > body.len() {
            return Err(Error::Truncated);
        }
        let meta: GridMeta = serde_json::from_slice(&body[16..meta_end])?;
        let domain = DomainBox::new(meta.axes.clone())?;
        let n = domain.len();
        let expected = meta_end + 8 * n + n.div_ceil(8);
        if body.len() != expected {
            return Err(Error::Truncated);
        }
        let values = body[meta_end..meta_end + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bits = &body[meta_end + 8 * n..];
        let feasible = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::new(meta, values, feasible)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Points violating the horizon monotonicity `H_T1 >= -l => H_T2 >= -l - tol`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneViolation {
    pub index: usize,
    pub state: Vec<f64>,
    pub lambda: f64,
    pub short_horizon: f64,
    pub long_horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub lambdas: Vec<f64>,
    pub tolerance: f64,
    pub checked: usize,
    pub violations: Vec<MonotoneViolation>,
    /// Violation with the largest shortfall.
    pub worst: Option<MonotoneViolation>,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Node-wise check that superlevel sets of the short-horizon grid are
/// contained in those of the long-horizon grid, at shifts `0`, `L/2`, `L`
/// with `L` the shift bound of the short-horizon grid.
pub fn check_monotone(short: &CbfGrid, long: &CbfGrid, tolerance: f64) -> Result<MonotoneReport> {
    if short.axes() != long.axes() {
        return Err(Error::AxisMismatch(format!(
            "{:?} vs {:?}",
            short.axes(),
            long.axes()
        )));
    }
    let cl = short.capital_lambda().capital_lambda;
    let lambdas = vec![0.0, 0.5 * cl, cl];
    let mut violations = Vec::new();
    let mut worst: Option<(f64, MonotoneViolation)> = None;
    let mut checked = 0;
    for i in 0..short.len() {
        let (a, b) = (short.node_value(i), long.node_value(i));
        for &l in &lambdas {
            if a >= -l {
                checked += 1;
                if b < -l - tolerance {
                    let v = MonotoneViolation {
                        index: i,
                        state: short.node(i),
                        lambda: l,
                        short_horizon: a,
                        long_horizon: b,
                    };
                    let gap = -l - b;
                    if worst.as_ref().is_none_or(|(g, _)| gap > *g) {
                        worst = Some((gap, v.clone()));
                    }
                    violations.push(v);
                }
            }
        }
    }
    Ok(MonotoneReport {
        lambdas,
        tolerance,
        checked,
        violations,
        worst: worst.map(|(_, v)| v),
    })
}

/// Bookkeeping of a synthesis run that is not part of the grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SynthesisStats {
    pub points: usize,
    pub solved: usize,
    pub shortcut: usize,
    pub infeasible: usize,
    pub unconverged: usize,
    pub warm_improved: usize,
}

/// A configured grid synthesis run.
#[derive(Debug, Clone)]
pub struct GridSynthesis {
    pub spec: SynthesisSpec,
    pub system: ControlSystem,
    pub field: ConstraintField,
    pub subset: InvariantSubset,
    pub domain: DomainBox,
    pub seed: u64,
    /// Worker threads; `0` uses all cores.
    pub threads: usize,
    pub solver: SolverOptions,
    /// Synthesize even if the admissibility conditions fail.
    pub force: bool,
    pub config_text: Option<String>,
}

enum NodeResult {
    Shortcut(f64),
    Solved(PointSolve),
    Failed,
}

impl NodeResult {
    fn inputs(&self) -> Option<&[Vec<f64>]> {
        match self {
            NodeResult::Solved(s) => Some(&s.u_star),
            _ => None,
        }
    }
}

impl GridSynthesis {
    pub fn new(
        spec: SynthesisSpec,
        system: ControlSystem,
        field: ConstraintField,
        subset: InvariantSubset,
        domain: DomainBox,
    ) -> Self {
        Self {
            spec,
            system,
            field,
            subset,
            domain,
            seed: 1,
            threads: 0,
            solver: SolverOptions::default(),
            force: false,
            config_text: None,
        }
    }

    pub fn from_config(cfg: &crate::config::RunConfig, config_text: Option<String>) -> Result<Self> {
        let mut job = Self::new(
            cfg.synthesis.clone(),
            cfg.system()?,
            cfg.constraint.clone(),
            cfg.invariant_subset,
            cfg.domain.clone(),
        );
        job.seed = cfg.seed;
        job.threads = cfg.threads;
        job.solver = cfg.solver.clone();
        job.config_text = config_text;
        Ok(job)
    }

    /// Index of the node holding the value of `flat`: wrapping axes store
    /// their last node as a copy of the first.
    fn canonical(&self, flat: usize) -> usize {
        let mut idx = self.domain.multi_index(flat);
        let mut changed = false;
        for (j, a) in idx.iter_mut().zip(&self.domain.axes) {
            if a.wraps && *j + 1 == a.count {
                *j = 0;
                changed = true;
            }
        }
        if changed {
            self.domain.flat_index(&idx)
        } else {
            flat
        }
    }

    fn neighbours(&self, flat: usize) -> Vec<usize> {
        let idx = self.domain.multi_index(flat);
        let mut out = Vec::with_capacity(2 * idx.len());
        for (d, a) in self.domain.axes.iter().enumerate() {
            let period = if a.wraps { a.count - 1 } else { 0 };
            for step in [-1i64, 1] {
                let j = idx[d] as i64 + step;
                let j = if a.wraps {
                    j.rem_euclid(period as i64) as usize
                } else if j < 0 || j >= a.count as i64 {
                    continue;
                } else {
                    j as usize
                };
                let mut nb = idx.clone();
                nb[d] = j;
                out.push(self.canonical(self.domain.flat_index(&nb)));
            }
        }
        out
    }

    fn par_map<T: Send>(&self, items: &[usize], f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(self.threads).build();
            if let Ok(pool) = pool {
                return pool.install(|| items.par_iter().map(|&i| f(i)).collect());
            }
        }
        items.iter().map(|&i| f(i)).collect()
    }

    /// Runs the synthesis. Output depends only on the inputs and the seed,
    /// never on the thread count.
    pub fn run(&self) -> Result<(CbfGrid, SynthesisStats)> {
        self.domain.validate()?;
        if self.domain.dim() != self.system.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "domain axes",
                expected: self.system.state_dim(),
                got: self.domain.dim(),
            });
        }
        let report = validate_spec(&self.spec, &self.field, &self.subset, &self.domain);
        if !report.passed() && !self.force {
            return Err(Error::Validation(report.to_string()));
        }
        let htilde = report.htilde;
        let solver = PointSolver::new(&self.spec, &self.system, &self.field, &self.subset, htilde, self.solver.clone())?;

        let n = self.domain.len();
        let canon: Vec<usize> = (0..n).filter(|&i| self.canonical(i) == i).collect();
        let mut pos = vec![usize::MAX; n];
        for (p, &i) in canon.iter().enumerate() {
            pos[i] = p;
        }

        // first pass: every node from its own deterministic restarts
        let first: Vec<NodeResult> = self.par_map(&canon, |i| {
            let x = self.domain.node(i);
            if let Some(level) = f_shortcut(&self.spec, &self.subset, &self.field, &x) {
                return NodeResult::Shortcut(level);
            }
            match solver.solve(&x, point_seed(self.seed, i as u64), None) {
                Ok(s) => NodeResult::Solved(s),
                Err(_) => NodeResult::Failed,
            }
        });

        // second pass: try the first-pass inputs of every neighbour; reads
        // only first-pass results, so the outcome is schedule independent
        let second: Vec<Option<PointSolve>> = self.par_map(&canon, |i| {
            let own = match &first[pos[i]] {
                NodeResult::Shortcut(_) => return None,
                NodeResult::Solved(s) => Some(s),
                NodeResult::Failed => None,
            };
            let x = self.domain.node(i);
            let mut best: Option<PointSolve> = None;
            for nb in self.neighbours(i) {
                let Some(inputs) = first[pos[nb]].inputs() else { continue };
                let Ok(trial) = solver.evaluate_inputs(&x, inputs) else { continue };
                let reference = best.as_ref().or(own);
                if reference.is_none_or(|r| better(&trial, r)) {
                    if let Ok(refined) = solver.refine(&x, inputs) {
                        let cand = if better(&refined, &trial) { refined } else { trial };
                        if reference.is_none_or(|r| better(&cand, r)) {
                            best = Some(cand);
                        }
                    }
                }
            }
            best
        });

        let mut values = vec![0.0; n];
        let mut feasible = vec![false; n];
        let mut stats = SynthesisStats { points: n, ..Default::default() };
        for (p, &i) in canon.iter().enumerate() {
            let (v, f) = match (&first[p], &second[p]) {
                (NodeResult::Shortcut(level), _) => {
                    stats.shortcut += 1;
                    (*level, true)
                }
                (_, Some(s)) => {
                    stats.warm_improved += 1;
                    stats.solved += 1;
                    stats.unconverged += !s.converged as usize;
                    (s.value, s.feasible)
                }
                (NodeResult::Solved(s), None) => {
                    stats.solved += 1;
                    stats.unconverged += !s.converged as usize;
                    (s.value, s.feasible)
                }
                (NodeResult::Failed, None) => (self.spec.infeasible_sentinel(), false),
            };
            values[i] = if self.spec.saturate { saturate(&self.spec, v) } else { v };
            feasible[i] = f;
        }
        for i in 0..n {
            let c = self.canonical(i);
            if c != i {
                values[i] = values[c];
                feasible[i] = feasible[c];
            }
        }
        stats.infeasible = feasible.iter().filter(|f| !**f).count();
        let meta = GridMeta {
            axes: self.domain.axes.clone(),
            model: ModelConfig::from_system(&self.system),
            constraint: self.field.clone(),
            invariant_subset: self.subset,
            spec: self.spec.clone(),
            solver: self.solver.clone(),
            htilde,
            seed: self.seed,
            saturated: self.spec.saturate,
            creator: concat!("pcbf ", env!("CARGO_PKG_VERSION")).to_string(),
            config: self.config_text.clone(),
        };
        Ok((CbfGrid::new(meta, values, feasible)?, stats))
    }
}

/// Feasible beats infeasible, then larger value.
fn better(a: &PointSolve, b: &PointSolve) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        _ => a.value > b.value,
    }
}

/// Grid synthesis with default solver options.
pub fn synthesize_grid(
    spec: &SynthesisSpec,
    sys: &ControlSystem,
    field: &ConstraintField,
    sub: &InvariantSubset,
    domain: &DomainBox,
    threads: usize,
    seed: u64,
) -> Result<CbfGrid> {
    let mut job = GridSynthesis::new(spec.clone(), sys.clone(), field.clone(), *sub, domain.clone());
    job.threads = threads;
    job.seed = seed;
    Ok(job.run()?.0)
}

/// Values of a grid restricted to two axes, the other coordinates fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[i][j]` at `(xs[i], ys[j])`.
    pub values: Vec<Vec<f64>>,
}

impl Slice2 {
    /// CSV with header `x,y,H` in node order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,H\n");
        for (i, x) in self.xs.iter().enumerate() {
            for (j, y) in self.ys.iter().enumerate() {
                s.push_str(&format!("{x:.16e},{y:.16e},{:.16e}\n", self.values[i][j]));
            }
        }
        s
    }
}

/// Slice through axes `(ax, ay)` at `at` (full state; the entries of the
/// two slice axes are ignored). Other coordinates are interpolated.
pub fn slice_2d(grid: &CbfGrid, ax: usize, ay: usize, at: &[f64]) -> Result<Slice2> {
    if ax == ay || ax >= grid.dim() || ay >= grid.dim() {
        return Err(Error::Config(format!("invalid slice axes ({ax}, {ay})")));
    }
    if at.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            what: "slice anchor",
            expected: grid.dim(),
            got: at.len(),
        });
    }
    let axes = grid.axes();
    let xs: Vec<f64> = (0..axes[ax].count).map(|i| axes[ax].node(i)).collect();
    let ys: Vec<f64> = (0..axes[ay].count).map(|i| axes[ay].node(i)).collect();
    let mut q = at.to_vec();
    let mut values = Vec::with_capacity(xs.len());
    for x in &xs {
        let mut row = Vec::with_capacity(ys.len());
        for y in &ys {
            q[ax] = *x;
            q[ay] = *y;
            row.push(grid.interpolate(&q)?);
        }
        values.push(row);
    }
    Ok(Slice2 { xs, ys, values })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::constraint::test_support::single_integrator_spec;

    /// Grid with values `f(node)`, all feasible.
    pub(crate) fn grid_from(axes: Vec<Axis>, f: impl Fn(&[f64]) -> f64) -> CbfGrid {
        let domain = DomainBox::new(axes.clone()).unwrap();
        let values = (0..domain.len()).map(|i| f(&domain.node(i))).collect();
        let sys = ControlSystem::single_integrator([[-2.0, 2.0], [-2.0, 2.0]]).unwrap();
        let meta = GridMeta {
            axes,
            model: ModelConfig::from_system(&sys),
            constraint: ConstraintField::circle([0.0, 0.0], 9.0),
            invariant_subset: InvariantSubset::Superlevel { threshold: 1.0 },
            spec: single_integrator_spec(),
            solver: SolverOptions::default(),
            htilde: 30.0,
            seed: 0,
            saturated: false,
            creator: "test".into(),
            config: None,
        };
        CbfGrid::new(meta, values, vec![true; domain.len()]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::grid_from;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn square(count: usize) -> Vec<Axis> {
        vec![Axis::new(-10.0, 10.0, count); 2]
    }

    #[test]
    fn interpolation_examples() {
        let g = grid_from(vec![Axis::new(0.0, 1.0, 2)], |x| 1.0 + 2.0 * x[0]);
        assert_eq!(g.interpolate(&[0.5]).unwrap(), 2.0);
        assert_eq!(g.interpolate(&[1.0]).unwrap(), 3.0);
        assert!(matches!(
            g.interpolate(&[1.5]),
            Err(Error::OutOfRange { axis: 0, .. })
        ));
        let s = g.sample_clamped(&[1.5]).unwrap();
        assert!(s.clamped);
        assert_eq!(s.value, 3.0);

        let g = grid_from(vec![Axis::new(-10.0, 10.0, 5), Axis::new(-1.0, 1.0, 3)], |x| x[0] * x[1]);
        for i in 0..g.len() {
            assert_eq!(g.interpolate(&g.node(i)).unwrap(), g.values()[i]);
        }
    }

    #[test]
    fn wrapping_axis_is_periodic() {
        let g = grid_from(vec![Axis::new(0.0, 1.0, 3), Axis::angular(9)], |x| x[1].cos() + x[0]);
        let a = g.interpolate(&[0.3, PI]).unwrap();
        let b = g.interpolate(&[0.3, -PI]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        let c = g.interpolate(&[0.3, 0.2 + 2.0 * PI]).unwrap();
        assert_abs_diff_eq!(c, g.interpolate(&[0.3, 0.2]).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn dini_examples() {
        let constant = grid_from(square(5), |_| 4.0);
        assert_eq!(constant.dini_directional(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 0.0);
        let linear = grid_from(square(5), |x| 1.5 * x[0] - 2.0);
        let d = linear.dini_directional(&[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d, 1.5, epsilon = 1e-9);
        assert_eq!(linear.dini_directional(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn capital_lambda_rules() {
        // boundary max -4
        let g = grid_from(square(5), |x| -4.0 - (100.0 - x[0] * x[0]).min(100.0 - x[1] * x[1]));
        assert_eq!(g.capital_lambda().capital_lambda, 4.0);
        // mixed signs on the boundary
        let g = grid_from(square(5), |x| x[0]);
        assert_eq!(g.capital_lambda().capital_lambda, 0.0);
        // enclosed obstacle: positive boundary, lowest node -9
        let g = grid_from(square(5), |x| x[0].hypot(x[1]) - 9.0);
        assert_eq!(g.capital_lambda().capital_lambda, 9.0);
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut g = grid_from(vec![Axis::new(0.0, 1.0, 3), Axis::angular(5)], |x| x[0] - x[1]);
        g.feasible[4] = false;
        let bytes = g.to_bytes().unwrap();
        let back = CbfGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(
            back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(CbfGrid::from_bytes(truncated), Err(Error::Checksum { .. })));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(CbfGrid::from_bytes(&bumped), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(CbfGrid::from_bytes(b"NOPE"), Err(Error::BadMagic)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.cbfg");
        g.save(&path).unwrap();
        assert_eq!(CbfGrid::load(&path).unwrap(), g);
    }

    #[test]
    fn flagged_nodes_use_sentinel() {
        let mut g = grid_from(vec![Axis::new(0.0, 1.0, 2)], |_| 1.0);
        g.feasible[1] = false;
        let s = g.sample(&[0.5]).unwrap();
        assert!(s.flagged);
        let sentinel = g.meta().spec.infeasible_sentinel();
        assert_eq!(sentinel, -(1.0 + 10.0 * 2.0 * 10.0));
        assert_abs_diff_eq!(s.value, 0.5 + 0.5 * sentinel, epsilon = 1e-12);
        assert!(!g.sample(&[0.0]).unwrap().flagged);
    }

    #[test]
    fn monotone_check_examples() {
        let a = grid_from(square(5), |x| x[0].hypot(x[1]) - 9.0);
        let r = check_monotone(&a, &a, 0.05).unwrap();
        assert!(r.passed());
        assert_eq!(r.lambdas, vec![0.0, 4.5, 9.0]);

        let mut b = a.clone();
        b.values_mut()[0] = -50.0;
        let r = check_monotone(&a, &b, 0.05).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst.unwrap().index, 0);

        let c = grid_from(square(3), |_| 0.0);
        assert!(matches!(check_monotone(&a, &c, 0.05), Err(Error::AxisMismatch(_))));
    }

    #[test]
    fn constant_field_grid_saturates_uniformly() {
        // obstacle far away: every node lies in F
        let spec = SynthesisSpec { saturate: true, ..crate::constraint::test_support::single_integrator_spec() };
        let sys = ControlSystem::single_integrator([[-2.0, 2.0], [-2.0, 2.0]]).unwrap();
        let field = ConstraintField::circle([1e3, 1e3], 1.0);
        let dom = DomainBox::new(vec![Axis::new(0.0, 1.0, 2); 2]).unwrap();
        let g = synthesize_grid(&spec, &sys, &field, &InvariantSubset::Superlevel { threshold: 1.0 }, &dom, 1, 5).unwrap();
        assert!(g.values().iter().all(|v| *v == 1.0));
        assert!(g.feasible().iter().all(|f| *f));
    }

    #[test]
    fn slice_matches_nodes() {
        let g = grid_from(vec![Axis::new(0.0, 1.0, 3), Axis::new(0.0, 2.0, 3), Axis::angular(5)], |x| {
            x[0] + 10.0 * x[1] + x[2].sin()
        });
        let s = slice_2d(&g, 0, 1, &[0.0, 0.0, PI / 2.0]).unwrap();
        assert_eq!(s.values[2][1], 1.0 + 10.0 + 1.0);
        let csv = s.to_csv();
        assert!(csv.starts_with("x,y,H\n"));
        assert_eq!(csv.lines().count(), 10);
    }

    proptest! {
        #[test]
        fn interpolation_within_cell_bounds(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let g = grid_from(square(6), |p| (p[0] * 0.3).sin() * p[1] + p[0]);
            let v = g.interpolate(&[x, y]).unwrap();
            let (cells, _) = g.locate(&[x, y], false).unwrap();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for di in 0..2 {
                for dj in 0..2 {
                    let flat = (cells[0].0 + di) * 6 + cells[1].0 + dj;
                    lo = lo.min(g.values()[flat]);
                    hi = hi.max(g.values()[flat]);
                }
            }
            let gmin = g.values().iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            prop_assert!(v >= gmin - 1e-12);
        }
    }
}
