//! Constraint fields `h`, the known terminal subset `F`, the computational
//! domain and the scalar synthesis parameters with their admissibility checks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classk::ClassKe;
use crate::dynamics::BicycleParams;
use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

/// A Lipschitz constraint function over the state; safe states have `h >= 0`.
///
/// Positions are always the first two state coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintField {
    /// Distance to `center` minus `radius`.
    Circle { center: [f64; 2], radius: f64 },
    /// `eta * min{h_circle / eta, b + vx, b + vy, b - vx, b - vy}` for a
    /// double integrator with velocity bound `b`.
    ModifiedDoubleIntegrator {
        center: [f64; 2],
        radius: f64,
        #[serde(default = "one")]
        eta: f64,
        #[serde(default = "two")]
        velocity_bound: f64,
    },
    /// Pointwise minimum of the parts.
    CompositeMin { parts: Vec<ConstraintField> },
}

impl ConstraintField {
    pub fn circle(center: [f64; 2], radius: f64) -> Self {
        ConstraintField::Circle { center, radius }
    }

    /// Smallest state dimension the field reads.
    pub fn min_state_dim(&self) -> usize {
        match self {
            ConstraintField::Circle { .. } => 2,
            ConstraintField::ModifiedDoubleIntegrator { .. } => 4,
            ConstraintField::CompositeMin { parts } => {
                parts.iter().map(|p| p.min_state_dim()).max().unwrap_or(0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConstraintField::Circle { radius, .. } if *radius < 0.0 => {
                Err(Error::Config(format!("circle radius must be >= 0, got {radius}")))
            }
            ConstraintField::ModifiedDoubleIntegrator {
                radius,
                eta,
                velocity_bound,
                ..
            } if *radius < 0.0 || *eta <= 0.0 || *velocity_bound <= 0.0 => Err(Error::Config(
                "modified double-integrator field needs radius >= 0, eta > 0, velocity_bound > 0"
                    .into(),
            )),
            ConstraintField::CompositeMin { parts } if parts.is_empty() => {
                Err(Error::Config("composite_min needs at least one part".into()))
            }
            ConstraintField::CompositeMin { parts } => parts.iter().try_for_each(|p| p.validate()),
            _ => Ok(()),
        }
    }

    /// Evaluates `h(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ConstraintField::Circle { center, radius } => {
                (x[0] - center[0]).hypot(x[1] - center[1]) - radius
            }
            ConstraintField::ModifiedDoubleIntegrator {
                center,
                radius,
                eta,
                velocity_bound: b,
            } => {
                let pos = (x[0] - center[0]).hypot(x[1] - center[1]) - radius;
                let terms = [pos / eta, b + x[2], b + x[3], b - x[2], b - x[3]];
                eta * terms.into_iter().fold(f64::INFINITY, f64::min)
            }
            ConstraintField::CompositeMin { parts } => parts
                .iter()
                .map(|p| p.eval(x))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Writes a (sub)gradient of `h` at `x` into `grad` and returns `h(x)`.
    ///
    /// At the circle centre the zero subgradient is used; for minima the
    /// gradient of the first active branch.
    pub fn eval_with_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self {
            ConstraintField::Circle { center, radius } => {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                let d = dx.hypot(dy);
                if d > 0.0 {
                    grad[0] = dx / d;
                    grad[1] = dy / d;
                }
                d - radius
            }
            ConstraintField::ModifiedDoubleIntegrator {
                center,
                radius,
                eta,
                velocity_bound: b,
            } => {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                let d = dx.hypot(dy);
                let terms = [(d - radius) / eta, b + x[2], b + x[3], b - x[2], b - x[3]];
                let (arg, min) = terms
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
                match arg {
                    0 if d > 0.0 => {
                        grad[0] = dx / d;
                        grad[1] = dy / d;
                    }
                    0 => {}
                    1 => grad[2] = *eta,
                    2 => grad[3] = *eta,
                    3 => grad[2] = -eta,
                    _ => grad[3] = -eta,
                }
                eta * min
            }
            ConstraintField::CompositeMin { parts } => {
                let mut best = f64::INFINITY;
                let mut tmp = vec![0.0; grad.len()];
                for p in parts {
                    let v = p.eval_with_gradient(x, &mut tmp);
                    if v < best {
                        best = v;
                        grad.copy_from_slice(&tmp);
                    }
                }
                best
            }
        }
    }
}

/// The known subset `F` of a control-invariant set, used as terminal target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InvariantSubset {
    /// `F = {h >= threshold}`.
    Superlevel { threshold: f64 },
    /// `F = {h >= delta + margin}`.
    ErodedSuperlevel { margin: f64 },
}

impl InvariantSubset {
    /// Eroded subset with margin `2R` from the bicycle turning radius.
    pub fn for_bicycle(params: &BicycleParams) -> Self {
        InvariantSubset::ErodedSuperlevel {
            margin: 2.0 * params.turning_radius(),
        }
    }

    pub fn threshold(&self, delta: f64) -> f64 {
        match *self {
            InvariantSubset::Superlevel { threshold } => threshold,
            InvariantSubset::ErodedSuperlevel { margin } => delta + margin,
        }
    }

    /// Membership test, inclusive on the boundary.
    pub fn contains(&self, field: &ConstraintField, x: &[f64], delta: f64) -> bool {
        field.eval(x) >= self.threshold(delta)
    }
}

/// One axis of the computational domain and of the synthesis grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Periodic axis; `max - min` is one period and the end nodes coincide.
    #[serde(default)]
    pub wraps: bool,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Self {
            min,
            max,
            count,
            wraps: false,
        }
    }

    pub fn angular(count: usize) -> Self {
        Self {
            min: -std::f64::consts::PI,
            max: std::f64::consts::PI,
            count,
            wraps: true,
        }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }
}

/// Axis-aligned domain `D` with its grid discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBox {
    pub axes: Vec<Axis>,
}

impl DomainBox {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let d = Self { axes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("domain needs at least one axis".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if !(a.min.is_finite() && a.max.is_finite() && a.min < a.max) {
                return Err(Error::Config(format!(
                    "axis {i}: need finite min < max, got [{}, {}]",
                    a.min, a.max
                )));
            }
            if a.count < 2 {
                return Err(Error::Config(format!("axis {i}: need count >= 2, got {}", a.count)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of a flat node index (last axis fastest).
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = flat % self.axes[d].count;
            flat /= self.axes[d].count;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.count + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(i, a)| a.node(*i))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(&self.axes)
                .all(|(v, a)| a.wraps || (*v >= a.min && *v <= a.max))
    }

    /// Minimum of `h` over the grid nodes.
    pub fn min_h(&self, field: &ConstraintField) -> f64 {
        (0..self.len())
            .map(|i| field.eval(&self.node(i)))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    /// Some trajectory state must lie in `F`.
    #[default]
    AnyTime,
    /// The final state must lie in `F`.
    AtFinalStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Objective `h(x(t)) - gamma t`.
    #[default]
    GammaPenalty,
    /// Objective `h(x(t)) + alpha_bar(h(x(t))) t`.
    AlphaPenalty,
}

fn default_pnorm() -> u32 {
    40
}

/// Scalar parameters of one synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    pub gamma: f64,
    pub delta: f64,
    pub horizon: f64,
    /// Bound on the time of the inner minimum; `0` makes the relaxed
    /// condition vacuous, `None` falls back to `gamma * horizon < delta`.
    #[serde(default)]
    pub tbar: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_pnorm")]
    pub pnorm: u32,
    /// Positivity offset of the reciprocal objective; derived from the
    /// domain when absent.
    #[serde(default)]
    pub htilde: Option<f64>,
    #[serde(default)]
    pub terminal_mode: TerminalMode,
    #[serde(default)]
    pub variant: Variant,
    /// Slope of the class-K_e function.
    pub c: f64,
    /// Filter robustness margin.
    #[serde(default)]
    pub c_alpha: f64,
    /// Store `min(H, level)` instead of `H`.
    #[serde(default)]
    pub saturate: bool,
    /// User-asserted upper bound on the time to reach `F`.
    #[serde(default)]
    pub tau_bound: Option<f64>,
}

impl SynthesisSpec {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn class_ke(&self) -> ClassKe {
        ClassKe {
            c: self.c,
            gamma: self.gamma,
        }
    }

    /// Saturation level `delta - gamma * tbar` (or `delta - gamma * T`
    /// without a bound, `delta` for the alpha variant).
    pub fn saturation_level(&self) -> f64 {
        match self.variant {
            Variant::AlphaPenalty => self.delta,
            Variant::GammaPenalty => match self.tbar {
                Some(t) => self.delta - self.gamma * t,
                None => self.delta - self.gamma * self.horizon,
            },
        }
    }

    /// Lower bound the positivity offset must exceed.
    pub fn htilde_lower_bound(&self, min_h: f64) -> f64 {
        (self.gamma * self.horizon - min_h).max(0.0)
    }

    /// The configured offset, or `lower bound + 1` when unset.
    pub fn resolved_htilde(&self, min_h: f64) -> f64 {
        self.htilde
            .unwrap_or_else(|| self.htilde_lower_bound(min_h) + 1.0)
    }

    /// Sentinel value stored for infeasible nodes during interpolation.
    pub fn infeasible_sentinel(&self) -> f64 {
        -(self.saturation_level() + 10.0 * self.gamma * self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub lhs: f64,
    pub relation: String,
    pub rhs: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Condition {
    fn new(name: &str, lhs: f64, relation: &str, rhs: f64) -> Self {
        let passed = match relation {
            "<" => lhs < rhs,
            "<=" => lhs <= rhs,
            ">" => lhs > rhs,
            ">=" => lhs >= rhs,
            "==" => lhs == rhs,
            _ => unreachable!("unknown relation {relation}"),
        };
        Self {
            name: name.to_string(),
            lhs,
            relation: relation.to_string(),
            rhs,
            passed,
            note: None,
        }
    }

    fn with_note(mut self, note: &str) -> Self {
        self.note = Some(note.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub conditions: Vec<Condition>,
    pub min_h: f64,
    pub htilde: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.conditions {
            write!(
                f,
                "[{}] {}: {} {} {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.lhs,
                c.relation,
                c.rhs
            )?;
            if let Some(note) = &c.note {
                write!(f, " ({note})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Checks the admissibility conditions of a synthesis run. Never fails;
/// the caller decides whether failures abort.
pub fn validate_spec(
    spec: &SynthesisSpec,
    field: &ConstraintField,
    subset: &InvariantSubset,
    domain: &DomainBox,
) -> ValidationReport {
    let mut c = vec![
        Condition::new("gamma positive", spec.gamma, ">", 0.0),
        Condition::new("delta positive", spec.delta, ">", 0.0),
        Condition::new("horizon positive", spec.horizon, ">", 0.0),
        Condition::new("steps positive", spec.steps as f64, ">=", 1.0),
        Condition::new("p positive", spec.pnorm as f64, ">=", 2.0),
        Condition::new("p even", (spec.pnorm % 2) as f64, "==", 0.0),
        Condition::new("filter margin non-negative", spec.c_alpha, ">=", 0.0),
    ];
    match spec.variant {
        Variant::GammaPenalty => match spec.tbar {
            Some(t) if t > 0.0 => {
                c.push(Condition::new("gamma * tbar < delta", spec.gamma * t, "<", spec.delta));
                c.push(Condition::new("tbar < horizon", t, "<", spec.horizon));
            }
            Some(t) => c.push(
                Condition::new("gamma * tbar < delta", spec.gamma * t, "<", spec.delta)
                    .with_note("tbar = 0, condition vacuous"),
            ),
            None => c.push(Condition::new(
                "gamma * horizon < delta",
                spec.gamma * spec.horizon,
                "<",
                spec.delta,
            )),
        },
        Variant::AlphaPenalty => {
            c.push(Condition::new("class-K_e slope positive", spec.c, ">", 0.0));
        }
    }
    let min_h = domain.min_h(field);
    let htilde = spec.resolved_htilde(min_h);
    c.push(Condition::new(
        "htilde > max(0, gamma * horizon - min_D h)",
        htilde,
        ">",
        spec.htilde_lower_bound(min_h),
    ));
    c.push(Condition::new(
        "F threshold >= delta",
        subset.threshold(spec.delta),
        ">=",
        spec.delta,
    ));
    if let Some(tau) = spec.tau_bound {
        c.push(
            Condition::new("horizon >= tau", spec.horizon, ">=", tau)
                .with_note("tau is a user assertion"),
        );
    }
    ValidationReport {
        conditions: c,
        min_h,
        htilde,
    }
}
