//! JSON run configuration.

use serde::{Deserialize, Serialize};

use crate::constraint::{validate_spec, ConstraintField, DomainBox, InvariantSubset, SynthesisSpec, ValidationReport};
use crate::dynamics::{BicycleParams, ControlSystem, Model};
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, TrackingLine};
use crate::shift::ShiftSchedule;
use crate::synthesis::SolverOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    SingleIntegrator,
    DoubleIntegrator,
    Bicycle,
    Unicycle,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Per-input `[lo, hi]`; model default when absent. Ignored for the
    /// bicycle, whose box follows from its parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_box: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bicycle: Option<BicycleParams>,
}

/// Model block: `{"id": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: ModelId,
    #[serde(default)]
    pub params: ModelParams,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ControlSystem> {
        let boxed = |default: [[f64; 2]; 2]| self.params.input_box.clone().unwrap_or(default.to_vec());
        match self.id {
            ModelId::SingleIntegrator => {
                ControlSystem::new(Model::SingleIntegrator, boxed([[-2.0, 2.0], [-2.0, 2.0]]))
            }
            ModelId::DoubleIntegrator => {
                ControlSystem::new(Model::DoubleIntegrator, boxed([[-1.0, 1.0], [-1.0, 1.0]]))
            }
            ModelId::Bicycle => {
                if self.params.input_box.is_some() {
                    return Err(Error::Config(
                        "bicycle input box is set through v_min, v_max and zeta_max".into(),
                    ));
                }
                ControlSystem::kinematic_bicycle(self.params.bicycle.unwrap_or_default())
            }
            ModelId::Unicycle => ControlSystem::new(Model::Unicycle, boxed([[1.0, 2.0], [-0.9, 0.9]])),
        }
    }

    /// Fully explicit description of `sys`.
    pub fn from_system(sys: &ControlSystem) -> Self {
        match sys.model() {
            Model::Bicycle(p) => Self {
                id: ModelId::Bicycle,
                params: ModelParams {
                    input_box: None,
                    bicycle: Some(*p),
                },
            },
            m => Self {
                id: match m {
                    Model::SingleIntegrator => ModelId::SingleIntegrator,
                    Model::DoubleIntegrator => ModelId::DoubleIntegrator,
                    _ => ModelId::Unicycle,
                },
                params: ModelParams {
                    input_box: Some(sys.input_box().to_vec()),
                    bicycle: None,
                },
            },
        }
    }
}

/// Closed-loop scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub line: TrackingLine,
    /// Integration step; a quarter of the synthesis step when absent.
    #[serde(default)]
    pub dt: Option<f64>,
}

fn default_subset() -> InvariantSubset {
    InvariantSubset::Superlevel { threshold: 1.0 }
}

fn default_seed() -> u64 {
    1
}

/// A complete run: synthesis problem, optional shifts and closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub constraint: ConstraintField,
    #[serde(default = "default_subset")]
    pub invariant_subset: InvariantSubset,
    pub domain: DomainBox,
    pub synthesis: SynthesisSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    /// One schedule per grid passed to the simulation, in order.
    #[serde(default)]
    pub shift: Vec<ShiftSchedule>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; `0` uses all cores.
    #[serde(default)]
    pub threads: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::from_json(&text)?, text))
    }

    /// Structural checks that do not depend on the synthesis conditions.
    pub fn check(&self) -> Result<()> {
        let sys = self.model.build()?;
        self.constraint.validate()?;
        self.domain.validate()?;
        if self.domain.dim() != sys.state_dim() {
            return Err(Error::Config(format!(
                "domain has {} axes but the {} state has {} coordinates",
                self.domain.dim(),
                sys.id(),
                sys.state_dim()
            )));
        }
        if self.constraint.min_state_dim() > sys.state_dim() {
            return Err(Error::Config(format!(
                "constraint reads {} state coordinates, model has {}",
                self.constraint.min_state_dim(),
                sys.state_dim()
            )));
        }
        for &a in sys.model().angular_coordinates() {
            if !self.domain.axes[a].wraps {
                return Err(Error::Config(format!("axis {a} is an angle and must wrap")));
            }
        }
        self.filter.validate(sys.input_dim())?;
        for s in &self.shift {
            s.validate()?;
        }
        if let Some(sim) = &self.simulate {
            if sim.x0.len() != sys.state_dim() {
                return Err(Error::Config(format!(
                    "simulate.x0 has {} entries, expected {}",
                    sim.x0.len(),
                    sys.state_dim()
                )));
            }
            if !(sim.t_end > 0.0) {
                return Err(Error::Config("simulate.t_end must be positive".into()));
            }
            if matches!(sim.dt, Some(dt) if !(dt > 0.0)) {
                return Err(Error::Config("simulate.dt must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ControlSystem> {
        self.model.build()
    }

    pub fn validate_synthesis(&self) -> ValidationReport {
        validate_spec(&self.synthesis, &self.constraint, &self.invariant_subset, &self.domain)
    }
}
