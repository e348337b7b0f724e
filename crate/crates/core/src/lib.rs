//! Synthesis of predictive control barrier functions on regular grids, with
//! time-varying shifts and a sampled safety filter.
//!
//! The value function `H_T(x)` is the best achievable minimum over a finite
//! horizon of `h(x(t)) - gamma t`, subject to reaching a known safe set `F`.
//! It is computed pointwise on a grid ([`grid::GridSynthesis`]), read back by
//! multilinear interpolation, shifted in time ([`shift`]) and enforced by a
//! minimally invasive input filter ([`filter`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classk;
pub mod config;
pub mod constraint;
pub mod contour;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod grid;
pub mod shift;
pub mod synthesis;

pub use classk::{check_classke, ClassKe, ClippedAlpha};
pub use config::{ModelConfig, RunConfig};
pub use constraint::{
    validate_spec, Axis, ConstraintField, DomainBox, InvariantSubset, SynthesisSpec, TerminalMode,
    ValidationReport, Variant,
};
pub use dynamics::{BicycleParams, ControlSystem, DiscreteStepper, Model};
pub use error::{Error, Result};
pub use filter::{baseline_input, safe_input, simulate, FilterConfig, FilterTerm, SimLog, TrackingLine};
pub use grid::{check_monotone, synthesize_grid, CbfGrid, GridSynthesis, ShiftBound};
pub use shift::{check_shiftable, shifted_value, ShiftSchedule};
pub use synthesis::{pnorm_objective, saturate, solve_point, PointSolve, PointSolver, SolverOptions};
