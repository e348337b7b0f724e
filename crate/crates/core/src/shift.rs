//! Time-varying shifts `lambda(t)` of a value function and the sampled
//! shiftability certificate `lambda'(t) >= alpha(-lambda(t))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::classk::ClassKe;
use crate::error::{Error, Result};
use crate::grid::{CbfGrid, ShiftBound};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSchedule {
    Constant {
        value: f64,
    },
    /// `lambda(t) = -r_max |sin(pi t / tau_p - sigma)| + r`.
    SinusoidAbs {
        r: f64,
        r_max: f64,
        tau_p: f64,
        #[serde(default)]
        sigma: f64,
    },
}

impl ShiftSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftSchedule::Constant { value } if !(value >= 0.0) => {
                Err(Error::Config(format!("constant shift must be >= 0, got {value}")))
            }
            ShiftSchedule::SinusoidAbs { r, r_max, tau_p, sigma } => {
                if !(r_max >= 0.0 && r_max <= r) {
                    return Err(Error::Config(format!("need 0 <= r_max <= r, got r_max = {r_max}, r = {r}")));
                }
                if !(tau_p > 0.0) || !sigma.is_finite() {
                    return Err(Error::Config(format!(
                        "need tau_p > 0 and finite sigma, got tau_p = {tau_p}, sigma = {sigma}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            ShiftSchedule::Constant { value } => value,
            ShiftSchedule::SinusoidAbs { r, r_max, tau_p, sigma } => {
                -r_max * (PI * t / tau_p - sigma).sin().abs() + r
            }
        }
    }

    /// Time derivative; at kinks of `|sin|` the smaller one-sided value.
    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ShiftSchedule::Constant { .. } => 0.0,
            ShiftSchedule::SinusoidAbs { r_max, tau_p, sigma, .. } => {
                let phase = PI * t / tau_p - sigma;
                let (s, c) = phase.sin_cos();
                let w = PI / tau_p;
                if self.at_kink(t) {
                    -r_max * w * c.abs()
                } else {
                    -r_max * w * c * s.signum()
                }
            }
        }
    }

    fn at_kink(&self, t: f64) -> bool {
        match *self {
            ShiftSchedule::Constant { .. } => false,
            ShiftSchedule::SinusoidAbs { tau_p, sigma, .. } => {
                let cycles = (PI * t / tau_p - sigma) / PI;
                (cycles - cycles.round()).abs() < 1e-12 * cycles.abs().max(1.0)
            }
        }
    }

    /// Kink instants in `[t0, t1]`.
    pub fn kinks(&self, t0: f64, t1: f64) -> Vec<f64> {
        match *self {
            ShiftSchedule::Constant { .. } => Vec::new(),
            ShiftSchedule::SinusoidAbs { tau_p, sigma, r_max, .. } => {
                if r_max == 0.0 {
                    return Vec::new();
                }
                // phase j pi at t = (j pi + sigma) tau_p / pi
                let first = ((PI * t0 / tau_p - sigma) / PI).ceil() as i64;
                (first..)
                    .map(|j| (j as f64 * PI + sigma) * tau_p / PI)
                    .take_while(|t| *t <= t1)
                    .collect()
            }
        }
    }
}

pub fn lambda_eval(s: &ShiftSchedule, t: f64) -> f64 {
    s.eval(t)
}

pub fn lambda_dot(s: &ShiftSchedule, t: f64) -> f64 {
    s.derivative(t)
}

/// Outcome of [`check_shiftable`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftReport {
    pub passed: bool,
    pub samples: usize,
    /// Smallest `lambda'(t) - alpha(-lambda(t))`.
    pub worst_margin: f64,
    pub worst_t: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub capital_lambda: f64,
    /// First sampled time with `lambda` outside `[0, Lambda]`.
    pub range_violation_t: Option<f64>,
    pub kinks: Vec<f64>,
}

/// Samples `[0, horizon]` at `10^4 + 1` uniform instants plus every kink.
pub fn check_shiftable(s: &ShiftSchedule, alpha: &ClassKe, bound: &ShiftBound, horizon: f64) -> ShiftReport {
    const N: usize = 10_000;
    let kinks = s.kinks(0.0, horizon);
    let mut ts: Vec<f64> = (0..=N).map(|i| horizon * i as f64 / N as f64).collect();
    ts.extend_from_slice(&kinks);
    let cl = bound.capital_lambda;
    let mut worst = (f64::INFINITY, 0.0);
    let (mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut range_violation_t = None;
    for &t in &ts {
        let l = s.eval(t);
        lmin = lmin.min(l);
        lmax = lmax.max(l);
        if range_violation_t.is_none() && !(l >= -1e-12 && l <= cl + 1e-12) {
            range_violation_t = Some(t);
        }
        let margin = s.derivative(t) - alpha.eval(-l);
        if margin < worst.0 {
            worst = (margin, t);
        }
    }
    ShiftReport {
        passed: worst.0 >= 0.0 && range_violation_t.is_none() && s.validate().is_ok(),
        samples: ts.len(),
        worst_margin: worst.0,
        worst_t: worst.1,
        lambda_min: lmin,
        lambda_max: lmax,
        capital_lambda: cl,
        range_violation_t,
        kinks,
    }
}

/// Bisection on the period of a sinusoid schedule between a failing `lo`
/// and a passing `hi`. Returns the largest failing period found within
/// `tol`, or `None` if `lo` passes or `hi` fails.
pub fn critical_period(
    s: &ShiftSchedule,
    alpha: &ClassKe,
    bound: &ShiftBound,
    horizon: f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Option<f64> {
    let ShiftSchedule::SinusoidAbs { r, r_max, sigma, .. } = *s else {
        return None;
    };
    let passes = |tau_p: f64| {
        check_shiftable(&ShiftSchedule::SinusoidAbs { r, r_max, tau_p, sigma }, alpha, bound, horizon).passed
    };
    if passes(lo) || !passes(hi) {
        return None;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if passes(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(lo)
}

/// `H(x) + lambda(t)`.
pub fn shifted_value(grid: &CbfGrid, s: &ShiftSchedule, t: f64, x: &[f64]) -> Result<f64> {
    Ok(grid.interpolate(x)? + s.eval(t))
}
