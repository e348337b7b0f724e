//! The extended class-K_e function used by the filter and by the alpha
//! variant of the synthesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `alpha(z) = c z` for `z >= 0`, `2 gamma (sig(c z / 4) - 1/2)` below zero.
///
/// The lower branch saturates at `-gamma`; its slope at zero is
/// `gamma c / 8`, so the function is convex for `gamma <= 8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassKe {
    pub c: f64,
    pub gamma: f64,
}

impl ClassKe {
    pub fn new(c: f64, gamma: f64) -> Result<Self> {
        if c > 0.0 && gamma > 0.0 && c.is_finite() && gamma.is_finite() {
            Ok(Self { c, gamma })
        } else {
            Err(Error::Config(format!(
                "class-K_e function needs c > 0 and gamma > 0, got c = {c}, gamma = {gamma}"
            )))
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        if z >= 0.0 {
            self.c * z
        } else {
            // 2 (sig(s) - 1/2) = tanh(s / 2), better conditioned near zero
            self.gamma * (self.c * z / 8.0).tanh()
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        if z >= 0.0 {
            self.c
        } else {
            let t = (self.c * z / 8.0).tanh();
            self.gamma * self.c / 8.0 * (1.0 - t * t)
        }
    }

    pub fn clipped(self) -> ClippedAlpha {
        ClippedAlpha { inner: self }
    }
}

/// `alpha_bar(z) = alpha(z)` for `z <= 0`, zero above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClippedAlpha {
    pub inner: ClassKe,
}

impl ClippedAlpha {
    pub fn eval(&self, z: f64) -> f64 {
        if z <= 0.0 {
            self.inner.eval(z)
        } else {
            0.0
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        if z <= 0.0 {
            self.inner.derivative(z)
        } else {
            0.0
        }
    }
}

/// Worst margins found by [`check_classke`]; a check passes when its margin
/// is non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassKeReport {
    /// `-|alpha(0)|`.
    pub zero_margin: f64,
    /// Smallest increment between consecutive ladder samples.
    pub monotone_margin: f64,
    /// `min alpha(z) + gamma`.
    pub lower_bound_margin: f64,
    /// Smallest `chord - midpoint value` over consecutive triples.
    pub convexity_margin: f64,
    /// `|alpha(-1e6) + gamma|`.
    pub saturation_error: f64,
}

impl ClassKeReport {
    pub fn monotone(&self) -> bool {
        // the saturated tail is flat in floating point
        self.monotone_margin >= 0.0
    }

    pub fn passed(&self) -> bool {
        self.zero_margin >= 0.0
            && self.monotone()
            && self.lower_bound_margin >= 0.0
            && self.convexity_margin >= -1e-12
            && self.saturation_error <= 1e-9
    }
}

/// The sample ladder: 1000 log-spaced magnitudes in `[1e-6, 1e3]` with both
/// signs, plus zero, sorted ascending.
pub fn sample_ladder() -> Vec<f64> {
    let n = 1000;
    let (lo, hi) = (1e-6f64.ln(), 1e3f64.ln());
    let mags: Vec<f64> = (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
        .collect();
    let mut out: Vec<f64> = mags.iter().rev().map(|m| -m).collect();
    out.push(0.0);
    out.extend(mags);
    out
}

/// Sampled verification of the class-K_e properties. Convexity is tested on
/// chords between consecutive ladder points.
pub fn check_classke(a: &ClassKe) -> ClassKeReport {
    let z = sample_ladder();
    let v: Vec<f64> = z.iter().map(|&s| a.eval(s)).collect();
    let monotone_margin = v
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let lower_bound_margin = v.iter().fold(f64::INFINITY, |m, x| m.min(x + a.gamma));
    let convexity_margin = z
        .windows(3)
        .zip(v.windows(3))
        .map(|(zz, vv)| {
            let t = (zz[1] - zz[0]) / (zz[2] - zz[0]);
            (1.0 - t) * vv[0] + t * vv[2] - vv[1]
        })
        .fold(f64::INFINITY, f64::min);
    ClassKeReport {
        zero_margin: -a.eval(0.0).abs(),
        monotone_margin,
        lower_bound_margin,
        convexity_margin,
        saturation_error: (a.eval(-1e6) + a.gamma).abs(),
    }
}

/// Post-hoc check of `c delta >= L M` for a Lipschitz estimate `L` of the
/// value function and a bound `M` on the vector field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzCheck {
    pub c_delta: f64,
    pub lipschitz: f64,
    pub field_bound: f64,
    pub passed: bool,
}

pub fn check_lipschitz_premise(a: &ClassKe, delta: f64, lipschitz: f64, field_bound: f64) -> LipschitzCheck {
    let c_delta = a.c * delta;
    LipschitzCheck {
        c_delta,
        lipschitz,
        field_bound,
        passed: c_delta >= lipschitz * field_bound,
    }
}
