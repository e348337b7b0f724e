//! Continuous-time system models, box input sets and the fixed-step RK4
//! discretization shared by the solver, the filter and the simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest state dimension among the built-in models.
pub const MAX_STATE: usize = 4;
/// Largest input dimension among the built-in models.
pub const MAX_INPUT: usize = 2;

pub(crate) type StateBuf = [f64; MAX_STATE];
pub(crate) type JacX = [[f64; MAX_STATE]; MAX_STATE];
pub(crate) type JacU = [[f64; MAX_INPUT]; MAX_STATE];

/// Kinematic bicycle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicycleParams {
    pub wheelbase: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Steering bound in radians.
    pub zeta_max: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            wheelbase: 1.0,
            v_min: 1.0,
            v_max: 2.0,
            zeta_max: 20.0_f64.to_radians(),
        }
    }
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.wheelbase > 0.0
            && self.v_min > 0.0
            && self.v_min <= self.v_max
            && self.zeta_max > 0.0
            && self.zeta_max < std::f64::consts::FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "bicycle parameters need L > 0, 0 < v_min <= v_max and 0 < zeta_max < pi/2, got {self:?}"
            )))
        }
    }

    /// Minimum turning radius `L / (cos(beta(zeta_max)) tan(zeta_max))`.
    ///
    /// Returns `+inf` as `zeta_max` approaches zero.
    pub fn turning_radius(&self) -> f64 {
        let tan = self.zeta_max.tan();
        if tan == 0.0 {
            return f64::INFINITY;
        }
        self.wheelbase / (slip_angle(self.zeta_max).cos() * tan)
    }
}

/// Side-slip angle of the centre of mass, `atan(tan(zeta) / 2)`.
pub fn slip_angle(zeta: f64) -> f64 {
    (0.5 * zeta.tan()).atan()
}

fn slip_angle_derivative(zeta: f64) -> f64 {
    let t = zeta.tan();
    let sec2 = 1.0 + t * t;
    0.5 * sec2 / (1.0 + 0.25 * t * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    /// `x' = u` in the plane.
    SingleIntegrator,
    /// State `(x, y, x', y')`, input is the acceleration.
    DoubleIntegrator,
    /// State `(x, y, psi)`, input `(v, zeta)`.
    Bicycle(BicycleParams),
    /// State `(x, y, psi)`, input `(v, omega)`.
    Unicycle,
}

impl Model {
    pub fn id(&self) -> &'static str {
        match self {
            Model::SingleIntegrator => "single_integrator",
            Model::DoubleIntegrator => "double_integrator",
            Model::Bicycle(_) => "bicycle",
            Model::Unicycle => "unicycle",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Model::SingleIntegrator => 2,
            Model::DoubleIntegrator => 4,
            Model::Bicycle(_) | Model::Unicycle => 3,
        }
    }

    pub fn input_dim(&self) -> usize {
        2
    }

    /// Indices of state coordinates that are angles wrapping on `[-pi, pi)`.
    pub fn angular_coordinates(&self) -> &'static [usize] {
        match self {
            Model::Bicycle(_) | Model::Unicycle => &[2],
            _ => &[],
        }
    }
}

/// A model together with its box input set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSystem {
    model: Model,
    input_box: Vec<[f64; 2]>,
}

impl ControlSystem {
    pub fn new(model: Model, input_box: Vec<[f64; 2]>) -> Result<Self> {
        if input_box.len() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input box",
                expected: model.input_dim(),
                got: input_box.len(),
            });
        }
        for (i, [lo, hi]) in input_box.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "input box coordinate {i}: need finite lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        if let Model::Bicycle(p) = &model {
            p.validate()?;
        }
        Ok(Self { model, input_box })
    }

    pub fn single_integrator(input_box: [[f64; 2]; 2]) -> Result<Self> {
        Self::new(Model::SingleIntegrator, input_box.to_vec())
    }

    pub fn double_integrator(input_box: [[f64; 2]; 2]) -> Result<Self> {
        Self::new(Model::DoubleIntegrator, input_box.to_vec())
    }

    /// Bicycle with `U = [v_min, v_max] x [-zeta_max, zeta_max]`.
    pub fn kinematic_bicycle(params: BicycleParams) -> Result<Self> {
        params.validate()?;
        let input_box = vec![
            [params.v_min, params.v_max],
            [-params.zeta_max, params.zeta_max],
        ];
        Self::new(Model::Bicycle(params), input_box)
    }

    /// Unicycle with input `(v, omega)`.
    pub fn unicycle(input_box: [[f64; 2]; 2]) -> Result<Self> {
        Self::new(Model::Unicycle, input_box.to_vec())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn id(&self) -> &'static str {
        self.model.id()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn input_box(&self) -> &[[f64; 2]] {
        &self.input_box
    }

    pub fn contains_input(&self, u: &[f64]) -> bool {
        u.len() == self.input_dim()
            && u
                .iter()
                .zip(&self.input_box)
                .all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }

    pub fn clamp_input(&self, u: &mut [f64]) {
        for (v, [lo, hi]) in u.iter_mut().zip(&self.input_box) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Box midpoint, or zero when zero is admissible.
    pub fn rest_input(&self) -> Vec<f64> {
        self.input_box
            .iter()
            .map(|[lo, hi]| {
                if *lo <= 0.0 && 0.0 <= *hi {
                    0.0
                } else {
                    0.5 * (lo + hi)
                }
            })
            .collect()
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Evaluates `f(x, u)`.
    pub fn eval_f(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut out = [0.0; MAX_STATE];
        self.field(x, u, &mut out);
        Ok(out[..self.state_dim()].to_vec())
    }

    /// Unchecked vector field; writes the first `state_dim` entries of `out`.
    pub(crate) fn field(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match &self.model {
            Model::SingleIntegrator => {
                out[0] = u[0];
                out[1] = u[1];
            }
            Model::DoubleIntegrator => {
                out[0] = x[2];
                out[1] = x[3];
                out[2] = u[0];
                out[3] = u[1];
            }
            Model::Bicycle(p) => {
                let (v, zeta) = (u[0], u[1]);
                let beta = slip_angle(zeta);
                let heading = x[2] + beta;
                out[0] = v * heading.cos();
                out[1] = v * heading.sin();
                out[2] = v * beta.cos() * zeta.tan() / p.wheelbase;
            }
            Model::Unicycle => {
                let (v, omega) = (u[0], u[1]);
                out[0] = v * x[2].cos();
                out[1] = v * x[2].sin();
                out[2] = omega;
            }
        }
    }

    /// Jacobians `df/dx` and `df/du`, both zero-initialised by the caller.
    pub(crate) fn jacobians(&self, x: &[f64], u: &[f64], a: &mut JacX, b: &mut JacU) {
        match &self.model {
            Model::SingleIntegrator => {
                b[0][0] = 1.0;
                b[1][1] = 1.0;
            }
            Model::DoubleIntegrator => {
                a[0][2] = 1.0;
                a[1][3] = 1.0;
                b[2][0] = 1.0;
                b[3][1] = 1.0;
            }
            Model::Bicycle(p) => {
                let (v, zeta) = (u[0], u[1]);
                let beta = slip_angle(zeta);
                let dbeta = slip_angle_derivative(zeta);
                let heading = x[2] + beta;
                let (s, c) = heading.sin_cos();
                let tan = zeta.tan();
                a[0][2] = -v * s;
                a[1][2] = v * c;
                b[0][0] = c;
                b[0][1] = -v * s * dbeta;
                b[1][0] = s;
                b[1][1] = v * c * dbeta;
                b[2][0] = beta.cos() * tan / p.wheelbase;
                b[2][1] = v / p.wheelbase
                    * (-beta.sin() * dbeta * tan + beta.cos() * (1.0 + tan * tan));
            }
            Model::Unicycle => {
                let v = u[0];
                let (s, c) = x[2].sin_cos();
                a[0][2] = -v * s;
                a[1][2] = v * c;
                b[0][0] = c;
                b[1][0] = s;
                b[2][1] = 1.0;
            }
        }
    }
}

/// Classical four-stage Runge-Kutta with the input held over each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteStepper {
    dt: f64,
}

impl DiscreteStepper {
    pub fn new(dt: f64) -> Result<Self> {
        if dt > 0.0 && dt.is_finite() {
            Ok(Self { dt })
        } else {
            Err(Error::Config(format!("time step must be positive, got {dt}")))
        }
    }

    /// Stepper with `dt = horizon / steps`.
    pub fn for_horizon(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("number of steps must be positive".into()));
        }
        Self::new(horizon / steps as f64)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, sys: &ControlSystem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        sys.check_dims(x, u)?;
        let mut out = [0.0; MAX_STATE];
        rk4_into(sys, x, u, self.dt, &mut out)?;
        Ok(out[..sys.state_dim()].to_vec())
    }

    /// Returns `N + 1` states for `N` inputs, starting with `x0`.
    pub fn rollout(
        &self,
        sys: &ControlSystem,
        x0: &[f64],
        inputs: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let n = sys.state_dim();
        if x0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: n,
                got: x0.len(),
            });
        }
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.to_vec());
        let mut buf = [0.0; MAX_STATE];
        for (k, u) in inputs.iter().enumerate() {
            if u.len() != sys.input_dim() {
                return Err(Error::DimensionMismatch {
                    what: "input",
                    expected: sys.input_dim(),
                    got: u.len(),
                });
            }
            debug_assert!(sys.contains_input(u), "input {k} outside the box: {u:?}");
            rk4_into(sys, &states[k], u, self.dt, &mut buf)
                .map_err(|_| Error::NonFiniteState { step: k + 1 })?;
            states.push(buf[..n].to_vec());
        }
        Ok(states)
    }
}

/// One RK4 step into `out`. Errors name the first non-finite stage (1-based).
pub(crate) fn rk4_into(
    sys: &ControlSystem,
    x: &[f64],
    u: &[f64],
    dt: f64,
    out: &mut [f64],
) -> Result<()> {
    let n = sys.state_dim();
    let mut k = [[0.0; MAX_STATE]; 4];
    let mut y = [0.0; MAX_STATE];
    let weights = [0.0, 0.5, 0.5, 1.0];
    for stage in 0..4 {
        if stage == 0 {
            y[..n].copy_from_slice(&x[..n]);
        } else {
            for i in 0..n {
                y[i] = x[i] + weights[stage] * dt * k[stage - 1][i];
            }
        }
        sys.field(&y, u, &mut k[stage]);
        if k[stage][..n].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStage { stage: stage + 1 });
        }
    }
    for i in 0..n {
        out[i] = x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
    Ok(())
}

/// Vector-Jacobian product of one RK4 step.
///
/// Given `adj_next = dL/dx_{k+1}`, accumulates `dL/dx_k` into `adj_x` (overwritten)
/// and `dL/du_k` into `adj_u` (overwritten).
pub(crate) fn rk4_vjp(
    sys: &ControlSystem,
    x: &[f64],
    u: &[f64],
    dt: f64,
    adj_next: &[f64],
    adj_x: &mut [f64],
    adj_u: &mut [f64],
) {
    let n = sys.state_dim();
    let m = sys.input_dim();
    // forward pass: stage points
    let mut k = [[0.0; MAX_STATE]; 4];
    let mut y = [[0.0; MAX_STATE]; 4];
    let weights = [0.0, 0.5, 0.5, 1.0];
    for stage in 0..4 {
        for i in 0..n {
            y[stage][i] = if stage == 0 {
                x[i]
            } else {
                x[i] + weights[stage] * dt * k[stage - 1][i]
            };
        }
        let ys = y[stage];
        sys.field(&ys, u, &mut k[stage]);
    }

    let coeff = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
    let mut gk = [[0.0; MAX_STATE]; 4];
    for stage in 0..4 {
        for i in 0..n {
            gk[stage][i] = coeff[stage] * adj_next[i];
        }
    }
    adj_x[..n].copy_from_slice(&adj_next[..n]);
    adj_u[..m].iter_mut().for_each(|v| *v = 0.0);

    for stage in (0..4).rev() {
        let mut a = [[0.0; MAX_STATE]; MAX_STATE];
        let mut b = [[0.0; MAX_INPUT]; MAX_STATE];
        sys.jacobians(&y[stage], u, &mut a, &mut b);
        // g_y = A^T g_k ; g_u += B^T g_k
        let mut gy = [0.0; MAX_STATE];
        for i in 0..n {
            let gi = gk[stage][i];
            if gi == 0.0 {
                continue;
            }
            for j in 0..n {
                gy[j] += a[i][j] * gi;
            }
            for j in 0..m {
                adj_u[j] += b[i][j] * gi;
            }
        }
        for j in 0..n {
            adj_x[j] += gy[j];
        }
        if stage > 0 {
            let w = weights[stage] * dt;
            for j in 0..n {
                gk[stage - 1][j] += w * gy[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bicycle() -> ControlSystem {
        ControlSystem::kinematic_bicycle(BicycleParams::default()).unwrap()
    }

    /// Exact solution of the bicycle under a constant input: a circular arc.
    fn bicycle_arc(p: &BicycleParams, x0: [f64; 3], v: f64, zeta: f64, t: f64) -> [f64; 3] {
        let beta = (0.5 * zeta.tan()).atan();
        let omega = v * beta.cos() * zeta.tan() / p.wheelbase;
        let h0 = x0[2] + beta;
        if omega.abs() < 1e-14 {
            return [x0[0] + v * t * h0.cos(), x0[1] + v * t * h0.sin(), x0[2]];
        }
        let h1 = h0 + omega * t;
        [
            x0[0] + v / omega * (h1.sin() - h0.sin()),
            x0[1] - v / omega * (h1.cos() - h0.cos()),
            x0[2] + omega * t,
        ]
    }

    #[test]
    fn eval_f_examples() {
        let si = ControlSystem::single_integrator([[-2.0, 2.0]; 2]).unwrap();
        assert_eq!(si.eval_f(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        let uni = ControlSystem::unicycle([[1.0, 2.0], [-0.9, 0.9]]).unwrap();
        assert_eq!(uni.eval_f(&[0.0; 3], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);

        assert_eq!(bicycle().eval_f(&[0.0; 3], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn eval_f_rejects_bad_dims() {
        let si = ControlSystem::single_integrator([[-2.0, 2.0]; 2]).unwrap();
        assert!(matches!(
            si.eval_f(&[0.0; 3], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { what: "state", .. })
        ));
        assert!(matches!(
            si.eval_f(&[0.0; 2], &[1.0]),
            Err(Error::DimensionMismatch { what: "input", .. })
        ));
    }

    #[test]
    fn rk4_exact_for_polynomial_fields() {
        let si = ControlSystem::single_integrator([[-2.0, 2.0]; 2]).unwrap();
        let s = DiscreteStepper::new(0.4).unwrap();
        let x = s.step(&si, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(x[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.8, epsilon = 1e-15);

        let di = ControlSystem::double_integrator([[-1.0, 1.0]; 2]).unwrap();
        let s = DiscreteStepper::new(1.0).unwrap();
        assert_eq!(
            s.step(&di, &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn rk4_bicycle_matches_arc() {
        let p = BicycleParams::default();
        let sys = bicycle();
        let s = DiscreteStepper::new(0.1).unwrap();
        let x = s.step(&sys, &[0.0; 3], &[1.0, 0.3]).unwrap();
        let exact = bicycle_arc(&p, [0.0; 3], 1.0, 0.3, 0.1);
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], exact[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn rk4_is_fourth_order_on_bicycle() {
        let p = BicycleParams::default();
        let sys = bicycle();
        let u = vec![2.0, 0.3];
        let horizon = 2.0;
        let exact = bicycle_arc(&p, [0.5, -0.2, 0.3], 2.0, 0.3, horizon);
        let err = |steps: usize| {
            let s = DiscreteStepper::for_horizon(horizon, steps).unwrap();
            let xs = s.rollout(&sys, &[0.5, -0.2, 0.3], &vec![u.clone(); steps]).unwrap();
            let last = xs.last().unwrap();
            (0..3).map(|i| (last[i] - exact[i]).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = err(10) / err(20);
        assert!(ratio >= 15.0, "error ratio {ratio}");
    }

    #[test]
    fn rk4_reports_nonfinite_stage() {
        let sys = bicycle();
        let err = DiscreteStepper::new(0.1)
            .unwrap()
            .step(&sys, &[0.0, 0.0, f64::NAN], &[1.0, 0.1])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteStage { stage: 1 }));
    }

    #[test]
    fn rollout_examples() {
        let si = ControlSystem::single_integrator([[-2.0, 2.0]; 2]).unwrap();
        let s = DiscreteStepper::new(1.0).unwrap();
        let xs = s
            .rollout(&si, &[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        assert_eq!(xs, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]);

        let xs = s.rollout(&si, &[3.0, 4.0], &[]).unwrap();
        assert_eq!(xs, vec![vec![3.0, 4.0]]);

        let di = ControlSystem::double_integrator([[-1.0, 1.0]; 2]).unwrap();
        let s = DiscreteStepper::new(0.1).unwrap();
        let xs = s.rollout(&di, &[0.0; 4], &vec![vec![1.0, 0.0]; 10]).unwrap();
        assert_abs_diff_eq!(xs[10][0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn turning_radius_examples() {
        let mut p = BicycleParams {
            zeta_max: std::f64::consts::FRAC_PI_4,
            ..Default::default()
        };
        // tan = 1, beta = atan(0.5), cos(beta) = 2/sqrt(5) -> R = sqrt(5)/2
        assert_abs_diff_eq!(p.turning_radius(), 5f64.sqrt() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.turning_radius(), 1.1180, epsilon = 1e-4);
        let r1 = p.turning_radius();
        p.wheelbase = 2.0;
        assert_abs_diff_eq!(p.turning_radius(), 2.0 * r1, epsilon = 1e-12);
        p.zeta_max = 1e-12;
        assert!(p.turning_radius() > 1e11);
        p.zeta_max = 0.0;
        assert!(p.turning_radius().is_infinite());
    }

    #[test]
    fn unicycle_speed_equals_v() {
        let uni = ControlSystem::unicycle([[-2.0, 2.0], [-0.9, 0.9]]).unwrap();
        for i in 0..50 {
            let psi = -3.0 + 0.13 * i as f64;
            let v = -2.0 + 0.08 * i as f64;
            let f = uni.eval_f(&[1.0, -2.0, psi], &[v, 0.3]).unwrap();
            assert_abs_diff_eq!(f[0].hypot(f[1]), v.abs(), epsilon = 1e-14);
        }
    }

    #[test]
    fn rk4_vjp_matches_finite_differences() {
        let systems = [
            ControlSystem::single_integrator([[-2.0, 2.0]; 2]).unwrap(),
            ControlSystem::double_integrator([[-1.0, 1.0]; 2]).unwrap(),
            bicycle(),
            ControlSystem::unicycle([[1.0, 2.0], [-0.9, 0.9]]).unwrap(),
        ];
        for sys in &systems {
            let n = sys.state_dim();
            let x: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * i as f64).collect();
            let u = vec![1.3, 0.2];
            let w: Vec<f64> = (0..n).map(|i| 1.0 - 0.4 * i as f64).collect();
            let dt = 0.25;
            let mut gx = [0.0; MAX_STATE];
            let mut gu = [0.0; MAX_INPUT];
            rk4_vjp(sys, &x, &u, dt, &w, &mut gx, &mut gu);
            let loss = |x: &[f64], u: &[f64]| {
                let mut out = [0.0; MAX_STATE];
                rk4_into(sys, x, u, dt, &mut out).unwrap();
                (0..n).map(|i| w[i] * out[i]).sum::<f64>()
            };
            let h = 1e-6;
            for i in 0..n {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&xp, &u) - loss(&xm, &u)) / (2.0 * h);
                assert_abs_diff_eq!(gx[i], fd, epsilon = 1e-7);
            }
            for j in 0..2 {
                let (mut up, mut um) = (u.clone(), u.clone());
                up[j] += h;
                um[j] -= h;
                let fd = (loss(&x, &up) - loss(&x, &um)) / (2.0 * h);
                assert_abs_diff_eq!(gu[j], fd, epsilon = 1e-7);
            }
        }
    }
}
