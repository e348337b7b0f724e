//! Browser bindings: shift schedules against the class-K_e bound, a small
//! single-integrator synthesis with its zero contour, and a filtered closed
//! loop on that grid. Results cross the boundary as JSON strings.

use pcbf::contour::marching_squares;
use pcbf::grid::slice_2d;
use pcbf::shift::{check_shiftable, critical_period};
use pcbf::{
    simulate, Axis, CbfGrid, ClassKe, ConstraintField, ControlSystem, DomainBox, FilterConfig, FilterTerm,
    GridSynthesis, InvariantSubset, ShiftBound, ShiftSchedule, SynthesisSpec, TerminalMode, TrackingLine, Variant,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

type JsResult<T> = Result<T, String>;

fn js(e: pcbf::Error) -> String {
    e.to_string()
}

fn to_json<T: Serialize>(v: &T) -> JsResult<String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curves {
    t: Vec<f64>,
    lambda: Vec<f64>,
    lambda_dot: Vec<f64>,
    /// `alpha(-lambda(t))`, the lower bound on `lambda_dot`.
    bound: Vec<f64>,
    z: Vec<f64>,
    alpha: Vec<f64>,
    passed: bool,
    worst_margin: f64,
    worst_t: f64,
    /// Largest failing period for the same amplitude, if one exists below
    /// the chosen period.
    critical_period: Option<f64>,
}

/// `lambda(t)`, `lambda'(t)` and `alpha(-lambda(t))` over `[0, horizon]` for
/// a sinusoid schedule, the class-K_e function on `[-2r, r]`, and the
/// shiftability verdict against `capital_lambda`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn shift_curves(
    c: f64,
    gamma: f64,
    r: f64,
    r_max: f64,
    tau_p: f64,
    sigma: f64,
    capital_lambda: f64,
    horizon: f64,
) -> JsResult<String> {
    let alpha = ClassKe::new(c, gamma).map_err(js)?;
    let s = ShiftSchedule::SinusoidAbs { r, r_max, tau_p, sigma };
    s.validate().map_err(js)?;
    if horizon.is_nan() || horizon <= 0.0 {
        return Err("horizon must be positive".into());
    }
    let bound = ShiftBound { capital_lambda };
    let report = check_shiftable(&s, &alpha, &bound, horizon);
    let t: Vec<f64> = (0..=600).map(|i| horizon * i as f64 / 600.0).collect();
    let z: Vec<f64> = (0..=300).map(|i| -2.0 * r + 3.0 * r * i as f64 / 300.0).collect();
    let critical = if report.passed { critical_period(&s, &alpha, &bound, horizon, 1e-3, tau_p, 1e-4) } else { None };
    to_json(&Curves {
        lambda: t.iter().map(|t| s.eval(*t)).collect(),
        lambda_dot: t.iter().map(|t| s.derivative(*t)).collect(),
        bound: t.iter().map(|t| alpha.eval(-s.eval(*t))).collect(),
        alpha: z.iter().map(|z| alpha.eval(*z)).collect(),
        t,
        z,
        passed: report.passed,
        worst_margin: report.worst_margin,
        worst_t: report.worst_t,
        critical_period: critical,
    })
}

/// A synthesized single-integrator grid around a circular obstacle at the
/// origin, on `[-10, 10]^2`.
#[wasm_bindgen]
pub struct Scene {
    grid: CbfGrid,
}

#[derive(Serialize)]
struct SimTrace {
    t: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    shifted: Vec<f64>,
    lambda: Vec<f64>,
    active: Vec<bool>,
    min_shifted: f64,
    min_h: f64,
}

#[wasm_bindgen]
impl Scene {
    /// `nodes` per axis; `forward_only` restricts the x-velocity to `[1, 2]`.
    #[wasm_bindgen(constructor)]
    pub fn new(nodes: usize, radius: f64, gamma: f64, forward_only: bool) -> JsResult<Scene> {
        if !(2..=81).contains(&nodes) {
            return Err(format!("nodes must be in 2..=81, got {nodes}"));
        }
        let lo = if forward_only { 1.0 } else { -2.0 };
        let sys = ControlSystem::single_integrator([[lo, 2.0], [-2.0, 2.0]]).map_err(js)?;
        let spec = SynthesisSpec {
            gamma,
            delta: 1.0,
            horizon: 10.0,
            tbar: Some(0.0),
            steps: 25,
            pnorm: 40,
            htilde: None,
            terminal_mode: TerminalMode::AnyTime,
            variant: Variant::GammaPenalty,
            c: 2.0,
            c_alpha: 0.2,
            saturate: false,
            tau_bound: None,
        };
        let field = ConstraintField::circle([0.0, 0.0], radius);
        field.validate().map_err(js)?;
        let domain = DomainBox::new(vec![Axis::new(-10.0, 10.0, nodes), Axis::new(-10.0, 10.0, nodes)]).map_err(js)?;
        let mut job = GridSynthesis::new(spec, sys, field, InvariantSubset::Superlevel { threshold: 1.0 }, domain);
        job.threads = 1;
        let (grid, _) = job.run().map_err(js)?;
        Ok(Scene { grid })
    }

    pub fn nodes(&self) -> usize {
        self.grid.axes()[0].count
    }

    /// Node values, last axis fastest.
    pub fn values(&self) -> Vec<f64> {
        self.grid.values().to_vec()
    }

    /// `h` at the nodes, same layout as [`Scene::values`].
    pub fn constraint_values(&self) -> Vec<f64> {
        let field = &self.grid.meta().constraint;
        (0..self.grid.len()).map(|i| field.eval(&self.grid.node(i))).collect()
    }

    pub fn capital_lambda(&self) -> f64 {
        self.grid.capital_lambda().capital_lambda
    }

    /// Polylines of the `level` set as `[[[x, y], ...], ...]`.
    pub fn contour(&self, level: f64) -> JsResult<String> {
        let slice = slice_2d(&self.grid, 0, 1, &[0.0, 0.0]).map_err(js)?;
        to_json(&marching_squares(&slice, level))
    }

    /// Closed loop tracking the line `y = line_y` from `(x0, y0)`. With
    /// `tau_p > 0` the value function is shifted by the sinusoid with
    /// `r = radius` and amplitude `r_max`; otherwise it is used unshifted.
    #[allow(clippy::too_many_arguments)]
    pub fn simulate(
        &self,
        x0: f64,
        y0: f64,
        line_y: f64,
        cruise: f64,
        tau_p: f64,
        r_max: f64,
        t_end: f64,
    ) -> JsResult<String> {
        let radius = match self.grid.meta().constraint {
            ConstraintField::Circle { radius, .. } => radius,
            _ => unreachable!("scenes are built on circles"),
        };
        let schedule = if tau_p > 0.0 {
            ShiftSchedule::SinusoidAbs { r: radius, r_max, tau_p, sigma: 0.0 }
        } else {
            ShiftSchedule::Constant { value: 0.0 }
        };
        schedule.validate().map_err(js)?;
        let cfg = FilterConfig::default();
        let term = FilterTerm::from_grid(&self.grid, schedule, &cfg);
        let line = TrackingLine { point: [0.0, line_y], direction: [1.0, 0.0], cruise };
        let sys = self.grid.system().map_err(js)?;
        let log = simulate(&sys, 0.1, &[term], &cfg, &line, &[x0, y0], t_end).map_err(js)?;
        to_json(&SimTrace {
            t: log.rows.iter().map(|r| r.t).collect(),
            x: log.rows.iter().map(|r| r.x[0]).collect(),
            y: log.rows.iter().map(|r| r.x[1]).collect(),
            shifted: log.rows.iter().map(|r| r.shifted_min).collect(),
            lambda: log.rows.iter().map(|r| r.lambda_min).collect(),
            active: log.rows.iter().map(|r| r.active).collect(),
            min_shifted: log.min_shifted(),
            min_h: log.min_h(),
        })
    }
}
