use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use pcbf::classk::{check_lipschitz_premise, LipschitzCheck};
use pcbf::contour::{marching_squares, polylines_to_csv};
use pcbf::grid::{check_monotone, slice_2d, MonotoneReport};
use pcbf::{
    check_shiftable, simulate, CbfGrid, ControlSystem, Error, FilterTerm, GridSynthesis, RunConfig, ShiftSchedule,
};
use serde::Serialize;

const CHECK_FAILED: u8 = 1;
const CONFIG: u8 = 2;
const QUERY: u8 = 3;
const SCHEDULE: u8 = 4;

#[derive(Parser)]
#[command(name = "pcbf", version, about = "Predictive control barrier functions on state grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a run configuration and synthesize its grid.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; all cores by default.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Synthesize even if the admissibility conditions fail.
        #[arg(long)]
        force: bool,
    },
    /// Interpolate a grid at one state.
    Eval {
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated state, e.g. `-9.5,0`.
        #[arg(long, allow_hyphen_values = true)]
        state: String,
    },
    /// Run the filtered closed loop of a configuration and write its log.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One grid per obstacle, paired in order with the shift schedules.
        #[arg(long = "grid")]
        grids: Vec<PathBuf>,
        /// Simulate even if a schedule fails the shiftability check.
        #[arg(long)]
        force: bool,
    },
    /// Run the invariant checks of a grid and write a JSON report.
    Check {
        #[arg(long)]
        grid: PathBuf,
        /// Second grid over the same axes for the horizon monotonicity check.
        #[arg(long)]
        grid2: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write plot data as CSV.
    Export {
        /// Simulation log for `trajectory`, grid file otherwise.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        out: PathBuf,
        /// Full state fixing the coordinates off the first two axes; the
        /// lower end of each axis by default.
        #[arg(long, allow_hyphen_values = true)]
        at: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Trajectory,
    Slice,
    Levelset,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

type Outcome = Result<(), Failure>;

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure::new(CONFIG, e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, threads, seed, force } => synth(&config, &out, threads, seed, force),
        Command::Eval { grid, state } => eval(&grid, &state),
        Command::Simulate { config, out, grids, force } => simulate_cmd(&config, &out, &grids, force),
        Command::Check { grid, grid2, report } => check(&grid, grid2.as_deref(), &report),
        Command::Export { input, what, out, at } => export(&input, what, &out, at.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<(RunConfig, String), Failure> {
    RunConfig::load(path).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn load_grid(path: &Path) -> Result<CbfGrid, Failure> {
    CbfGrid::load(path).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn parse_state(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad coordinate {s:?}: {e}")))
        .collect()
}

fn synth(config: &Path, out: &Path, threads: Option<usize>, seed: Option<u64>, force: bool) -> Outcome {
    let (cfg, text) = load_config(config)?;
    let report = cfg.validate_synthesis();
    if !report.passed() {
        eprint!("{report}");
        if !force {
            return Err(Failure::new(CONFIG, "synthesis conditions not met; --force to synthesize anyway"));
        }
    }
    let mut job = GridSynthesis::from_config(&cfg, Some(text)).map_err(config_error)?;
    job.force = force;
    if let Some(t) = threads {
        job.threads = t;
    }
    if let Some(s) = seed {
        job.seed = s;
    }
    let start = Instant::now();
    let (grid, stats) = job.run().map_err(config_error)?;
    let elapsed = start.elapsed();
    grid.save(out).map_err(|e| config_error(format!("{}: {e}", out.display())))?;
    println!("points: {}", stats.points);
    println!("wall time: {:.3} s", elapsed.as_secs_f64());
    println!(
        "solved {}, shortcut {}, infeasible {}, unconverged {}, improved from neighbours {}",
        stats.solved, stats.shortcut, stats.infeasible, stats.unconverged, stats.warm_improved
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(path: &Path, state: &str) -> Outcome {
    let grid = load_grid(path)?;
    let x = parse_state(state).map_err(|e| Failure::new(QUERY, e))?;
    let s = grid.sample(&x).map_err(|e| Failure::new(QUERY, e.to_string()))?;
    println!("{:.17e}", s.value);
    if let Some(level) = grid.saturation_level() {
        println!("saturation level: {level}");
    }
    if s.flagged {
        println!("warning: interpolation touches an infeasible node");
    }
    Ok(())
}

fn simulate_cmd(config: &Path, out: &Path, grid_paths: &[PathBuf], force: bool) -> Outcome {
    let (cfg, text) = load_config(config)?;
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| config_error("configuration has no simulate block"))?;
    let sys = cfg.system().map_err(config_error)?;
    let grids = grid_paths.iter().map(|p| load_grid(p)).collect::<Result<Vec<_>, _>>()?;
    for (p, g) in grid_paths.iter().zip(&grids) {
        let gs: ControlSystem = g.system().map_err(config_error)?;
        if gs != sys {
            return Err(config_error(format!("{} was synthesized for a different model", p.display())));
        }
    }
    let schedules: Vec<ShiftSchedule> = match cfg.shift.len() {
        0 => vec![ShiftSchedule::Constant { value: 0.0 }; grids.len()],
        n if n == grids.len() => cfg.shift.clone(),
        n => return Err(config_error(format!("{n} shift schedules for {} grids", grids.len()))),
    };

    let mut bad = Vec::new();
    for ((p, g), s) in grid_paths.iter().zip(&grids).zip(&schedules) {
        let r = check_shiftable(s, &g.meta().spec.class_ke(), &g.capital_lambda(), sim.t_end);
        if !r.passed {
            let range = r
                .range_violation_t
                .map(|t| format!(", lambda leaves [0, {}] at t = {t}", r.capital_lambda))
                .unwrap_or_default();
            bad.push(format!(
                "{}: worst margin {:.6} at t = {:.6}{range}",
                p.display(),
                r.worst_margin,
                r.worst_t
            ));
        }
    }
    if !bad.is_empty() {
        for b in &bad {
            eprintln!("schedule rejected: {b}");
        }
        if !force {
            return Err(Failure::new(SCHEDULE, "shiftability check failed; --force to simulate anyway"));
        }
    }

    let terms: Vec<FilterTerm> = grids
        .iter()
        .zip(&schedules)
        .map(|(g, s)| FilterTerm::from_grid(g, *s, &cfg.filter))
        .collect();
    let dt = sim.dt.unwrap_or(cfg.synthesis.dt() / 4.0);
    let mut log = simulate(&sys, dt, &terms, &cfg.filter, &sim.line, &sim.x0, sim.t_end).map_err(config_error)?;
    log.comment = Some(text);
    write(out, &log.to_csv())?;
    let active = log.rows.iter().filter(|r| r.active).count();
    let infeasible = log.rows.iter().filter(|r| r.infeasible).count();
    println!("steps: {}", log.rows.len());
    if !grids.is_empty() {
        println!("min H + lambda: {:.6}", log.min_shifted());
        println!("min h: {:.6}", log.min_h());
    }
    println!("filter active: {active}, infeasible: {infeasible}");
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct CheckItem {
    name: &'static str,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct CheckReport {
    grid: String,
    passed: bool,
    checks: Vec<CheckItem>,
    #[serde(skip_serializing_if = "Option::is_none")]
    capital_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed_lipschitz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lipschitz_premise: Option<LipschitzCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    monotonicity: Option<MonotoneReport>,
}

impl CheckReport {
    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(CheckItem { name, passed, detail });
    }
}

/// Largest over nodes of the smallest `|f(x, u)|` among the box corners and
/// the rest input.
fn field_bound(grid: &CbfGrid, sys: &ControlSystem) -> f64 {
    let bx = sys.input_box();
    let m = bx.len();
    let mut candidates: Vec<Vec<f64>> = (0..1usize << m)
        .map(|mask| (0..m).map(|j| bx[j][(mask >> j) & 1]).collect())
        .collect();
    candidates.push(sys.rest_input());
    (0..grid.len())
        .map(|i| {
            let x = grid.node(i);
            candidates
                .iter()
                .filter_map(|u| sys.eval_f(&x, u).ok())
                .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn grid_checks(grid: &CbfGrid, report: &mut CheckReport) {
    let field = &grid.meta().constraint;
    let (mut above, mut unsound, mut worst) = (0usize, 0usize, f64::NEG_INFINITY);
    for i in 0..grid.len() {
        let (h, v) = (field.eval(&grid.node(i)), grid.node_value(i));
        if grid.feasible()[i] {
            worst = worst.max(v - h);
            above += (v > h + 1e-9) as usize;
        }
        unsound += (v >= 0.0 && h < 0.0) as usize;
    }
    report.push("upper_bound", above == 0, format!("{above} feasible nodes with H > h; max H - h = {worst:.3e}"));
    report.push("soundness", unsound == 0, format!("{unsound} nodes with H >= 0 and h < 0"));
    match grid.saturation_level() {
        Some(level) => {
            let over = grid.values().iter().filter(|v| **v > level).count();
            report.push("saturation_cap", over == 0, format!("{over} nodes above level {level}"));
        }
        None => report.push("saturation_cap", true, "grid not saturated".into()),
    }
    let cl = grid.capital_lambda().capital_lambda;
    report.capital_lambda = Some(cl);
    report.push("shift_bound", cl.is_finite() && cl >= 0.0, format!("Lambda = {cl}"));
    let lip = grid.observed_lipschitz();
    report.observed_lipschitz = Some(lip);
    report.push("lipschitz_ratio", lip.is_finite(), format!("largest adjacent-node ratio {lip:.6}"));
    if let Ok(sys) = grid.system() {
        let spec = &grid.meta().spec;
        report.lipschitz_premise = Some(check_lipschitz_premise(&spec.class_ke(), spec.delta, lip, field_bound(grid, &sys)));
    }
}

fn check(path: &Path, path2: Option<&Path>, report_path: &Path) -> Outcome {
    let mut report = CheckReport {
        grid: path.display().to_string(),
        passed: false,
        checks: Vec::new(),
        capital_lambda: None,
        observed_lipschitz: None,
        lipschitz_premise: None,
        monotonicity: None,
    };
    match CbfGrid::load(path) {
        Err(e) => report.push("integrity", false, e.to_string()),
        Ok(grid) => {
            report.push("integrity", true, format!("{} nodes", grid.len()));
            grid_checks(&grid, &mut report);
            if let Some(p2) = path2 {
                match CbfGrid::load(p2) {
                    Err(e) => report.push("integrity_grid2", false, e.to_string()),
                    Ok(other) => {
                        let (short, long) = if grid.meta().spec.horizon <= other.meta().spec.horizon {
                            (&grid, &other)
                        } else {
                            (&other, &grid)
                        };
                        match check_monotone(short, long, 0.05) {
                            Ok(m) => {
                                report.push(
                                    "monotonicity",
                                    m.passed(),
                                    format!("{} violations over {} comparisons", m.violations.len(), m.checked),
                                );
                                report.monotonicity = Some(m);
                            }
                            Err(e) => report.push("monotonicity", false, e.to_string()),
                        }
                    }
                }
            }
        }
    }
    report.passed = report.checks.iter().all(|c| c.passed);
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let json = serde_json::to_string_pretty(&report).map_err(config_error)?;
    write(report_path, &json)?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Failure::new(CHECK_FAILED, format!("failed checks: {}", failed.join(", "))))
    }
}

/// `t,x,y` columns of a simulation log.
fn trajectory_csv(log: &str) -> Result<String, String> {
    let mut lines = log.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or("empty log")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("log has no {name} column"));
    let (t, x, y) = (col("t")?, col("x0")?, col("x1")?);
    let mut out = String::from("t,x,y\n");
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(format!("row {} has {} fields, header has {}", n + 1, f.len(), header.len()));
        }
        out.push_str(&format!("{},{},{}\n", f[t], f[x], f[y]));
    }
    Ok(out)
}

fn export(input: &Path, what: What, out: &Path, at: Option<&str>) -> Outcome {
    let text = match what {
        What::Trajectory => {
            let log = fs::read_to_string(input).map_err(|e| config_error(format!("{}: {e}", input.display())))?;
            trajectory_csv(&log).map_err(config_error)?
        }
        What::Slice | What::Levelset => {
            let grid = load_grid(input)?;
            if grid.dim() < 2 {
                return Err(config_error("slices need at least two axes"));
            }
            let anchor = match at {
                Some(s) => parse_state(s).map_err(|e| Failure::new(QUERY, e))?,
                None => grid.axes().iter().map(|a| a.min).collect(),
            };
            let slice = slice_2d(&grid, 0, 1, &anchor).map_err(|e| match e {
                Error::OutOfRange { .. } | Error::DimensionMismatch { .. } => Failure::new(QUERY, e.to_string()),
                e => config_error(e),
            })?;
            match what {
                What::Slice => slice.to_csv(),
                _ => polylines_to_csv(&marching_squares(&slice, 0.0)),
            }
        }
    };
    write(out, &text)?;
    println!("wrote {}", out.display());
    Ok(())
}
