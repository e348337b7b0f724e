use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pcbf::CbfGrid;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcbf")).args(args).output().expect("spawn pcbf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The 41 x 41 single-integrator grid, synthesized once per test binary.
fn single_grid() -> &'static Path {
    static GRID: OnceLock<PathBuf> = OnceLock::new();
    GRID.get_or_init(|| {
        let out = scratch().join("single.cbfg");
        let cfg = configs().join("single_integrator.json");
        let o = pcbf(&["synth", "--config", s(&cfg), "--out", s(&out), "--threads", "2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    })
}

fn write_config(name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = fs::read_to_string(configs().join("single_integrator.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    edit(&mut v);
    let path = scratch().join(name);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn small_domain(v: &mut serde_json::Value, lo: f64, hi: f64, n: usize) {
    v["domain"]["axes"] = serde_json::json!([
        {"min": lo, "max": hi, "count": n},
        {"min": lo, "max": hi, "count": n}
    ]);
}

#[test]
fn synth_reports_point_count() {
    let out = scratch().join("count.cbfg");
    let cfg = configs().join("single_integrator.json");
    let o = pcbf(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("points: 1681"), "{}", stdout(&o));
    assert!(stdout(&o).contains("wall time:"));
    let grid = CbfGrid::load(&out).unwrap();
    assert_eq!(grid.len(), 1681);
    assert_eq!(grid.meta().config.as_deref(), Some(fs::read_to_string(&cfg).unwrap().as_str()));
}

#[test]
fn synth_rejects_inadmissible_gamma() {
    let cfg = write_config("bad_gamma.json", |v| {
        v["synthesis"]["tbar"] = serde_json::json!(1.0);
    });
    let out = scratch().join("bad_gamma.cbfg");
    let o = pcbf(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[FAIL] gamma * tbar < delta"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn synth_rejects_unknown_keys() {
    let cfg = write_config("unknown_key.json", |v| {
        v["synthesis"]["gama"] = serde_json::json!(1.0);
    });
    let o = pcbf(&["synth", "--config", s(&cfg), "--out", s(&scratch().join("x.cbfg"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));
}

#[test]
fn synth_is_independent_of_thread_count() {
    let cfg = write_config("threads.json", |v| small_domain(v, -10.0, 10.0, 15));
    let mut files = Vec::new();
    for t in ["1", "8"] {
        let out = scratch().join(format!("threads{t}.cbfg"));
        let o = pcbf(&["synth", "--config", s(&cfg), "--out", s(&out), "--threads", t, "--seed", "9"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        files.push(fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn eval_node_midpoint_and_bad_queries() {
    let g = s(single_grid());
    let value = |state: &str| {
        let o = pcbf(&["eval", "--grid", g, "--state", state]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o).lines().next().unwrap().parse::<f64>().unwrap()
    };
    let grid = CbfGrid::load(single_grid()).unwrap();
    let i = grid.domain().flat_index(&[1, 20]);
    assert_eq!(grid.node(i), vec![-9.5, 0.0]);
    assert_eq!(value("-9.5,0"), grid.node_value(i));
    let j = grid.domain().flat_index(&[0, 20]);
    let mid = value("-9.75,0");
    assert!((mid - 0.5 * (grid.node_value(i) + grid.node_value(j))).abs() < 1e-12);

    for bad in ["1,2,3", "10.5,0", "a,b"] {
        let o = pcbf(&["eval", "--grid", g, "--state", bad]);
        assert_eq!(code(&o), 3, "{bad}: {}", stderr(&o));
    }
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

#[test]
fn simulate_static_scenario_stays_safe() {
    let cfg = configs().join("single_integrator.json");
    let out = scratch().join("static.csv");
    let o = pcbf(&["simulate", "--config", s(&cfg), "--grid", s(single_grid()), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("# {"), "config comment missing");
    let h: Vec<f64> = column(&csv, "H_shifted_min").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(h.len(), 301);
    assert!(h.iter().all(|v| *v >= 0.0));
}

#[test]
fn simulate_rejects_fast_schedule() {
    let cfg = write_config("fast.json", |v| {
        v["shift"] = serde_json::json!([{"kind": "sinusoid_abs", "r": 9, "r_max": 4, "tau_p": 3}]);
    });
    let out = scratch().join("fast.csv");
    let o = pcbf(&["simulate", "--config", s(&cfg), "--grid", s(single_grid()), "--out", s(&out)]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("worst margin"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn simulate_without_grids_logs_baseline() {
    let cfg = configs().join("single_integrator.json");
    let out = scratch().join("baseline.csv");
    let o = pcbf(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(column(&csv, "flags").iter().all(|f| f == "-"));
    let (ub, us) = (column(&csv, "ub0"), column(&csv, "us0"));
    assert_eq!(ub, us);
}

#[test]
fn check_passes_fresh_grid() {
    let report = scratch().join("fresh.json");
    let o = pcbf(&["check", "--grid", s(single_grid()), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    assert!(r.get("monotonicity").is_none());
}

#[test]
fn check_names_corrupted_values() {
    let mut grid = CbfGrid::load(single_grid()).unwrap();
    grid.values_mut()[100] += 5.0;
    let bad = scratch().join("corrupt.cbfg");
    grid.save(&bad).unwrap();
    let report = scratch().join("corrupt.json");
    let o = pcbf(&["check", "--grid", s(&bad), "--report", s(&report)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("upper_bound"), "{}", stderr(&o));

    let mut bytes = fs::read(single_grid()).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0x40;
    let flipped = scratch().join("flipped.cbfg");
    fs::write(&flipped, bytes).unwrap();
    let o = pcbf(&["check", "--grid", s(&flipped), "--report", s(&report)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));
}

#[test]
fn check_pair_reports_monotonicity() {
    let mut paths = Vec::new();
    for (name, horizon, steps) in [("short", 6.0, 15), ("long", 10.0, 25)] {
        let cfg = write_config(&format!("{name}.json"), |v| {
            small_domain(v, -10.0, 10.0, 11);
            v["synthesis"] = serde_json::json!({
                "gamma": 0.05, "delta": 1, "horizon": horizon, "steps": steps, "c": 2, "c_alpha": 0.2
            });
        });
        let out = scratch().join(format!("{name}.cbfg"));
        let o = pcbf(&["synth", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        paths.push(out);
    }
    let report = scratch().join("pair.json");
    // order does not matter; the shorter horizon is detected
    let o = pcbf(&["check", "--grid", s(&paths[1]), "--grid2", s(&paths[0]), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["monotonicity"]["violations"].as_array().unwrap().len(), 0);
    assert_eq!(r["monotonicity"]["lambdas"].as_array().unwrap().len(), 3);
}

#[test]
fn export_slice_matches_nodes() {
    let out = scratch().join("slice.csv");
    let o = pcbf(&["export", "--in", s(single_grid()), "--what", "slice", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let grid = CbfGrid::load(single_grid()).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(csv.lines().next(), Some("x,y,H"));
    assert_eq!(rows.len(), grid.len());
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[..2], grid.node(i)[..]);
        assert_eq!(f[2], grid.node_value(i));
    }
}

#[test]
fn export_levelsets() {
    let cfg = write_config("far.json", |v| small_domain(v, 11.0, 15.0, 5));
    let far = scratch().join("far.cbfg");
    assert_eq!(code(&pcbf(&["synth", "--config", s(&cfg), "--out", s(&far)])), 0);
    let out = scratch().join("far_levelset.csv");
    let o = pcbf(&["export", "--in", s(&far), "--what", "levelset", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "line,x,y\n");

    let cfg = configs().join("forward_only.json");
    let fwd = scratch().join("forward.cbfg");
    assert_eq!(code(&pcbf(&["synth", "--config", s(&cfg), "--out", s(&fwd)])), 0);
    let out = scratch().join("forward_levelset.csv");
    assert_eq!(code(&pcbf(&["export", "--in", s(&fwd), "--what", "levelset", "--out", s(&out)])), 0);
    let pts: Vec<(f64, f64)> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    assert!(!pts.is_empty());
    // in front of the obstacle the contour follows the circle; behind it the
    // unsafe region extends to the left edge of the domain
    assert!(pts.iter().any(|(x, y)| *x > 8.5 && y.abs() < 1.0));
    assert!(pts.iter().any(|(x, y)| *x == -10.0 && *y > 0.0));
    assert!(pts.iter().any(|(x, y)| *x == -10.0 && *y < 0.0));
}

#[test]
fn export_trajectory_and_unknown_target() {
    let cfg = configs().join("single_integrator.json");
    let log = scratch().join("traj_log.csv");
    assert_eq!(code(&pcbf(&["simulate", "--config", s(&cfg), "--out", s(&log)])), 0);
    let out = scratch().join("traj.csv");
    let o = pcbf(&["export", "--in", s(&log), "--what", "trajectory", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next(), Some("t,x,y"));
    assert_eq!(csv.lines().count(), 302);

    let o = pcbf(&["export", "--in", s(&log), "--what", "movie", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}
