use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specalloc::CostModel;
use tempfile::TempDir;

fn specalloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specalloc"))
        .args(args)
        .env("SPECALLOC_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = specalloc(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SIM: &[&str] = &[
    "simulate", "--topology", "lattice3d", "--states", "125", "--budget", "60", "--policy", "maxp-opt",
    "--wct-limit", "3000", "--seeds", "2", "--seed", "11", "--samples", "200", "--sample-points", "20",
];

#[test]
fn simulate_is_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    ok(a.path(), SIM);
    ok(b.path(), SIM);
    for name in ["sim_maxp-opt_seed11.csv", "sim_maxp-opt_seed12.csv", "sim_maxp-opt_mean.csv", "sim_maxp-opt.manifest.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let series = read(a.path(), "sim_maxp-opt_seed11.csv");
    assert!(series.starts_with("clock_s,spliced\n0,0\n"));
    assert_eq!(series.lines().count(), 22);
}

#[test]
fn outputs_regenerate_from_manifest() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["gen-dist", "--kind", "beta", "--alpha", "0.5", "--beta", "0.5", "--seed", "4", "--target-sum", "50"]);
    ok(d, &["sweep", "--probs", d.join("probs.txt").to_str().unwrap(), "--budgets", "log:10:1e4:4"]);
    ok(d, &["maxp-table", "--topology", "ring1d", "--states", "40", "--horizon", "300", "--seed", "9"]);
    for manifest in ["probs.manifest.json", "sweep.manifest.json", "maxp_table.manifest.json"] {
        let text = read(d, manifest);
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(m["tool"], "specalloc");
        assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
        let argv: Vec<String> = m["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
        let outputs: Vec<String> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
        let before: Vec<String> = outputs.iter().map(|o| read(d, o)).collect();
        for o in &outputs {
            fs::remove_file(d.join(o)).unwrap();
        }
        let args: Vec<&str> = argv[1..].iter().map(String::as_str).collect();
        ok(d, &args);
        let after: Vec<String> = outputs.iter().map(|o| read(d, o)).collect();
        assert_eq!(before, after, "{manifest}");
        assert_eq!(read(d, manifest), text);
    }
}

#[test]
fn certain_tasks_have_unit_boost() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["sweep", "--dist", "delta:1", "--budgets", "10,100,1000,10000,100000"]);
    let csv = read(d, "sweep.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("N,boost,throughput_opt,throughput_naive,throughput_const,w_best"));
    // 1000 certain tasks on 1000 resources: dropping one task and spreading its resource
    // over the rest is marginally faster, since w·T(w) is still decreasing at w = 1.
    let model = CostModel::benchmark_default();
    let t = |w: f64| model.time(w).unwrap();
    let at_1000 = (999.0 / t(1000.0 / 999.0)) / (1000.0 / t(1.0));
    let expected = [1.0, 1.0, at_1000, 1.0, 1.0];
    let mut rows = 0;
    for (line, want) in lines.zip(expected) {
        let boost: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((boost - want).abs() <= 1e-9, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 5);

    ok(d, &["gen-dist", "--kind", "delta", "--p", "1", "--target-sum", "20"]);
    ok(d, &["allocate", "--probs", d.join("probs.txt").to_str().unwrap(), "--budget", "100"]);
    let a: serde_json::Value = serde_json::from_str(&read(d, "allocation.json")).unwrap();
    assert_eq!(a["m_star"], 20);
    assert!((a["boost"].as_f64().unwrap() - 1.0).abs() <= 1e-9);
}

#[test]
fn fit_round_trips_through_allocate() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut bench = String::from("w,t_seconds\n");
    for w in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0] {
        let t = -2.38 + 481.42 / w + 2.32 * (21.76f64 * w).ln() + 7.10 / (w * w);
        bench.push_str(&format!("{w},{t}\n"));
    }
    fs::write(d.join("bench.csv"), bench).unwrap();
    let out = ok(d, &["fit", "--input", d.join("bench.csv").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("w_max=207.5"));
    ok(d, &["gen-dist", "--dist", "step:0.01", "--seed", "1"]);
    ok(d, &[
        "allocate", "--probs", d.join("probs.txt").to_str().unwrap(), "--budget", "10000",
        "--model", d.join("model.json").to_str().unwrap(), "--scan", "unimodal",
    ]);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for args in [
        &["frobnicate"][..],
        &["allocate", "--budget", "10"],
        &["simulate", "--policy", "bogus", "--wct-limit", "1"],
        &["sweep", "--dist", "delta:1", "--probs", "x", "--budgets", "1"],
        &["maxp-table", "--method", "exact"],
    ] {
        let out = specalloc(d, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    for args in [
        &["allocate", "--probs", "/nonexistent/probs.txt", "--budget", "10"][..],
        &["sweep", "--dist", "beta:0:1", "--budgets", "10"],
        &["sweep", "--dist", "delta:1", "--budgets", "log:1:10:0"],
        &["simulate", "--topology", "lattice3d", "--states", "10", "--policy", "ve", "--wct-limit", "10"],
        &["simulate", "--topology", "ring1d", "--states", "10", "--policy", "ve", "--wct-limit", "10", "--budget", "0.5"],
        &["maxp-table", "--topology", "ring1d", "--states", "10", "--current", "10"],
        &["maxp-table"],
    ] {
        let out = specalloc(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
    assert!(specalloc(d, &["--version"]).status.success());
}
