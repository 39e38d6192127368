use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn infersim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infersim")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let stdout = ok(&infersim(&["run", "--duration", "500", "--seed", "3", "--out-dir", path(&out)]));
    assert!(stdout.starts_with("interference-aware: hp_violation="));
    for f in [
        "trace.csv",
        "trace.sha256",
        "predictor.json",
        "summary.json",
        "intf_error.csv",
        "latency_error.csv",
        "kernel_overhead.csv",
        "goodput.csv",
        "c_low.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["partial"], false);
    assert!(summary["batches"].as_u64().unwrap() > 0);
}

#[test]
fn report_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let rep = dir.path().join("report");
    ok(&infersim(&["run", "--duration", "400", "--policy", "temporal", "--out-dir", path(&run)]));
    ok(&infersim(&["report", "--trace", path(&run.join("trace.csv")), "--out-dir", path(&rep)]));
    for f in ["summary.json", "intf_error.csv", "goodput.csv", "c_low.csv"] {
        assert_eq!(
            fs::read_to_string(run.join(f)).unwrap(),
            fs::read_to_string(rep.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn same_seed_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |name: &str, seed: &str| {
        let d = dir.path().join(name);
        ok(&infersim(&["run", "--duration", "300", "--seed", seed, "--out-dir", path(&d)]));
        fs::read_to_string(d.join("trace.sha256")).unwrap()
    };
    assert_eq!(hash("a", "7"), hash("b", "7"));
    assert_ne!(hash("a", "7"), hash("c", "8"));
}

#[test]
fn init_then_run_from_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(&infersim(&["init", "--out-dir", path(dir.path())]));
    let cfg = dir.path().join("config.toml");
    assert!(cfg.is_file());
    assert_eq!(fs::read_dir(dir.path().join("profiles")).unwrap().count(), 6);
    let out = dir.path().join("out");
    ok(&infersim(&[
        "run",
        "--config",
        path(&cfg),
        "--duration",
        "300",
        "--policy",
        "static-spatial",
        "--out-dir",
        path(&out),
    ]));
    assert!(out.join("trace.csv").is_file());
}

#[test]
fn sweep_and_ablate_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    ok(&infersim(&[
        "sweep",
        "--duration",
        "300",
        "--seeds",
        "0,1",
        "--policies",
        "temporal,reactive-spatial",
        "--out-dir",
        path(&sweep),
    ]));
    let table = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(sweep.join("temporal-seed1").join("trace.csv").is_file());

    let ablate = dir.path().join("ablate");
    ok(&infersim(&["ablate", "--duration", "300", "--out-dir", path(&ablate)]));
    let table = fs::read_to_string(ablate.join("sweep.csv")).unwrap();
    for label in ["full", "no-priority-scan", "no-gamma-advantage", "no-meet", "no-violate"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{label},"))), "{label}");
    }
}

#[test]
fn perturb_writes_valid_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(&infersim(&["perturb", "--magnitude", "15", "--seed", "2", "--out-dir", path(&out)]));
    let set = infersim::ProfileSet::load_dir(&out).unwrap();
    assert_eq!(set.len(), 6);
    let base = infersim::profile::builtin_profile_set();
    for p in set.iter() {
        let q = base.get(base.index_of(&p.model_id).unwrap());
        assert_eq!(p.t_inf_isol, q.t_inf_isol);
        for (a, b) in p.m_metric.iter().flatten().zip(q.m_metric.iter().flatten()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - b).abs() <= 0.15 * b + 1e-12);
        }
    }
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    let unknown = infersim(&["run", "--policy", "round-robin", "--out-dir", out]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown policy"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "num_gpus = 0\n").unwrap();
    assert!(!infersim(&["run", "--config", path(&cfg), "--out-dir", out]).status.success());

    fs::write(&cfg, "sed = 1\n").unwrap();
    assert!(!infersim(&["run", "--config", path(&cfg), "--out-dir", out]).status.success());

    let missing = dir.path().join("nope.csv");
    assert!(!infersim(&["report", "--trace", path(&missing), "--out-dir", out]).status.success());
    assert!(!infersim(&["perturb", "--magnitude", "150", "--out-dir", out]).status.success());
}
