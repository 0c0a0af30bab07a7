use std::fs;
use std::path::{Path, PathBuf};

use qtorhc::cli::{
    audit_run, bundled_configs_dir, compare_runs, load_config, main_with_args, parse_config, write_config,
};
use qtorhc::Error;

fn cfg(name: &str) -> PathBuf {
    bundled_configs_dir().join(name)
}

fn qtorhc(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("qtorhc").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_configs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(bundled_configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let config = load_config(&path).unwrap();
        let copy = dir.path().join(path.file_name().unwrap());
        write_config(&config, &copy).unwrap();
        let again = load_config(&copy).unwrap();
        assert_eq!(serde_json::to_value(&config).unwrap(), serde_json::to_value(&again).unwrap(), "{path:?}");
        seen += 1;
    }
    assert_eq!(seen, 5);
}

#[test]
fn sampling_time_longer_than_minimal_horizon_is_rejected() {
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg("cartpole_qto.json")).unwrap()).unwrap();
    v["T_min"] = serde_json::json!(0.1);
    v["xi"] = serde_json::json!(1.5);
    match parse_config(&v.to_string()) {
        Err(Error::Config(errs)) => {
            assert!(errs.iter().any(|e| e.contains("T_min")), "{errs:?}");
            assert!(errs.iter().any(|e| e.contains("xi")), "{errs:?}");
        }
        other => panic!("expected config errors, got {other:?}"),
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg("cartpole_lq.json")).unwrap()).unwrap();
    v["horizon"] = serde_json::json!(3.0);
    assert!(parse_config(&v.to_string()).is_err());
}

#[test]
fn synth_prints_terminal_data() {
    assert_eq!(qtorhc(&["synth", "--config", s(&cfg("pendulum_qto.json"))]), 0);
    assert_ne!(qtorhc(&["synth", "--config", "/nonexistent/config.json"]), 0);
}

#[test]
fn same_seed_gives_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(qtorhc(&["run", "--config", s(&cfg("cartpole_qto.json")), "--out", s(out), "--seed", "7"]), 0);
    }
    let ta = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("trace.csv")).unwrap());
    assert!(ta.starts_with(b"kind,t,x1,x2,x3,x4,u1,V,T_bar,epsilon,rho,in_B"));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
}

#[test]
fn run_audit_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let qto = dir.path().join("qto");
    let lq = dir.path().join("lq");
    assert_eq!(qtorhc(&["run", "--config", s(&cfg("cartpole_qto.json")), "--out", s(&qto)]), 0);
    assert_eq!(qtorhc(&["run", "--config", s(&cfg("cartpole_qto.json")), "--mode", "lq", "--out", s(&lq)]), 0);

    assert!(audit_run(&qto).unwrap().is_empty());
    assert_eq!(qtorhc(&["audit", s(&qto)]), 0);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(lq.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "lq");

    let cmp = dir.path().join("cmp");
    assert_eq!(qtorhc(&["compare", s(&qto), s(&lq), "--out", s(&cmp)]), 0);
    assert!(cmp.join("comparison.json").exists());
    assert!(cmp.join("comparison.csv").exists());

    let c = compare_runs(&[qto.clone(), lq], None).unwrap();
    assert_eq!(c.ranking.first().map(String::as_str), Some("qto"));
    assert!(c.runs[1].settling_time_delta.unwrap() > 0.0);

    let same = compare_runs(&[qto.clone(), qto], None).unwrap();
    assert_eq!(same.runs[1].settling_time_delta, Some(0.0));
    assert_eq!(same.runs[1].control_effort_delta, 0.0);
}

#[test]
fn batch_runs_write_one_directory_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let code = qtorhc(&[
        "run",
        "--batch",
        "--config",
        s(&cfg("cartpole_lq.json")),
        "--config",
        s(&cfg("pendulum_lq.json")),
        "--out",
        s(dir.path()),
    ]);
    // saturated LQ feedback cannot swing the pendulum up: not converged
    assert_eq!(code, 2);
    for stem in ["cartpole_lq", "pendulum_lq"] {
        assert!(dir.path().join(stem).join("summary.json").exists(), "{stem}");
    }
}

#[test]
fn compare_needs_two_runs() {
    assert_ne!(qtorhc(&["compare", "only-one", "--out", "x"]), 0);
}
