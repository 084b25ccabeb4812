use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lanemix::scenarios::{preset, ScenarioConfig};

fn lanemix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanemix"))
        .args(args)
        .env_remove("LANEMIX_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_validate_and_match_presets() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let out = lanemix(&["validate", "--config", path.to_str().unwrap()]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let config = ScenarioConfig::from_toml(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(
            Some(config.clone()),
            preset(&config.name),
            "{}",
            path.display()
        );
    }
}

#[test]
fn validation_errors_exit_one_with_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("paper-10pct").unwrap();
    config.classes[2].length = -3.0;
    config.dt = -0.1;
    let path = dir.path().join("bad.toml");
    fs::write(&path, config.to_toml()).unwrap();
    let out = lanemix(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("classes[2].length") && err.contains("dt"),
        "{err}"
    );

    assert_eq!(
        lanemix(&["run", "--preset", "no-such-preset"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(lanemix(&["run", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(lanemix(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_errors_exit_two() {
    let out = lanemix(&["validate", "--config", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("out");
    let out = lanemix(&[
        "run",
        "--preset",
        "av-tracking",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulation_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("av-tracking").unwrap();
    let mut lead = config.vehicles.as_ref().unwrap()[0].clone();
    lead.id = 1;
    lead.class_id = 1;
    lead.x = 6.0;
    config.vehicles.as_mut().unwrap().push(lead);
    config.counts = vec![1, 1, 0];
    config.vehicles.as_mut().unwrap()[0].v = 5.0;
    config.classes[0].beta = 0.0;
    config.classes[0].alpha = 0.1;
    let path = dir.path().join("crash.toml");
    fs::write(&path, config.to_toml()).unwrap();
    let out_dir = dir.path().join("out");
    let out = lanemix(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# scenario=av-tracking"));
}

#[test]
fn run_writes_documented_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = lanemix(&[
        "run",
        "--preset",
        "av-mixed",
        "--trials",
        "2",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        status.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    for name in [
        "metrics.csv",
        "aggregate.csv",
        "events.json",
        "manifest.json",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("# scenario=av-mixed horizon=60 dt=0.1 seed=5")
    );
    assert_eq!(
        lines.next(),
        Some("trial,seed,vehicle_id,class,max_var,total_var")
    );
    assert_eq!(lines.count(), 2 * 20);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["config"]["name"], "av-mixed");

    let json_out = dir.path().join("json");
    let status = lanemix(&[
        "run",
        "--preset",
        "av-mixed",
        "--trials",
        "2",
        "--seed",
        "5",
        "--format",
        "json",
        "--out",
        json_out.to_str().unwrap(),
    ]);
    assert_eq!(status.status.code(), Some(0));
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(json_out.join("aggregate.json")).unwrap())
            .unwrap();
    assert!(agg.is_object() || agg.is_array());
}

#[test]
fn out_root_variable_prefixes_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_lanemix"))
        .args(["run", "--preset", "av-tracking", "--out", "rel"])
        .env("LANEMIX_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(dir.path().join("rel/metrics.csv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let status = lanemix(&[
            "run",
            "--preset",
            "paper-10pct",
            "--trials",
            "1",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(status.status.code(), Some(0));
    }
    for name in ["metrics.csv", "aggregate.csv", "events.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn optimize_without_running_cost_leaves_controls_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let status = lanemix(&[
        "optimize",
        "--preset",
        "av-tracking",
        "--cost",
        "none",
        "--budget",
        "30",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        status.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let control: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("control.json")).unwrap()).unwrap();
    let values = control["schedules"][0]["values"].as_array().unwrap();
    assert!(values.iter().all(|v| v.as_f64() == Some(0.0)));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.lines().any(|l| l == "evaluation,step,cost,best"));
}

#[test]
fn wasserstein_command_prints_distance() {
    let dir = tempfile::tempdir().unwrap();
    let mu = dir.path().join("mu.json");
    let nu = dir.path().join("nu.json");
    fs::write(&mu, r#"[{"x": 0.0, "v": 1.0, "mass": 1.0}]"#).unwrap();
    fs::write(&nu, r#"[{"x": 0.5, "v": 1.25, "mass": 1.0}]"#).unwrap();
    let out = lanemix(&["wasserstein", mu.to_str().unwrap(), nu.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let d: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((d - 0.75).abs() < 1e-9);

    fs::write(&nu, r#"[{"x": 50.0, "v": 1.0, "mass": 1.0}]"#).unwrap();
    let out = lanemix(&["wasserstein", mu.to_str().unwrap(), nu.to_str().unwrap()]);
    let d: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((d - 2.0).abs() < 1e-9);
    let out = lanemix(&[
        "wasserstein",
        mu.to_str().unwrap(),
        nu.to_str().unwrap(),
        "--ring",
        "50.5",
    ]);
    let d: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((d - 0.5).abs() < 1e-9);

    fs::write(&nu, "not json").unwrap();
    assert_eq!(
        lanemix(&["wasserstein", mu.to_str().unwrap(), nu.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn duplicate_timers_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("av-mixed").unwrap();
    config.initial_timers = Some(vec![0.5; config.vehicle_count()]);
    let path = dir.path().join("timers.toml");
    fs::write(&path, config.to_toml()).unwrap();
    let out = lanemix(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("initial_timers[1]"));
    let before = fs::read_to_string(&path).unwrap();
    let out_dir = dir.path().join("never");
    let run = lanemix(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(1));
    assert!(!out_dir.exists());
    assert_eq!(fs::read_to_string(&path).unwrap(), before);
}

#[test]
fn optimize_history_best_is_nonincreasing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let status = lanemix(&[
        "optimize",
        "--preset",
        "av-tracking",
        "--budget",
        "60",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(status.status.code(), Some(0));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let best: Vec<f64> = history
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("evaluation"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(best.len(), 60);
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let baselines = &manifest["baselines"];
    assert!(
        manifest["best"]["total"].as_f64().unwrap()
            < baselines["best_constant_cost"].as_f64().unwrap()
    );
}
