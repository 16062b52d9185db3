use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracflock"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_1D: &str = r#"{"preset":"example1","particles":256,"subdomains":32,"cells":[64],"sample_times":[0.5,1.0]}"#;

#[test]
fn simulate_agents_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_1D);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["simulate-agents", "--config", &cfg, "--alpha", "0.5", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("max drift"));
    }
    for f in ["snapshot_000.csv", "snapshot_001.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ra = json(a.join("run.json"));
    assert_eq!(ra["command"], "simulate-agents");
    assert_eq!(ra["config_hash"], json(b.join("run.json"))["config_hash"]);
    assert_eq!(ra["status"], "ok");
}

#[test]
fn preset_writes_sixteen_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset":"example1","particles":128,"subdomains":16,"agent_dt":0.01}"#,
    );
    let out = tmp.path().join("o");
    let o = run(&["simulate-agents", "--config", &cfg, "--alpha", "0.5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(out.join("manifest.json"));
    assert_eq!(m["sample_times"].as_array().unwrap().len(), 16);
    assert!(out.join("snapshot_015.csv").exists());
}

#[test]
fn invalid_alpha_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["simulate-agents", "--preset", "example1", "--alpha", "2.5", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha") && err.contains("(0, 2)"), "{err}");
    let o = run(&["solve-euler", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_euler_conserves_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset":"example1","sample_times":[0.5,1.0,2.0]}"#);
    let out = tmp.path().join("e");
    let o = run(&["solve-euler", "--config", &cfg, "--alpha", "1.2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(out.join("manifest.json"));
    assert_eq!(m["K"], 256);
    assert_eq!(m["times"].as_array().unwrap().len(), 4);
    let c = &m["conservation"];
    assert!(c["mass_drift"].as_f64().unwrap() <= 1e-12);
    assert!(c["momentum_drift"][0].as_f64().unwrap() <= 1e-12);
    assert!(String::from_utf8_lossy(&o.stdout).contains("momentum_x"));
}

#[test]
fn large_fixed_step_surfaces_cfl_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset":"example1","cells":[64],"sample_times":[0.1],
            "euler":{"cfl":0.3,"u_floor":1e-8,"stiff_factor":0.5,"dt":0.02,"max_steps":1000}}"#,
    );
    let out = tmp.path().join("e");
    let o = run(&["solve-euler", "--config", &cfg, "--alpha", "0.5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Courant"));
    let w = json(out.join("manifest.json"))["warnings"].clone();
    assert!(!w.as_array().unwrap().is_empty());
}

#[test]
fn two_dimensional_solve_writes_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset":"example2","cells":[16,16],"particles":256,"subdomains":8,"sample_times":[0.5]}"#,
    );
    let out = tmp.path().join("e");
    let o = run(&["solve-euler", "--config", &cfg, "--alpha", "0.5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rho_001.csv", "u_001.csv", "v_001.csv", "field_001.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(out.join("rho_001.csv")).unwrap();
    assert_eq!(text.lines().count(), 17);
    assert!(text.starts_with("y\\x,"));
}

#[test]
fn compare_against_itself_and_agents() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_1D);
    let (ag, eu) = (tmp.path().join("ag"), tmp.path().join("eu"));
    assert!(run(&["simulate-agents", "--config", &cfg, "--alpha", "0.5", "--out", s(&ag)]).status.success());
    assert!(run(&["solve-euler", "--config", &cfg, "--alpha", "0.5", "--out", s(&eu)]).status.success());

    let same = tmp.path().join("same");
    let o = run(&["compare", s(&eu), s(&eu), "--out", s(&same)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(same.join("summary.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(rec[2].parse::<f64>().unwrap(), 0.0);
    }

    let cmp = tmp.path().join("cmp");
    let o = run(&["compare", s(&ag), s(&eu), "--out", s(&cmp)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(cmp.join("overlay_001.csv").exists());
    let mut r = csv::Reader::from_path(cmp.join("overlay_000.csv")).unwrap();
    let mass: f64 = r.records().map(|x| x.unwrap()[1].parse::<f64>().unwrap()).sum::<f64>() * (1.5 / 8.0);
    assert!((mass - 1.0).abs() <= 1e-12, "{mass}");
}

#[test]
fn compare_time_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.json", SMALL_1D);
    let b = write_config(tmp.path(), "b.json", r#"{"preset":"example1","cells":[64],"sample_times":[0.3]}"#);
    let (ag, eu) = (tmp.path().join("ag"), tmp.path().join("eu"));
    assert!(run(&["simulate-agents", "--config", &a, "--alpha", "0.5", "--out", s(&ag)]).status.success());
    assert!(run(&["solve-euler", "--config", &b, "--alpha", "0.5", "--out", s(&eu)]).status.success());
    let o = run(&["compare", s(&ag), s(&eu), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

#[test]
fn learn_dry_run_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "l.json",
        r#"{"preset":"example1","particles":256,"subdomains":32,"cells":[64],
            "sample_times":[0.5,1.0],"bo":{"max_iterations":6}}"#,
    );
    let dry = tmp.path().join("dry");
    let o = run(&["learn", "--config", &cfg, "--dry-run", "--out", s(&dry)]);
    assert!(o.status.success());
    assert!(!dry.exists());
    let o = run(&["learn", "--config", &cfg, "--dry-run", "--alpha", "0", "--out", s(&dry)]);
    assert_eq!(o.status.code(), Some(2));

    let first = tmp.path().join("first");
    let o = run(&["learn", "--config", &cfg, "--alpha", "0.8", "--euler-reference", "--out", s(&first)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(first.join("report.json"));
    assert_eq!(report["given_alpha"], 0.8);
    let learned = report["learned_alpha"].as_f64().unwrap();
    assert!((0.1..=1.9).contains(&learned));
    assert!(report["output_F"].as_f64().unwrap() >= 0.0);
    assert!(first.join("reference/manifest.json").exists());

    let second = tmp.path().join("second");
    let o = run(&[
        "learn",
        "--config",
        &cfg,
        "--alpha",
        "0.8",
        "--euler-reference",
        "--resume",
        s(&first.join("model.json")),
        "--out",
        s(&second),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let h = std::fs::read_to_string(second.join("history.csv")).unwrap();
    let prior = json(first.join("model.json"))["inputs"].as_array().unwrap().len();
    assert!(h.lines().count() > prior);
}

#[test]
fn learn_reuses_an_agent_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "l.json",
        r#"{"preset":"example1","particles":256,"subdomains":32,"cells":[64],
            "sample_times":[0.5,1.0],"bo":{"max_iterations":4}}"#,
    );
    let ag = tmp.path().join("ag");
    assert!(run(&["simulate-agents", "--config", &cfg, "--alpha", "0.7", "--out", s(&ag)]).status.success());

    let out = tmp.path().join("l");
    let o = run(&["learn", "--config", &cfg, "--reference", s(&ag), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(out.join("report.json"))["given_alpha"], 0.7);
    assert_eq!(
        std::fs::read(ag.join("snapshot_001.csv")).unwrap(),
        std::fs::read(out.join("reference/snapshot_001.csv")).unwrap()
    );

    let other = write_config(tmp.path(), "o.json", r#"{"preset":"example1","cells":[64],"sample_times":[0.5]}"#);
    let o = run(&["learn", "--config", &other, "--reference", s(&ag), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}
