use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SINGLE: &str =
    r#"{"classes":["a"],"mu":[1],"adjacency":[[1]],"p0":0.0625,"L":100,"Lc":100,"policy":"exponential"}"#;
const CHAIN: &str = r#"{"classes":["1","2","3"],"mu":[0.25,0.5,0.25],"adjacency":[[1,1,0],[1,1,1],[0,1,1]],"p0":0.0625,"L":100,"policy":"exponential"}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn csma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csma-mf")).args(args).output().unwrap()
}

fn with_config(cfg: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--quiet", "--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    csma(&all)
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn stationary_single_class_matches_closed_form_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "single.json", SINGLE);
    let doc = json(&with_config(&cfg, &["stationary"]));
    let cf = json(&with_config(&cfg, &["stationary", "--closed-form"]));
    let rho = doc["rho"][0].as_f64().unwrap();
    assert!((rho - cf["rho"].as_f64().unwrap()).abs() < 1e-11);
    assert_eq!(doc["converged"], Value::Bool(true));
    for key in ["rho", "G", "H", "I", "gamma", "Q", "residual", "iterations"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn stationary_chain_reports_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let doc = json(&with_config(&cfg, &["stationary"]));
    let per_user = doc["gamma_per_user"].as_array().unwrap();
    let expected = per_user[0].as_f64().unwrap() / per_user[1].as_f64().unwrap();
    assert!((doc["ratio"].as_f64().unwrap() - expected).abs() < 1e-9);
    assert_eq!(doc["gamma"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", &SINGLE.replace("\"mu\":[1]", "\"mu\":[0.9]"));
    assert_eq!(with_config(&bad, &["stationary"]).status.code(), Some(1));

    let unknown = write(
        dir.path(),
        "unknown.json",
        &SINGLE.replace("\"L\":100,", "\"L\":100,\"extra\":1,"),
    );
    assert_eq!(with_config(&unknown, &["check"]).status.code(), Some(1));

    assert_eq!(
        csma(&["--config", "/nonexistent/x.json", "stationary"]).status.code(),
        Some(1)
    );

    let hot = write(dir.path(), "hot.json", &SINGLE.replace("0.0625", "0.8"));
    let out = with_config(&hot, &["stationary", "--closed-form"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ln 2"));

    let cfg = write(dir.path(), "single.json", SINGLE);
    let out = with_config(&cfg, &["stationary", "--max-iter", "2", "--probes", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = with_config(&cfg, &["sweep", "--param", "p0", "--grid", ""]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn quiet_silences_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "single.json", SINGLE);
    let out = with_config(&cfg, &["stationary"]);
    assert!(out.stderr.is_empty());
    let loud = csma(&["--config", cfg.to_str().unwrap(), "stationary"]);
    assert!(!loud.stderr.is_empty());
}

#[test]
fn out_flag_writes_file_and_csv_format_is_long_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let dest = dir.path().join("fp.csv");
    let out = with_config(
        &cfg,
        &["--out", dest.to_str().unwrap(), "--format", "csv", "stationary"],
    );
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(&dest).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,key,level,value"));
    assert!(text.lines().any(|l| l.starts_with("2,gamma,,")));
}

#[test]
fn numbers_carry_at_most_twelve_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let out = with_config(&cfg, &["--format", "csv", "stationary"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines().skip(1) {
        let value = line.rsplit(',').next().unwrap();
        let mantissa = value.split(['e', 'E']).next().unwrap();
        let digits = mantissa.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        let significant = digits.trim_start_matches('0');
        assert!(significant.len() <= 12, "{value}");
    }
}

#[test]
fn ode_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "single.json", SINGLE);
    let summary = dir.path().join("summary.csv");
    let out = with_config(
        &cfg,
        &[
            "ode",
            "--T",
            "20",
            "--dt",
            "0.5",
            "--summary",
            summary.to_str().unwrap(),
        ],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("t,class,level,mass"));
    assert!(fs::read_to_string(summary).unwrap().starts_with("t,class,rho"));

    let doc = json(&with_config(
        &cfg,
        &["--format", "json", "ode", "--T", "20", "--init", "fixedpoint"],
    ));
    assert!(doc["tv_to_fixed_point"].as_f64().unwrap() < 1e-9);

    let init = write(dir.path(), "init.json", "[[0.5, 0.5]]");
    let out = with_config(&cfg, &["ode", "--T", "5", "--init", init.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_echoes_seed_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "single.json", SINGLE);
    let doc = json(&with_config(
        &cfg,
        &["simulate", "--N", "40", "--T", "30", "--seed", "11", "--compare"],
    ));
    assert_eq!(doc["seed"].as_u64(), Some(11));
    assert!(doc["compare"]["delta"].is_array());

    let trace = dir.path().join("trace.csv");
    let out = with_config(
        &cfg,
        &[
            "--format",
            "csv",
            "simulate",
            "--N",
            "20",
            "--T",
            "10",
            "--trace",
            trace.to_str().unwrap(),
            "--trace-stride",
            "5",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("7,a,"));
    assert!(fs::read_to_string(trace).unwrap().lines().count() > 2);
}

#[test]
fn sweep_writes_gnuplot_script_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let csv_path = dir.path().join("sweep.csv");
    let plot = dir.path().join("sweep.gp");
    let out = with_config(
        &cfg,
        &[
            "--out",
            csv_path.to_str().unwrap(),
            "sweep",
            "--param",
            "L",
            "--grid",
            "10,50",
            "--gnuplot",
            plot.to_str().unwrap(),
        ],
    );
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&csv_path).unwrap().lines().count(), 1 + 2 * 3);
    assert!(fs::read_to_string(&plot).unwrap().contains("sweep.csv"));

    let doc = json(&with_config(
        &cfg,
        &["--format", "json", "sweep", "--param", "p0", "--grid", "0.03:0.06:2"],
    ));
    let rows = doc.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["status"] == "ok"));
}

#[test]
fn check_reports_domination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let doc = json(&with_config(&cfg, &["check"]));
    assert_eq!(doc["valid"], Value::Bool(true));
    assert_eq!(doc["domination"]["passed"], Value::Bool(true));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let args = [
        "--quiet",
        "--config",
        cfg.to_str().unwrap(),
        "sweep",
        "--param",
        "mu2",
        "--grid",
        "0.2:0.8:4",
    ];
    let one = Command::new(env!("CARGO_BIN_EXE_csma-mf"))
        .args(args)
        .env("CSMA_MF_THREADS", "1")
        .output()
        .unwrap();
    let four = Command::new(env!("CARGO_BIN_EXE_csma-mf"))
        .args(args)
        .env("CSMA_MF_THREADS", "4")
        .output()
        .unwrap();
    assert!(one.status.success());
    assert_eq!(one.stdout, four.stdout);
}
