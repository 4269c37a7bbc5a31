use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "duration = 900\n\
                     train_duration = 900\n\
                     test_duration = 300\n\
                     hidden = 8\n\
                     epochs = 15\n\
                     samples = 20\n";

fn acr(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.cfg");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_acr"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env_remove("ACR_EPOCHS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn data_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn summary_value(stdout: &str, key: &str) -> usize {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap()
}

fn simulate(dir: &Path, sub: &str, rate: &str) -> std::path::PathBuf {
    let out = dir.join(sub);
    ok(&acr(dir, &["--seed", "3", "simulate", "--out", out.to_str().unwrap(), "--rate", rate]));
    out
}

#[test]
fn help_lists_subcommands() {
    let out = Command::new(env!("CARGO_BIN_EXE_acr")).arg("--help").output().unwrap();
    let text = ok(&out);
    for cmd in ["simulate", "train", "reconstruct", "evaluate"] {
        assert!(text.contains(cmd));
    }
}

#[test]
fn simulate_summary_matches_files() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    let stdout = ok(&acr(tmp.path(), &["simulate", "--out", out.to_str().unwrap(), "--rate", "0.5"]));
    let up = data_lines(&out.join("upstream.csv"));
    let down = data_lines(&out.join("downstream.csv"));
    let truth = data_lines(&out.join("truth.csv"));
    assert!(up > 0 && down > 0 && truth > 0);
    assert_eq!(summary_value(&stdout, "upstream records"), up);
    assert_eq!(summary_value(&stdout, "downstream records"), down);
    assert_eq!(summary_value(&stdout, "vehicles"), truth);
    let header = fs::read_to_string(out.join("truth.csv")).unwrap();
    assert!(header.starts_with("plate,up_lane,down_lane,entry_time,depart_time,merge_flag"));
}

#[test]
fn simulate_zero_duration_writes_empty_files() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    ok(&acr(tmp.path(), &["simulate", "--out", out.to_str().unwrap(), "--duration", "0"]));
    for f in ["upstream.csv", "downstream.csv", "truth.csv"] {
        assert_eq!(data_lines(&out.join(f)), 0, "{f}");
    }
}

#[test]
fn simulate_rejects_bad_rate_and_unwritable_output() {
    let tmp = TempDir::new().unwrap();
    let out = acr(tmp.path(), &["simulate", "--out", tmp.path().join("x").to_str().unwrap(), "--rate", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = acr(tmp.path(), &["simulate", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_acr"))
        .args(["--config", cfg.to_str().unwrap(), "simulate", "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_reduces_loss() {
    let tmp = TempDir::new().unwrap();
    let records = simulate(tmp.path(), "sim", "0.6");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&acr(tmp.path(), &["train", "--records", records.to_str().unwrap(), "--out", a.to_str().unwrap()]));
    ok(&acr(tmp.path(), &["train", "--records", records.to_str().unwrap(), "--out", b.to_str().unwrap()]));
    let mut models = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
        if name.to_str().unwrap().starts_with("model_") {
            models += 1;
        }
    }
    assert_eq!(models, 3);

    let trace = fs::read_to_string(a.join("loss_down_TH1.csv")).unwrap();
    let nll: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let best = nll.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best < nll[0], "validation NLL never improved: {nll:?}");
}

#[test]
fn deterministic_flag_writes_baseline_artifact() {
    let tmp = TempDir::new().unwrap();
    let records = simulate(tmp.path(), "sim", "0.6");
    let out = tmp.path().join("m");
    ok(&acr(tmp.path(), &["train", "--records", records.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic", "--dump-samples"]));
    let text = fs::read_to_string(out.join("model_down_LT.json")).unwrap();
    assert!(text.contains("\"Deterministic\""));
    let samples = fs::read_to_string(out.join("samples_down_LT.csv")).unwrap();
    assert!(samples.starts_with("lane,ds_up:LT,ds_up:TH1,ds_up:TH2,t_cycle,delta,target"));
}

#[test]
fn reconstruct_reproduces_anchors_and_plots() {
    let tmp = TempDir::new().unwrap();
    let records = simulate(tmp.path(), "sim", "1.0");
    let models = tmp.path().join("m");
    ok(&acr(tmp.path(), &["train", "--records", records.to_str().unwrap(), "--out", models.to_str().unwrap()]));
    let csv_path = tmp.path().join("recon.csv");
    let svg_path = tmp.path().join("recon.svg");
    let counts = tmp.path().join("counts.csv");
    ok(&acr(
        tmp.path(),
        &[
            "reconstruct",
            "--records",
            records.to_str().unwrap(),
            "--models",
            models.to_str().unwrap(),
            "--out",
            csv_path.to_str().unwrap(),
            "--svg",
            svg_path.to_str().unwrap(),
            "--counts",
            counts.to_str().unwrap(),
        ],
    ));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("lane,t,mean,var_total,var_epistemic,var_aleatoric,mode\n"));

    // At rate 1 every plate seen on both sides anchors the curve at its
    // downstream departure index.
    let rows = |path: &Path| -> Vec<Vec<String>> {
        fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
    };
    let up = rows(&records.join("upstream.csv"));
    let mut down: Vec<Vec<String>> = rows(&records.join("downstream.csv")).into_iter().filter(|r| r[1] == "down:LT").collect();
    down.sort_by(|a, b| a[2].parse::<f64>().unwrap().total_cmp(&b[2].parse().unwrap()));
    let recon: std::collections::HashSet<(String, String)> = text
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("down:LT,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_owned(), f[2].to_owned())
        })
        .collect();
    let mut checked = 0;
    for (i, d) in down.iter().enumerate() {
        if let Some(u) = up.iter().find(|u| u[0] == d[0] && u[3] == "true" && d[3] == "true") {
            assert!(recon.contains(&(u[2].clone(), (i + 1).to_string())), "anchor {} at {}", i + 1, u[2]);
            checked += 1;
        }
    }
    assert!(checked > 10);

    let svg = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polygon")).count(), 3);
    assert!(fs::read_to_string(&counts).unwrap().starts_with("lane,t,mean,var_total,mode\n"));

    let rt = tmp.path().join("rt.csv");
    ok(&acr(
        tmp.path(),
        &["reconstruct", "--records", records.to_str().unwrap(), "--models", models.to_str().unwrap(), "--out", rt.to_str().unwrap(), "--mode", "realtime"],
    ));
    let text = fs::read_to_string(&rt).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",realtime")));
    assert!(text.lines().count() > 100);
}

#[test]
fn reconstruct_without_models_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let records = simulate(tmp.path(), "sim", "0.5");
    let out = acr(
        tmp.path(),
        &["reconstruct", "--records", records.to_str().unwrap(), "--models", tmp.path().join("none").to_str().unwrap(), "--out", tmp.path().join("r.csv").to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_writes_one_row_per_model_and_rate() {
    let tmp = TempDir::new().unwrap();
    let report = tmp.path().join("report.csv");
    let cells = tmp.path().join("cells.csv");
    let args = [
        "--jobs",
        "2",
        "evaluate",
        "--out",
        report.to_str().unwrap(),
        "--cells",
        cells.to_str().unwrap(),
        "--rates",
        "0.4,0.8",
        "--seeds",
        "2",
        "--models",
        "bacl,lcnn,linear",
    ];
    ok(&acr(tmp.path(), &args));
    let text = fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,matching_rate,rmse_mean,rmse_std,crps_mean,crps_std,coverage,n"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for model in ["bacl", "lcnn", "linear"] {
        let rates: Vec<&str> = rows.iter().filter(|r| r[0] == model).map(|r| r[1]).collect();
        assert_eq!(rates, vec!["0.4", "0.8"], "{model}");
    }
    let first = fs::read(&report).unwrap();
    ok(&acr(tmp.path(), &args));
    assert_eq!(fs::read(&report).unwrap(), first);
}

#[test]
fn evaluate_rejects_bad_rate() {
    let tmp = TempDir::new().unwrap();
    let out = acr(tmp.path(), &["evaluate", "--out", tmp.path().join("r.csv").to_str().unwrap(), "--rates", "0.5,1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn environment_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let records = simulate(tmp.path(), "sim", "0.6");
    let out = tmp.path().join("m");
    let status = Command::new(env!("CARGO_BIN_EXE_acr"))
        .args(["train", "--records", records.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .arg("--config")
        .arg(tmp.path().join("small.cfg"))
        .env("ACR_EPOCHS", "3")
        .output()
        .unwrap();
    ok(&status);
    let trace = fs::read_to_string(out.join("loss_down_TH1.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
}
