use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use akd_lab::commands;
use akd_lab::config::CliConfig;
use akd_lab::suite;
use akd_lab::{io, LabError};

/// A config small enough for a full pipeline in a few seconds.
fn tiny_config() -> CliConfig {
    let mut cfg = CliConfig::default();
    cfg.dataset.n_train = 64;
    cfg.dataset.n_test = 32;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.network.teacher_width = 4;
    cfg.network.student_width = 2;
    cfg.distill.k = 3;
    cfg.ensemble.k = vec![1, 3];
    cfg.ensemble.seeds = 3;
    cfg
}

fn write_config(dir: &Path, cfg: &CliConfig) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn akd(args: &[&str]) -> Result<(), LabError> {
    commands::run(std::iter::once("akd").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, name: &str) -> PathBuf {
    let cfg = write_config(dir, &tiny_config());
    let out = dir.join(name);
    akd(&["train-teacher", "--config", s(&cfg), "--out", s(&out), "--seed", "1"]).unwrap();
    out
}

#[test]
fn train_teacher_writes_weights_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "teacher.json");
    for f in ["teacher.json", "teacher.metrics.json", "teacher.config.json", "teacher.trace.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let echoed = CliConfig::load(&dir.path().join("teacher.config.json")).unwrap();
    assert_eq!(echoed.train.teacher_seed, 1);
    let again = train(dir.path(), "again.json");
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
    assert_eq!(
        fs::read(dir.path().join("teacher.metrics.json")).unwrap(),
        fs::read(dir.path().join("again.metrics.json")).unwrap()
    );
}

#[test]
fn distill_outputs_and_degeneracies() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = train(dir.path(), "t.json");
    let t = s(&teacher);
    let cfg = write_config(dir.path(), &tiny_config());
    let run = |name: &str, extra: &[&str]| -> PathBuf {
        let out = dir.path().join(name);
        let mut args = vec!["distill", "--teacher", t, "--config", s(&cfg), "--seed", "2", "--out", s(&out)];
        args.extend_from_slice(extra);
        let args: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        commands::run(std::iter::once("akd".to_string()).chain(args)).unwrap();
        out
    };
    let channel = run("channel", &["--mode", "akd", "--merge", "channel"]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(channel.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["sigma_shape"], serde_json::json!([4, 1, 1]));
    let sigma: serde_json::Value = serde_json::from_str(&fs::read_to_string(channel.join("sigma.json")).unwrap()).unwrap();
    assert_eq!(sigma["mode"], "channel");
    assert_eq!(sigma["shape"], serde_json::json!([4, 1, 1]));
    for f in ["config.json", "trace.csv", "steps.csv", "timing.json"] {
        assert!(channel.join(f).is_file(), "{f}");
    }
    let trace = fs::read_to_string(channel.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "epoch,task_loss,distill_loss");
    assert_eq!(trace.lines().count(), 3);

    let rerun = run("channel2", &["--mode", "akd", "--merge", "channel"]);
    for f in ["metrics.json", "trace.csv", "steps.csv", "sigma.json", "config.json"] {
        assert_eq!(fs::read(channel.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap(), "{f}");
    }

    let baseline = run("baseline", &["--mode", "baseline"]);
    let zero = run("zero", &["--mode", "avatars", "--m", "0"]);
    for f in ["metrics.json", "trace.csv", "steps.csv"] {
        assert_eq!(fs::read(baseline.join(f)).unwrap(), fs::read(zero.join(f)).unwrap(), "{f}");
    }

    let steps = |dir: &Path| -> Vec<f64> {
        let mut r = csv::Reader::from_path(dir.join("steps.csv")).unwrap();
        r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect()
    };
    for loss in ["mse", "kl"] {
        let fixed = run(&format!("fixed-{loss}"), &["--mode", "avatars", "--loss", loss]);
        let scalar = run(&format!("scalar-{loss}"), &["--mode", "akd", "--merge", "scalar", "--loss", loss]);
        let (a, b) = (steps(&fixed), steps(&scalar));
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9, "{loss}: {x} vs {y}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = s(&out);
    let missing = akd(&["distill", "--teacher", "/nonexistent.json", "--out", o]).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    assert!(missing.to_string().contains("/nonexistent.json"));

    let teacher = train(dir.path(), "t.json");
    let t = s(&teacher);
    for bad in [
        vec!["--mode", "baseline", "--k", "3"],
        vec!["--mode", "baseline", "--m", "0.2"],
        vec!["--mode", "baseline", "--merge", "channel"],
        vec!["--mode", "avatars", "--merge", "channel"],
        vec!["--mode", "teacher"],
        vec!["--mode", "akd", "--merge", "diagonal"],
        vec!["--mode", "akd", "--m", "1.0"],
        vec!["--mode", "akd", "--k", "0"],
    ] {
        let mut args = vec!["distill", "--teacher", t, "--out", o];
        args.extend(bad.iter().copied());
        let e = akd(&args).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad:?}: {e}");
    }
    assert_eq!(akd(&["distill"]).unwrap_err().exit_code(), 2);
    assert_eq!(akd(&["nonsense"]).unwrap_err().exit_code(), 2);
    assert!(akd(&["--help"]).is_ok());

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 2, "warmup": 1}}"#).unwrap();
    let e = akd(&["train-teacher", "--config", s(&cfg), "--out", o]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("warmup"));
    assert_eq!(akd(&["report", "--dir", "/nonexistent"]).unwrap_err().exit_code(), 2);
}

#[test]
fn binary_reports_exit_codes_and_names_the_key() {
    let bin = env!("CARGO_BIN_EXE_akd");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"dataset": {"n_train": 64, "colour": "red"}}"#).unwrap();
    let out = Command::new(bin)
        .args(["train-teacher", "--config", s(&cfg), "--out", s(&dir.path().join("t.json"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = Command::new(bin)
        .args(["distill", "--teacher", "/nonexistent.json", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn ablation_rows_summary_and_parallel_equals_serial() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.ablation.seeds = 2;
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("ablate");
    akd(&["ablate", "--config", s(&cfg_path), "--out", s(&out)]).unwrap();
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "suite,seed,mode,loss_kind,merge_mode,k,m,student_acc,teacher_acc,final_distill_loss"
    );
    assert_eq!(lines.count(), 2 * 7);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["sign_test_p"]["akd_vs_baseline"].is_number());
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3 + 4);
    assert_eq!(summary["format_version"], 1);

    let (teacher, _) = suite::build_teacher(&cfg, cfg.train.teacher_seed).unwrap();
    let seeds = [0, 1];
    let serial = suite::ablation(&cfg, &teacher, &seeds, 1).unwrap();
    let parallel = suite::ablation(&cfg, &teacher, &seeds, 3).unwrap();
    assert_eq!(serial, parallel);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    io::write_csv(&a, &serial.rows).unwrap();
    io::write_csv(&b, &parallel.rows).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(out.join("results.csv")).unwrap());

    let rerun = dir.path().join("ablate2");
    akd(&["ablate", "--config", s(&cfg_path), "--out", s(&rerun)]).unwrap();
    for f in ["results.csv", "summary.json", "config.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ensemble_eval_curve_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = train(dir.path(), "t.json");
    let out = dir.path().join("ens");
    akd(&["ensemble-eval", "--teacher", s(&teacher), "--k", "1,3,5", "--m", "0", "--seeds", "2", "--out", s(&out)]).unwrap();
    let mut r = csv::Reader::from_path(out.join("curve.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(&headers[0], "k");
    assert_eq!(&headers[1], "mean_single");
    assert_eq!(&headers[2], "mean_ensemble");
    assert_eq!(&headers[3], "std");
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    // m = 0: every avatar is the teacher feature
    for row in &rows {
        assert_eq!(row[1], row[2]);
    }
    let again = dir.path().join("ens2");
    akd(&["ensemble-eval", "--teacher", s(&teacher), "--k", "1,3,5", "--m", "0", "--seeds", "2", "--out", s(&again)]).unwrap();
    assert_eq!(fs::read(out.join("curve.csv")).unwrap(), fs::read(again.join("curve.csv")).unwrap());
    akd(&["report", "--dir", s(&out)]).unwrap();
    assert_eq!(
        akd(&["ensemble-eval", "--teacher", s(&teacher), "--k", "0", "--out", s(&out)]).unwrap_err().exit_code(),
        2
    );
}

#[test]
fn verify_passes_and_writes_its_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    akd(&["verify", "--out", s(&out)]).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for n in ["gradients_autodiff", "ratio_law_mse", "residual_moment", "analytic_min", "welford_two_pass", "zero_mean"] {
        assert!(names.contains(&n), "{n}");
    }
    let mut r = csv::Reader::from_path(out.join("ratios.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["sigma", "ratio_mse", "ratio_kl"]);
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let (sigma, ratio): (f64, f64) = (rec[0].parse().unwrap(), rec[1].parse().unwrap());
        assert!((ratio - 1.0 / (sigma * sigma)).abs() <= 1e-12);
        n += 1;
    }
    assert!(n > 0);
    let grad: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("grad_report.json")).unwrap()).unwrap();
    assert_eq!(grad["trials"], 100);
    akd(&["report", "--dir", s(&out)]).unwrap();

    let again = dir.path().join("v2");
    akd(&["verify", "--out", s(&again)]).unwrap();
    for f in ["verify.json", "grad_report.json", "ratios.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}
