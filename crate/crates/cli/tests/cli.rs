//! Exit codes, diagnostics, config precedence and a small end-to-end run.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use trimodal_cli::config::{Overrides, RunConfig};
use trimodal_core::fusion::Strategy;

fn trimodal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trimodal")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small(workdir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(["--workdir", workdir.to_str().unwrap(), "--n-subjects", "80", "--image-side", "8", "--epochs", "3"]);
    trimodal(&all)
}

#[test]
fn help_exits_zero() {
    let out = trimodal(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["generate", "train", "eval", "fuse", "report", "pipeline"] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = trimodal(&["trian"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.lines().next().unwrap().starts_with("error:"));
    assert!(err.contains("trian"));
}

#[test]
fn unknown_flag_and_bad_values_are_usage_errors() {
    assert_eq!(trimodal(&["generate", "--colour"]).status.code(), Some(2));
    assert_eq!(trimodal(&["train", "--modality", "pet"]).status.code(), Some(2));
    assert_eq!(trimodal(&["fuse", "--strategy", "median"]).status.code(), Some(2));
    assert_eq!(trimodal(&[]).status.code(), Some(2));
}

#[test]
fn invalid_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "fusion": {"strategy": "median"}}"#).unwrap();
    let out = trimodal(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = trimodal(&["generate", "--image-side", "12"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let workdir = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--modality", "cognitive", "--workdir", workdir],
        vec!["eval", "--modality", "image", "--workdir", workdir],
        vec!["fuse", "--workdir", workdir],
    ] {
        let out = trimodal(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = stderr(&out);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error:"), "{err}");
    }
}

#[test]
fn flag_overrides_config_overrides_default() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"seed": 7, "dataset": {"n_subjects": 200}, "fusion": {"prior": 0.3}}"#).unwrap();

    let from_file = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
    assert_eq!(from_file.seed, 7);
    assert_eq!(from_file.dataset.n_subjects, 200);
    assert_eq!(from_file.fusion.prior, 0.3);
    assert_eq!(from_file.fusion.strategy, Strategy::Weighted);
    assert_eq!(from_file.dataset.geometry.height, 32);

    let flags = Overrides { seed: Some(9), strategy: Some(Strategy::Bayes), ..Default::default() };
    let merged = RunConfig::resolve(Some(&path), &flags).unwrap();
    assert_eq!(merged.seed, 9);
    assert_eq!(merged.fusion.strategy, Strategy::Bayes);
    assert_eq!(merged.dataset.n_subjects, 200);
    assert_eq!(merged.branch_seed(trimodal_core::modalities::Modality::Biomarker), 12);
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let cfg = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn small_pipeline_and_dropped_modality() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let out = small(wd, &["pipeline", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    for file in ["data/manifest.csv", "data/cognitive.csv", "data/biomarker.csv", "checkpoints/image.tmf"] {
        assert!(wd.join(file).exists(), "{file}");
    }
    let history = std::fs::read_to_string(wd.join("checkpoints/cognitive.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_acc\n"));
    let roc = std::fs::read_to_string(wd.join("report/roc_fused_weighted.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n"));

    let report: Value = serde_json::from_str(&std::fs::read_to_string(wd.join("report/report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    for row in rows {
        for key in ["accuracy", "precision", "recall", "f1", "auc_roc"] {
            let v = row[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{key} = {v}");
        }
    }

    let out = small(wd, &["eval", "--seed", "5", "--modality", "biomarker", "--split", "val"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = small(wd, &["fuse", "--seed", "5", "--drop-modality", "cognitive", "--strategy", "majority"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(wd.join("fusion_majority.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "subject_id,image,cognitive,biomarker,fused,label,confidence,true_label"
    );
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[2], "MISSING");
        assert!(fields[6].parse::<f64>().unwrap() < 1.0);
    }

    std::fs::remove_file(wd.join("checkpoints/biomarker.tmf")).unwrap();
    let out = small(wd, &["report", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(wd.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    for pair in report["mean_confidence"].as_array().unwrap() {
        assert!(pair[1].as_f64().unwrap() < 1.0, "{pair}");
    }
}
