use std::path::Path;
use std::process::{Command, Output};

fn kilosound(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_kilosound")).args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "kilosound {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["pretrain", "distill", "finetune", "eval", "gridsearch", "bench", "monitor", "export"] {
        let help = String::from_utf8(kilosound(&[cmd, "--help"], dir.path()).stdout).unwrap();
        for flag in ["--seed", "--config", "--checkpoint", "--out"] {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn finetune_eval_export_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("ft.json"), r#"{"epochs": 3}"#).unwrap();
    kilosound(&["finetune", "--seed", "1", "--config", "ft.json", "--per-mode", "2", "--out", "model.lstn"], d);
    kilosound(&["eval", "--checkpoint", "model.lstn", "--per-mode", "2", "--out", "report.json"], d);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["averaging"], "macro");
    assert_eq!(report["per_class"].as_array().unwrap().len(), 10);

    let export = kilosound(&["export", "--checkpoint", "model.lstn", "--out", "deploy.lstn"], d);
    assert!(d.join("deploy.lstn").exists());
    assert!(!export.stdout.is_empty() || !export.stderr.is_empty());

    let bench = kilosound(&["bench", "--checkpoint", "deploy.lstn", "--clips", "5", "--csv", "lat.csv"], d);
    let stats: serde_json::Value = serde_json::from_slice(&bench.stdout).unwrap();
    assert_eq!(stats["count"], 5);
    let csv = std::fs::read_to_string(d.join("lat.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn malformed_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kilosound"))
        .args(["finetune", "--config", "bad.json", "--out", "m.lstn"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
