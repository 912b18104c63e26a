use std::path::Path;
use std::process::{Command, Output};

fn cmwm(artifacts: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmwm"))
        .env("CMWM_ARTIFACT_DIR", artifacts)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn cm_world_model_without_concepts_names_extract_concepts() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmwm(dir.path(), &["--preset", "mini", "train-mdn", "--variant", "cm"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error kind=missing_artifact"), "{err}");
    assert!(err.contains("stage=\"extract-concepts\""), "{err}");
}

#[test]
fn usage_and_config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!cmwm(dir.path(), &["collect", "--bogus"]).status.success());
    assert!(!cmwm(dir.path(), &["train-mdn", "--variant", "xl"]).status.success());
    let o = cmwm(dir.path(), &["--set", "nosuch.key=1", "show-config"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error kind=config"));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n_runs = 0\n").unwrap();
    let o = cmwm(dir.path(), &["--config", bad.to_str().unwrap(), "collect"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn overrides_and_config_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmwm(dir.path(), &["--preset", "mini", "--set", "dream.budget_steps=2500", "show-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = cmwm::pipeline::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.dream.budget_steps, 2_500);
    let path = dir.path().join("run.toml");
    std::fs::write(&path, &text).unwrap();
    let again = cmwm(dir.path(), &["--config", path.to_str().unwrap(), "show-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn full_mini_pipeline_produces_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = dir.path().join("failure_seeds_d10");
    let seeds = seeds.to_str().unwrap();
    let stages: Vec<Vec<&str>> = vec![
        vec!["collect"],
        vec!["train-vae"],
        vec!["train-agent", "--mode", "mf"],
        vec!["extract-concepts"],
        vec!["train-mdn", "--variant", "mb"],
        vec!["train-mdn", "--variant", "cm"],
        vec!["make-failure-seeds", "--distance", "10"],
        vec!["dream-train", "--agent", "mb"],
        vec!["dream-train", "--agent", "cm"],
        vec!["dream-train", "--agent", "mb", "--failure-seeds", seeds],
        vec!["dream-train", "--agent", "cm", "--failure-seeds", seeds],
        vec!["eval", "--experiment", "unspecified"],
        vec!["eval", "--experiment", "specified"],
        vec!["report"],
    ];
    for stage in stages {
        let mut args = vec!["--preset", "mini", "--jobs", "2"];
        args.extend(&stage);
        let o = cmwm(dir.path(), &args);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    for e in ["unspecified", "specified"] {
        let csv = std::fs::read_to_string(dir.path().join("reports").join(e).join("report.csv")).unwrap();
        assert!(csv.starts_with("agent,split,distance,metric,mean,ci_low,ci_high,n\n"));
    }
    let unspecified = std::fs::read_to_string(dir.path().join("reports/unspecified/report.csv")).unwrap();
    assert_eq!(unspecified.lines().count(), 1 + 12);
    assert!(dir.path().join("run.json").exists());
}
