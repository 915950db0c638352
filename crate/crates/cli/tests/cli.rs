use std::path::Path;
use std::process::{Command, Output};

fn lirex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lirex"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LIREX_CACHE_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run lirex")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn setup(dir: &Path) {
    let out = lirex(&["synth", "--out", "data", "--seed", "3", "-n", "60"], dir);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = lirex(&["init-config", "--data-dir", "data", "--cache-dir", "cache"], dir);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(dir.join("lirex.toml").is_file());
}

#[test]
fn help_lists_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = lirex(&["--help"], dir.path());
    let help = text(&out.stdout);
    for stage in [
        "prepare",
        "train-rationalizer",
        "train-generator",
        "generate",
        "train-selector",
        "select",
        "train-inference",
        "evaluate",
        "probe",
        "human-eval",
    ] {
        assert!(help.contains(stage), "{stage} missing from\n{help}");
    }
}

#[test]
fn missing_upstream_exits_nonzero_with_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = lirex(&["generate", "--config", "lirex.toml"], dir.path());
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("generate") && err.contains("train_rationalizer"), "{err}");
}

#[test]
fn prepare_then_dry_run_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = lirex(&["prepare", "--config", "lirex.toml", "--json"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let line = text(&out.stdout);
    let report: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(report["name"], "prepare");
    assert!(dir.path().join("cache/manifest.json").is_file());

    let out = lirex(
        &["train-inference", "-c", "lirex.toml", "--dry-run", "--seed", "9", "--mode", "expl", "--strategy", "max"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let plan = text(&out.stdout);
    assert!(plan.contains("mode       expl  strategy max  seed 9"), "{plan}");
    assert!(plan.contains("upstream   select: missing"), "{plan}");
}

#[test]
fn cache_dir_environment_override() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let other = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_lirex"))
        .args(["prepare", "--config", "lirex.toml"])
        .current_dir(dir.path())
        .env("LIREX_CACHE_DIR", &other)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(other.join("manifest.json").is_file());
    assert!(!dir.path().join("cache/manifest.json").exists());
}

#[test]
fn invalid_flags_and_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = lirex(&["prepare", "--config", "lirex.toml", "--mode", "sideways"], dir.path());
    assert!(!out.status.success());

    std::fs::write(dir.path().join("bad.toml"), "seed = 1\n[paths]\ntrain = 'nope.csv'\ndev = 'nope.csv'\ntest = 'nope.csv'\n").unwrap();
    let out = lirex(&["prepare", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("[prepare]") && err.contains("does not exist"), "{err}");
}

#[test]
fn full_scale_config_dry_runs() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = lirex(&["init-config", "--data-dir", "data", "--full-scale", "-o", "full.toml"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = lirex(&["run-all", "-c", "full.toml", "--dry-run"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let plan = text(&out.stdout);
    assert!(plan.contains("roberta-base") && plan.contains("cannot be executed"), "{plan}");
}
