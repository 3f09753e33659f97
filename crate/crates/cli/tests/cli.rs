use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn odis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odis")).args(args).output().unwrap()
}

fn config(dir: &Path) -> PathBuf {
    let f = fixtures();
    let text = format!(
        "[data]\ntables = {:?}\ndatabase_dir = {:?}\ntest = {:?}\noutput_dir = {:?}\n",
        f.join("tables.json"),
        f.join("database"),
        f.join("dev.json"),
        dir.join("out"),
    );
    let path = dir.join("odis.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = odis(&["--config", "/nonexistent/odis.toml", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn unknown_flag_and_unknown_mode_exit_1() {
    assert_eq!(odis(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(odis(&["--mode", "everything", "run"]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = odis(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("render-prompt"));
}

#[test]
fn id_mode_without_synthetic_pool_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = odis(&["--config", cfg.to_str().unwrap(), "--mode", "id_only", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synthesize"));
}

#[test]
fn zero_shot_run_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = odis(&["--config", cfg, "--mode", "zero_shot", "run"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    let ex_line = stdout.lines().find(|l| l.starts_with("EX: ")).unwrap().to_string();

    let predictions = dir.path().join("out/predictions.jsonl");
    let eval = odis(&["--config", cfg, "evaluate", "--predictions", predictions.to_str().unwrap()]);
    assert!(eval.status.success());
    assert_eq!(String::from_utf8_lossy(&eval.stdout).trim(), ex_line);
}

#[test]
fn render_prompt_prints_the_zero_shot_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = odis(&["--config", cfg.to_str().unwrap(), "--mode", "zero_shot", "render-prompt", "--index", "0"]);
    assert!(out.status.success());
    let golden = std::fs::read_to_string(fixtures().join("prompts/zero_shot.txt")).unwrap();
    let golden = golden.replace("Which year has most number of concerts?", "How many singers are there?");
    assert_eq!(String::from_utf8_lossy(&out.stdout), golden + "\n");
}
