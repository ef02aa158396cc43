use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pref-forge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn world(dir: &Path) {
    json_ok(
        dir,
        &["--seed", "5", "toy", "gen-world", "--samples", "120", "--pairs", "150", "--out", "w.jsonl"],
    );
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(tmp.path(), &["eval", "accuracy"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(tmp.path(), &["eval", "accuracy", "--pairs", "missing.jsonl", "--scorer", "oracle"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("missing.jsonl"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[train]\nstepz = 3\n").unwrap();
    let out = cli(tmp.path(), &["--config", "c.toml", "toy", "gen-world", "--out", "w.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));
}

#[test]
fn world_is_deterministic_and_oracle_is_perfect() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    world(a.path());
    world(b.path());
    for name in ["w.jsonl", "w.heldout.jsonl", "w.samples.jsonl", "w.contexts.jsonl", "w.inputs.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
    let report = json_ok(
        a.path(),
        &["eval", "accuracy", "--pairs", "w.heldout.jsonl", "--scorer", "oracle", "--samples", "w.samples.jsonl", "--csv", "rows.csv"],
    );
    assert_eq!(report["accuracy"], 1.0);
    let rows = std::fs::read_to_string(a.path().join("rows.csv")).unwrap();
    assert!(rows.starts_with("index,winner,loser,label,winner_score,loser_score,credit"));
}

#[test]
fn grpo_run_improves_reward_and_exports_series() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    world(dir);
    std::fs::write(dir.join("c.toml"), "[train]\nsteps = 60\neval_every = 10\n").unwrap();
    let report = json_ok(dir, &["--config", "c.toml", "grpo", "train", "--contexts", "w.contexts.jsonl", "--out", "g"]);
    assert!(report["final_eval_reward"].as_f64().unwrap() > report["initial_eval_reward"].as_f64().unwrap());
    let series = json_ok(dir, &["metrics", "series", "--run", "g"]);
    let rows = series.as_array().unwrap();
    assert_eq!(rows.len(), 61);
    assert!(rows[10]["eval_reward"].is_number() && rows[11]["eval_reward"].is_null());
    assert!(cli(dir, &["metrics", "series", "--run", "g", "--csv", "s.csv"]).status.success());
    let csv = std::fs::read_to_string(dir.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 62);
}

#[test]
fn external_reward_without_command_fails() {
    let tmp = tempfile::tempdir().unwrap();
    world(tmp.path());
    let out = cli(
        tmp.path(),
        &["grpo", "train", "--contexts", "w.contexts.jsonl", "--reward", "external-cmd", "--out", "g"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn split_keeps_requested_share() {
    let tmp = tempfile::tempdir().unwrap();
    world(tmp.path());
    let r = json_ok(
        tmp.path(),
        &["pipeline", "split", "--in", "w.inputs.jsonl", "--mode", "random", "--ratio", "0.5", "--out", "half.jsonl"],
    );
    assert_eq!(r["total"], 8);
    assert_eq!(r["kept"], 4);
    let hard = json_ok(
        tmp.path(),
        &["pipeline", "split", "--in", "w.inputs.jsonl", "--mode", "hard", "--ratio", "1.0", "--filter", "stub", "--out", "hard.jsonl"],
    );
    assert!(hard["kept"].as_u64().unwrap() < 8);
}

#[test]
fn parallelism_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    world(dir);
    std::fs::write(dir.join("c.toml"), "[train]\nsteps = 5\n").unwrap();
    let base = ["--config", "c.toml", "gcpo", "train", "--pairs", "w.jsonl", "--samples", "w.samples.jsonl", "--heldout", "w.heldout.jsonl"];
    let mut seq = base.to_vec();
    seq.extend(["--parallelism", "1", "--out", "seq"]);
    let mut par = base.to_vec();
    par.extend(["--parallelism", "4", "--out", "par"]);
    json_ok(dir, &seq);
    json_ok(dir, &par);
    for file in ["params.json", "metrics.jsonl"] {
        assert_eq!(
            std::fs::read(dir.join("seq").join(file)).unwrap(),
            std::fs::read(dir.join("par").join(file)).unwrap()
        );
    }
}
