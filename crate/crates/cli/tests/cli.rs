use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenario_loop::sim::Trace;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn cli(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scenario-loop"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("SCENARIO_LOOP_") || k.starts_with("LLM_") {
            cmd.env_remove(k);
        }
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn dsl_check_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let good = repo("fixtures/listings/right_turn_v1.scenic");
    let out = cli(dir.path(), &["dsl", "check", good.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert_eq!(stdout(&out), "");

    let bad = dir.path().join("bad.scenic");
    fs::write(&bad, fs::read_to_string(&good).unwrap().replace("do FollowTrajectoryBehavior(", "do FolowTrajectory(")).unwrap();
    let out = cli(dir.path(), &["dsl", "check", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("UnknownBehavior: "), "{}", stdout(&out));
}

#[test]
fn sample_and_sim_write_records() {
    let dir = tempfile::tempdir().unwrap();
    let file = repo("fixtures/listings/right_turn_v1.scenic");
    let out = cli(dir.path(), &["sample", file.to_str().unwrap(), "--map", "town_cross4", "--seed", "4", "--count", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let seeds: Vec<u64> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![4, 5, 6]);

    let out = cli(dir.path(), &["sim", file.to_str().unwrap(), "--seed", "0", "--out", "t.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = Trace::from_jsonl(&fs::read_to_string(dir.path().join("t.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.agents.len(), 2);
    assert!(stderr(&out).contains("ended by"));
}

fn write_script(dir: &Path) -> PathBuf {
    let v1 = fs::read_to_string(repo("fixtures/listings/right_turn_v1.scenic")).unwrap();
    let v2 = fs::read_to_string(repo("fixtures/listings/right_turn_v2.scenic")).unwrap();
    let path = dir.join("right_turn.script");
    fs::write(&path, format!("```scenic\n{v1}```\n---\n```scenic\n{v2}```\n")).unwrap();
    path
}

#[test]
fn session_round_trip_through_separate_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path());
    let backend = format!("scripted:{}", script.display());
    let description = "Ego vehicle makes a right turn at 4-way intersection while adversary vehicle from lateral lane goes straight.";
    let out = cli(dir.path(), &["session", "new", "--id", "rt", "--description", description, "--backend", &backend, "--seeds", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("session rt (awaiting_user)\nturn 1: 1 queries\n"), "{}", stdout(&out));

    let out = cli(dir.path(), &["session", "comment", "rt", "Use a higher safety distance", "--backend", &backend]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("turn 2 after \"Use a higher safety distance\": 1 queries"), "{}", stdout(&out));
    let code = fs::read_to_string(dir.path().join("sessions/rt/turns/2/code.scenic")).unwrap();
    assert!(code.contains("VerifaiRange(15, 25)"));

    let out = cli(dir.path(), &["session", "accept", "rt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["success_turn"], 2);
    assert_eq!(summary["seeds"], serde_json::json!([0, 1]));

    let out = cli(dir.path(), &["session", "show", "rt", "--json"]);
    let session: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(session["state"], "succeeded");
    let out = cli(dir.path(), &["session", "comment", "rt", "again", "--backend", &backend]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cannot comment on a session in state succeeded"), "{}", stderr(&out));
}

#[test]
fn environment_overrides_flags_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path());
    fs::write(dir.path().join("scenario-loop.toml"), "seeds = 3\nsessions_dir = \"from-file\"\n").unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scenario-loop"));
    let out = cmd
        .current_dir(dir.path())
        .args(["session", "new", "--id", "x", "--description", "A car turns right.", "--seeds", "2"])
        .args(["--backend", &format!("scripted:{}", script.display())])
        .env("SCENARIO_LOOP_SEEDS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let session: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from-file/x/session.json")).unwrap()).unwrap();
    assert_eq!(session["config"]["seeds"], 1);
    assert_eq!(session["turns"][0]["seeds"], serde_json::json!([0]));
}

#[test]
fn credentials_in_config_files_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario-loop.toml"), "[llm]\napi_key = \"sk-nope\"\n").unwrap();
    let out = cli(dir.path(), &["session", "show", "x"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("llm.api_key"), "{}", stderr(&out));
    assert!(!stderr(&out).contains("sk-nope"));
}

#[test]
fn eval_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = repo("fixtures/eval");
    let backend = format!("scripted-dir:{}", repo("fixtures/eval/scripts").display());
    for run in ["a", "b"] {
        let out = cli(
            dir.path(),
            &["eval", "run", "--corpus", corpus.to_str().unwrap(), "--backend", &backend, "--out", run, "--workers", "3"],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).starts_with("8/16 scenarios succeeded"), "{}", stdout(&out));
    }
    for f in ["cdf.csv", "scenarios.csv", "summary.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let out = cli(dir.path(), &["eval", "report", "--records", "a/records.json", "--out", "again"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(dir.path().join("a/cdf.csv")).unwrap(), fs::read(dir.path().join("again/cdf.csv")).unwrap());
    let cdf = fs::read_to_string(dir.path().join("again/cdf.csv")).unwrap();
    assert!(cdf.contains("turn,1,0.3750\n") && cdf.contains("queries,1,0.3125\n"));
}
