use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use scenario_loop::corpus::Corpus;
use scenario_loop::harness::*;
use scenario_loop::llm::PriceTable;
use scenario_loop::session::{SessionConfig, SessionStore};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn mixed_records() -> Vec<EvalRecord> {
    let mut records = Vec::new();
    for i in 0..5 {
        records.push(EvalRecord::success(&format!("a{i}"), 1, vec![1]));
    }
    records.push(EvalRecord::success("b", 1, vec![2]));
    records.push(EvalRecord::success("c0", 2, vec![1, 1]));
    records.push(EvalRecord::success("c1", 2, vec![1, 1]));
    for i in 0..8 {
        records.push(EvalRecord::failure(&format!("f{i}"), vec![5; 5]));
    }
    records
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 5e-5)
}

#[test]
fn mixed_outcomes_give_expected_curves() {
    let r = mixed_records();
    assert!(close(&cumulative_success_by_turn(&r, 5).unwrap(), &[0.375, 0.5, 0.5, 0.5, 0.5]));
    let q = cumulative_success_by_queries(&r, 25).unwrap();
    assert!(close(&q[..2], &[0.3125, 0.5]));
    assert!(q[2..].iter().all(|&v| v == 0.5));
}

#[test]
fn curve_edge_cases() {
    assert_eq!(cumulative_success_by_turn(&[], 5), Err(MetricsError::EmptyInput));
    assert_eq!(cumulative_success_by_queries(&[], 25), Err(MetricsError::EmptyInput));
    let fails: Vec<_> = (0..3).map(|i| EvalRecord::failure(&i.to_string(), vec![5])).collect();
    assert_eq!(cumulative_success_by_turn(&fails, 5).unwrap(), vec![0.0; 5]);
    let wins: Vec<_> = (0..3).map(|i| EvalRecord::success(&i.to_string(), 1, vec![1])).collect();
    assert_eq!(cumulative_success_by_turn(&wins, 5).unwrap(), vec![1.0; 5]);
    let one = [EvalRecord::success("x", 1, vec![4])];
    assert_eq!(cumulative_success_by_queries(&one, 6).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

fn record() -> impl Strategy<Value = EvalRecord> {
    (prop::collection::vec(1u32..=5, 1..=5), any::<bool>(), any::<u16>()).prop_map(|(q, ok, id)| {
        if ok {
            EvalRecord::success(&id.to_string(), q.len() as u32, q)
        } else {
            EvalRecord::failure(&id.to_string(), q)
        }
    })
}

proptest! {
    #[test]
    fn curves_are_monotone_and_end_at_the_success_rate(records in prop::collection::vec(record(), 1..40)) {
        let rate = records.iter().filter(|r| r.outcome == Outcome::Success).count() as f64 / records.len() as f64;
        let t = cumulative_success_by_turn(&records, 5).unwrap();
        let q = cumulative_success_by_queries(&records, 25).unwrap();
        for curve in [&t, &q] {
            prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(curve.iter().all(|&v| (0.0..=rate).contains(&v)));
            prop_assert_eq!(*curve.last().unwrap(), rate);
        }
        // independent count for one interior point
        let within_two = records.iter().filter(|r| r.success_turn.is_some_and(|k| k <= 2)).count() as f64;
        prop_assert_eq!(t[1], within_two / records.len() as f64);
    }
}

#[test]
fn reports_are_deterministic_and_create_their_directory() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    let summary = emit_report(&mixed_records(), &a, 5, 5).unwrap();
    emit_report(&mixed_records(), &b, 5, 5).unwrap();
    assert_eq!((summary.scenarios, summary.successes, summary.success_rate), (16, 8, 0.5));
    let cdf = fs::read_to_string(a.join("cdf.csv")).unwrap();
    let lines: Vec<&str> = cdf.lines().collect();
    assert_eq!(lines[0], "axis,x,cumulative_success");
    assert_eq!(&lines[1..6], ["turn,1,0.3750", "turn,2,0.5000", "turn,3,0.5000", "turn,4,0.5000", "turn,5,0.5000"]);
    assert_eq!(&lines[6..8], ["queries,1,0.3125", "queries,2,0.5000"]);
    assert_eq!(lines.len(), 1 + 5 + 25);
    for f in ["cdf.csv", "scenarios.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let table = fs::read_to_string(a.join("scenarios.csv")).unwrap();
    assert!(table.lines().any(|l| l == "c0,success,2,2,2,1;1,0.0000,"));
}

fn batch_config(out: &Path, workers: usize) -> BatchConfig {
    BatchConfig {
        session: SessionConfig::default(),
        backend: format!("scripted-dir:{}", fixture("fixtures/eval/scripts").display()),
        out: out.to_path_buf(),
        workers,
        prices: PriceTable::default(),
    }
}

#[test]
fn scripted_batch_gives_half_success() {
    let corpus = Corpus::load(&fixture("fixtures/eval")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let records = run_batch(&corpus, &batch_config(&dir.path().join("one"), 4)).unwrap();
    assert_eq!(records.len(), 16);
    let ids: Vec<&str> = records.iter().map(|r| r.scenario.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert!(records.iter().all(|r| r.error.is_none()), "{records:#?}");

    let turns: Vec<Option<u32>> = records.iter().map(|r| r.success_turn).collect();
    assert_eq!(turns.iter().filter(|t| **t == Some(1)).count(), 6);
    assert_eq!(turns.iter().filter(|t| **t == Some(2)).count(), 2);
    assert!(close(&cumulative_success_by_turn(&records, 5).unwrap(), &[0.375, 0.5, 0.5, 0.5, 0.5]));
    assert!(close(&cumulative_success_by_queries(&records, 25).unwrap()[..2], &[0.3125, 0.5]));

    let never = records.iter().find(|r| r.scenario == "s13_ped_never_safe").unwrap();
    assert_eq!((never.outcome, never.queries_per_turn.clone()), (Outcome::Failure, vec![1; 5]));
    let broken = records.iter().find(|r| r.scenario == "s09_unparsable").unwrap();
    assert_eq!(broken.queries_per_turn, vec![5; 5]);

    let serial = run_batch(&corpus, &batch_config(&dir.path().join("two"), 1)).unwrap();
    let strip = |rs: &[EvalRecord]| rs.iter().map(|r| EvalRecord { wall_ms: 0, ..r.clone() }).collect::<Vec<_>>();
    assert_eq!(strip(&records), strip(&serial));

    let store = SessionStore::new(dir.path().join("one/sessions"));
    for r in records.iter().filter(|r| r.outcome == Outcome::Success) {
        let checker = corpus.entry(&r.scenario).and_then(|e| e.checker.as_ref());
        assert_eq!(revalidate(&store, &r.scenario, checker).unwrap(), Vec::<String>::new(), "{}", r.scenario);
    }
}

#[test]
fn empty_corpus_yields_no_records() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.toml"), "").unwrap();
    let corpus = Corpus::load(dir.path()).unwrap();
    assert!(run_batch(&corpus, &batch_config(&dir.path().join("out"), 2)).unwrap().is_empty());
}

#[test]
fn missing_scripts_are_recorded_as_failures() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("manifest.toml"),
        "[[scenario]]\nid = \"lonely\"\nsplit = \"test\"\ndescription = \"A car drives.\"\n",
    )
    .unwrap();
    let corpus = Corpus::load(dir.path()).unwrap();
    let mut config = batch_config(&dir.path().join("out"), 1);
    config.backend = format!("scripted-dir:{}", dir.path().join("nowhere").display());
    let records = run_batch(&corpus, &config).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].outcome, Outcome::Failure);
    assert!(records[0].error.as_deref().unwrap().contains("lonely.script"));
}

#[test]
fn checker_predicates_against_a_simulated_trace() {
    use scenario_loop::dsl::{compile, SymbolTable};
    use scenario_loop::road::load_network;
    use scenario_loop::sample::sample_scene;
    use scenario_loop::sim::{run_scene, SimConfig};
    let text = fs::read_to_string(fixture("fixtures/listings/right_turn_v1.scenic")).unwrap();
    let program = compile(&text, &SymbolTable::standard()).unwrap();
    let network = load_network("town_cross4").unwrap();
    let scene = sample_scene(&program, &network, 0).unwrap();
    let trace = run_scene(&program, &scene, &network, &SimConfig::default()).unwrap();

    let mut oracle = f64::INFINITY;
    for s in &trace.snapshots {
        let (a, b) = (s.agents[0].position, s.agents[1].position);
        oracle = oracle.min(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt());
    }
    let any_pair = TraceChecker::default();
    assert!((any_pair.closest_approach(&trace).unwrap() - oracle).abs() < 1e-12);
    assert!(any_pair.check(&trace).is_empty());

    let label = trace.termination.label();
    let strict = TraceChecker {
        pair: Some(["ego".into(), "adversary".into()]),
        min_gap_at_least: Some(oracle + 1.0),
        min_gap_below: Some(oracle + 1.0),
        termination: vec![label.clone()],
        travel: [("ego".to_string(), 1e6)].into_iter().collect(),
        ..TraceChecker::default()
    };
    let failures = strict.check(&trace);
    assert_eq!(failures.len(), 2, "{failures:?}");
    assert!(failures[0].starts_with("closest approach"));
    assert!(failures[1].starts_with("ego travelled"));
    let wrong_end = TraceChecker { termination: vec!["Nothing".into()], ..TraceChecker::default() };
    assert_eq!(wrong_end.check(&trace), vec![format!("terminated by {label}, expected one of Nothing")]);
}

#[test]
fn records_round_trip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.json");
    let mut records = mixed_records();
    records[0].wall_ms = 1234;
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
}
