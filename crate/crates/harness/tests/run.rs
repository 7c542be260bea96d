use std::io::Write;
use std::path::PathBuf;

use diver_core::trace::TraceError;
use diver_core::{DecoderConfig, Strategy};
use diver_harness::{run_dataset, stats, sweep_gamma, HarnessError, RunSpec};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn spec(strategy: Strategy) -> RunSpec {
    let mut s = RunSpec::new(format!("toy:{}", fixture("toy.json").display()), DecoderConfig::with_strategy(strategy));
    s.templates = Some(fixture("templates.json"));
    s.cfg.max_new_tokens = 8;
    s
}

#[test]
fn greedy_run_has_no_divergences() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let rep = run_dataset(&fixture("dataset.jsonl"), &spec(Strategy::Greedy), &out).unwrap();
    assert_eq!(rep.records.len(), 3);
    assert_eq!(rep.failures, 0);
    assert!(rep.records.iter().all(|r| r.stats.divergence_count == 0 && r.stats.span_lengths.is_empty()));
    assert_eq!(rep.aggregates.total_divergences, 0);
    assert_eq!(rep.records[0].output, "a c d");
    assert_eq!(rep.exact_match_rate, Some(0.5));
}

#[test]
fn diver_right_histogram_matches_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let rep = run_dataset(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &out).unwrap();
    assert!(rep.aggregates.total_divergences > 0);
    let from_file = stats(&out).unwrap();
    assert_eq!(from_file, rep.aggregates);
    assert_eq!(rep.recompute_aggregates(), rep.aggregates);
    let hist_total: u64 = from_file.span_length_histogram.values().sum();
    assert_eq!(hist_total, from_file.total_divergences);
}

#[test]
fn separate_verifier_runs_and_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let same = run_dataset(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &dir.path().join("a")).unwrap();
    let mut s = spec(Strategy::DiverRight);
    s.cfg.verifier = Some(format!("toy:{}", fixture("verifier.json").display()));
    let other = run_dataset(&fixture("dataset.jsonl"), &s, &dir.path().join("b")).unwrap();
    assert_eq!(other.failures, 0);
    assert_eq!(same.records[0].output, "a c d");
    assert_ne!(same.records[0].output, other.records[0].output);
}

#[test]
fn failures_are_recorded_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let rep = run_dataset(&fixture("partial_failure.jsonl"), &spec(Strategy::DiverRight), &out).unwrap();
    assert_eq!(rep.failures, 1);
    assert!(rep.records[0].error.is_none());
    assert!(rep.records[1].error.as_deref().unwrap().contains("zebra"));
    assert_eq!(stats(&out).unwrap(), rep.aggregates);
}

#[test]
fn unknown_task_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_dataset(&fixture("bad_task.jsonl"), &spec(Strategy::Greedy), &dir.path().join("t")).unwrap_err();
    assert!(matches!(err, HarnessError::UnknownTask { .. }));
}

#[test]
fn sweep_is_monotone_and_single_gamma_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_gamma(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &[0.1, 0.3, 1.0], dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    let top = rows.iter().find(|r| r.gamma == 1.0).unwrap().aggregates.total_divergences;
    assert!(rows.iter().all(|r| top <= r.aggregates.total_divergences));
    for r in &rows {
        assert_eq!(stats(&r.trace).unwrap(), r.aggregates);
    }

    let one = sweep_gamma(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &[0.3], &dir.path().join("one")).unwrap();
    let run = run_dataset(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &dir.path().join("run.jsonl")).unwrap();
    let strip = |mut a: diver_core::trace::TraceAggregates| {
        a.total_elapsed_ns = 0;
        a.tokens_per_second = 0.0;
        a
    };
    assert_eq!(strip(one[0].aggregates.clone()), strip(run.aggregates));
    assert!(sweep_gamma(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &[0.0], dir.path()).is_err());
}

#[test]
fn hand_written_trace_stats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, r#"{{"record_id":"r","step":0,"kind":"selection","payload":{{"index":0,"seed":3,"span_len":2}},"t_ns":10}}"#).unwrap();
    writeln!(f, r#"{{"record_id":"r","step":0,"kind":"emit","payload":{{"token":3,"from_span":true}},"t_ns":20}}"#).unwrap();
    drop(f);
    let agg = stats(&path).unwrap();
    assert_eq!(agg.records, 1);
    assert_eq!(agg.total_tokens, 1);
    assert_eq!(agg.span_length_histogram.into_iter().collect::<Vec<_>>(), vec![(2, 1)]);
    assert_eq!(agg.total_elapsed_ns, 20);
}

#[test]
fn truncated_trace_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    run_dataset(&fixture("dataset.jsonl"), &spec(Strategy::DiverRight), &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let keep = lines.len() / 2;

    let clean = dir.path().join("clean.jsonl");
    std::fs::write(&clean, lines[..keep].join("\n") + "\n").unwrap();
    assert!(stats(&clean).is_ok());

    let cut = dir.path().join("cut.jsonl");
    let half = &lines[keep][..lines[keep].len() / 2];
    std::fs::write(&cut, lines[..keep].join("\n") + "\n" + half).unwrap();
    match stats(&cut) {
        Err(HarnessError::Trace(TraceError::CorruptTrace { line, .. })) => assert_eq!(line, keep + 1),
        other => panic!("expected CorruptTrace, got {other:?}"),
    }
}
