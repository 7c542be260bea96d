//! Per-step decode event log and the statistics derived from it.
//!
//! Traces persist as JSON lines, one event per line:
//! `{"record_id", "step", "kind", "payload", "t_ns"}` with `kind` one of
//! `emit`, `divergence`, `span-eval`, `selection`. Every aggregate reported
//! for a run is a function of these lines alone, so re-reading a trace file
//! reproduces the run's numbers exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt trace at line {line}: {reason}")]
    CorruptTrace { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub tokens: Vec<TokenId>,
    pub seed_base_logp: f64,
    pub pmi: f64,
    pub q: f64,
    pub terminal: bool,
    #[serde(default)]
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventData {
    Emit {
        token: TokenId,
        /// Emitted as part of a committed span rather than a plain step.
        from_span: bool,
    },
    Divergence {
        candidates: Vec<TokenId>,
        base_logp: Vec<f64>,
        /// `(seed, r_m)` pairs.
        risks: Vec<(TokenId, usize)>,
        k: usize,
    },
    SpanEval {
        spans: Vec<SpanRecord>,
        /// Backward prompts were cut to fit the verifier's context.
        truncated: bool,
    },
    Selection {
        index: usize,
        seed: TokenId,
        span_len: usize,
    },
}

impl EventData {
    pub fn kind(&self) -> &'static str {
        match self {
            EventData::Emit { .. } => "emit",
            EventData::Divergence { .. } => "divergence",
            EventData::SpanEval { .. } => "span-eval",
            EventData::Selection { .. } => "selection",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub step: usize,
    /// Nanoseconds since the decode started.
    pub t_ns: u64,
    pub data: EventData,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    record_id: String,
    step: usize,
    kind: String,
    payload: serde_json::Value,
    t_ns: u64,
}

impl Event {
    pub fn to_line(&self, record_id: &str) -> String {
        let line = TraceLine {
            record_id: record_id.to_owned(),
            step: self.step,
            kind: self.data.kind().to_owned(),
            payload: serde_json::to_value(&self.data).expect("event payload serializes"),
            t_ns: self.t_ns,
        };
        serde_json::to_string(&line).expect("trace line serializes")
    }

    /// Parses one trace line into `(record_id, event)`.
    pub fn from_line(text: &str) -> Result<(String, Event), String> {
        let line: TraceLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let p = line.payload;
        let bad = |e: serde_json::Error| format!("bad {} payload: {e}", line.kind);
        let data = match line.kind.as_str() {
            "emit" => {
                #[derive(Deserialize)]
                struct P {
                    token: TokenId,
                    from_span: bool,
                }
                let P { token, from_span } = serde_json::from_value(p).map_err(bad)?;
                EventData::Emit { token, from_span }
            }
            "divergence" => {
                #[derive(Deserialize)]
                struct P {
                    candidates: Vec<TokenId>,
                    base_logp: Vec<f64>,
                    risks: Vec<(TokenId, usize)>,
                    k: usize,
                }
                let P { candidates, base_logp, risks, k } = serde_json::from_value(p).map_err(bad)?;
                EventData::Divergence { candidates, base_logp, risks, k }
            }
            "span-eval" => {
                #[derive(Deserialize)]
                struct P {
                    spans: Vec<SpanRecord>,
                    truncated: bool,
                }
                let P { spans, truncated } = serde_json::from_value(p).map_err(bad)?;
                EventData::SpanEval { spans, truncated }
            }
            "selection" => {
                #[derive(Deserialize)]
                struct P {
                    index: usize,
                    seed: TokenId,
                    span_len: usize,
                }
                let P { index, seed, span_len } = serde_json::from_value(p).map_err(bad)?;
                EventData::Selection { index, seed, span_len }
            }
            other => return Err(format!("unknown event kind {other:?}")),
        };
        Ok((line.record_id, Event { step: line.step, t_ns: line.t_ns, data }))
    }
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub events: Vec<Event>,
    started: Instant,
}

impl Default for DecodeTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for DecodeTrace {
    fn eq(&self, other: &Self) -> bool {
        self.events == other.events
    }
}

impl DecodeTrace {
    pub fn new() -> Self {
        Self { events: Vec::new(), started: Instant::now() }
    }

    pub fn push(&mut self, step: usize, data: EventData) {
        let t_ns = self.started.elapsed().as_nanos() as u64;
        self.events.push(Event { step, t_ns, data });
    }

    pub fn write_jsonl<W: Write>(&self, record_id: &str, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            writeln!(out, "{}", e.to_line(record_id))?;
        }
        Ok(())
    }

    pub fn record_stats(&self) -> RecordStats {
        RecordStats::from_events(&self.events)
    }

    /// Same events with all timestamps zeroed, for comparing runs.
    pub fn without_timing(&self) -> Vec<Event> {
        self.events.iter().cloned().map(|e| Event { t_ns: 0, ..e }).collect()
    }
}

/// Statistics of one decode, recomputable from its events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordStats {
    pub tokens_emitted: u64,
    pub divergence_count: u64,
    pub span_eval_count: u64,
    /// Committed span length (`k + 1`) → count.
    pub span_lengths: BTreeMap<usize, u64>,
    /// Timestamp of the last event.
    pub elapsed_ns: u64,
}

impl RecordStats {
    pub fn from_events(events: &[Event]) -> Self {
        let mut s = RecordStats::default();
        for e in events {
            match &e.data {
                EventData::Emit { .. } => s.tokens_emitted += 1,
                EventData::Divergence { .. } => s.divergence_count += 1,
                EventData::SpanEval { .. } => s.span_eval_count += 1,
                EventData::Selection { span_len, .. } => *s.span_lengths.entry(*span_len).or_default() += 1,
            }
            s.elapsed_ns = s.elapsed_ns.max(e.t_ns);
        }
        s
    }

    pub fn tokens_per_second(&self) -> f64 {
        tokens_per_second(self.tokens_emitted, self.elapsed_ns)
    }
}

fn tokens_per_second(tokens: u64, elapsed_ns: u64) -> f64 {
    if tokens == 0 {
        return 0.0;
    }
    tokens as f64 / (elapsed_ns.max(1) as f64 * 1e-9)
}

/// Aggregates over many records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceAggregates {
    pub records: u64,
    pub total_tokens: u64,
    pub total_divergences: u64,
    pub mean_divergences_per_example: f64,
    pub span_length_histogram: BTreeMap<usize, u64>,
    pub total_elapsed_ns: u64,
    pub tokens_per_second: f64,
}

impl TraceAggregates {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a [Event]>) -> Self {
        let mut agg = TraceAggregates::default();
        for events in records {
            let s = RecordStats::from_events(events);
            agg.records += 1;
            agg.total_tokens += s.tokens_emitted;
            agg.total_divergences += s.divergence_count;
            agg.total_elapsed_ns += s.elapsed_ns;
            for (len, n) in s.span_lengths {
                *agg.span_length_histogram.entry(len).or_default() += n;
            }
        }
        if agg.records > 0 {
            agg.mean_divergences_per_example = agg.total_divergences as f64 / agg.records as f64;
        }
        agg.tokens_per_second = tokens_per_second(agg.total_tokens, agg.total_elapsed_ns);
        agg
    }
}

/// Reads a JSON-lines trace, grouping events by record in order of first
/// appearance. Blank lines are skipped.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<Event>)>, TraceError> {
    let mut records: Vec<(String, Vec<Event>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = n + 1;
        let (id, event) = Event::from_line(&line)
            .map_err(|reason| TraceError::CorruptTrace { line: lineno, reason })?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            records.push((id, Vec::new()));
            records.len() - 1
        });
        let events = &mut records[slot].1;
        if let Some(prev) = events.last() {
            if event.step < prev.step {
                return Err(TraceError::CorruptTrace {
                    line: lineno,
                    reason: format!("step {} after step {}", event.step, prev.step),
                });
            }
        }
        events.push(event);
    }
    Ok(records)
}
