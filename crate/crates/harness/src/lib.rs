//! Batch runner for the decoding engine: datasets in, traces and reports out.

pub mod dataset;
pub mod models;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use diver_core::strategy::{decode_with, Models};
use diver_core::template::load_templates;
use diver_core::trace::{read_trace, RecordStats, TraceAggregates, TraceError};
use diver_core::{DecoderConfig, LmError, PromptTemplatePair, TemplateError, TokenId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{load_dataset, parse_dataset, DatasetError, DatasetRecord};
pub use models::{load_model, ModelSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("model: {0}")]
    Model(#[from] LmError),
    #[error("templates: {0}")]
    Template(#[from] TemplateError),
    #[error("record {id}: unknown task {task:?}")]
    UnknownTask { id: String, task: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything needed to decode a dataset besides the dataset itself.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: String,
    pub templates: Option<PathBuf>,
    /// `cfg.verifier` names the verifier (or CD amateur) model spec.
    pub cfg: DecoderConfig,
}

impl RunSpec {
    pub fn new(model: impl Into<String>, cfg: DecoderConfig) -> Self {
        Self { model: model.into(), templates: None, cfg }
    }
}

/// The template used when no template file is given, under task `plain`.
pub fn default_templates() -> Vec<PromptTemplatePair> {
    vec![PromptTemplatePair::new("plain", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").expect("valid template")]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub id: String,
    pub task: String,
    pub output: String,
    pub tokens: Vec<TokenId>,
    pub stats: RecordStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub gamma: f64,
    pub records: Vec<RecordReport>,
    pub aggregates: TraceAggregates,
    /// Over records that carry a reference; `None` when none do.
    pub exact_match_rate: Option<f64>,
    pub failures: usize,
}

impl RunReport {
    /// Aggregates rebuilt from the per-record entries.
    pub fn recompute_aggregates(&self) -> TraceAggregates {
        let mut agg = TraceAggregates::default();
        for r in self.records.iter().filter(|r| r.stats != RecordStats::default()) {
            agg.records += 1;
            agg.total_tokens += r.stats.tokens_emitted;
            agg.total_divergences += r.stats.divergence_count;
            agg.total_elapsed_ns += r.stats.elapsed_ns;
            for (&len, &n) in &r.stats.span_lengths {
                *agg.span_length_histogram.entry(len).or_default() += n;
            }
        }
        if agg.records > 0 {
            agg.mean_divergences_per_example = agg.total_divergences as f64 / agg.records as f64;
        }
        if agg.total_tokens > 0 {
            agg.tokens_per_second = agg.total_tokens as f64 / (agg.total_elapsed_ns.max(1) as f64 * 1e-9);
        }
        agg
    }
}

fn templates_for(spec: &RunSpec) -> Result<BTreeMap<String, PromptTemplatePair>, HarnessError> {
    let list = match &spec.templates {
        Some(path) => load_templates(path)?,
        None => default_templates(),
    };
    Ok(list.into_iter().map(|t| (t.name.clone(), t)).collect())
}

/// Decodes already-loaded records, writing one trace stream to `out`.
pub fn run_records<W: Write>(
    records: &[DatasetRecord],
    models: Models<'_>,
    templates: &BTreeMap<String, PromptTemplatePair>,
    cfg: &DecoderConfig,
    mut out: W,
) -> Result<RunReport, HarnessError> {
    for r in records {
        if !templates.contains_key(&r.task) {
            return Err(HarnessError::UnknownTask { id: r.id.clone(), task: r.task.clone() });
        }
    }
    let mut reports = Vec::with_capacity(records.len());
    let mut traces = Vec::with_capacity(records.len());
    for r in records {
        let (result, error) = match decode_with(models, &templates[&r.task], &r.input, cfg) {
            Ok(res) => (res, None),
            Err(fail) => (*fail.partial, Some(fail.error.to_string())),
        };
        result.trace.write_jsonl(&r.id, &mut out)?;
        out.flush()?;
        let exact_match = r.reference.as_ref().filter(|_| error.is_none()).map(|reference| result.text == reference.trim());
        reports.push(RecordReport {
            id: r.id.clone(),
            task: r.task.clone(),
            output: result.text,
            tokens: result.output.0,
            stats: result.trace.record_stats(),
            exact_match,
            error,
        });
        traces.push(result.trace.events);
    }
    // a record that failed before its first event leaves no trace lines
    let aggregates = TraceAggregates::from_records(traces.iter().filter(|t| !t.is_empty()).map(Vec::as_slice));
    let judged: Vec<bool> = reports.iter().filter_map(|r| r.exact_match).collect();
    let exact_match_rate =
        (!judged.is_empty()).then(|| judged.iter().filter(|&&m| m).count() as f64 / judged.len() as f64);
    let failures = reports.iter().filter(|r| r.error.is_some()).count();
    Ok(RunReport {
        strategy: cfg.strategy.to_string(),
        gamma: cfg.gamma,
        records: reports,
        aggregates,
        exact_match_rate,
        failures,
    })
}

/// Decodes every record of `dataset` and writes the trace to `out`.
/// Per-record failures are reported and the run continues.
pub fn run_dataset(dataset: &Path, spec: &RunSpec, out: &Path) -> Result<RunReport, HarnessError> {
    let records = load_dataset(dataset)?;
    let templates = templates_for(spec)?;
    let forward = load_model(&spec.model)?;
    let second = spec.cfg.verifier.as_deref().map(load_model).transpose()?;
    let models = Models { forward: forward.as_ref(), second: second.as_deref() };
    let writer = BufWriter::new(File::create(out)?);
    run_records(&records, models, &templates, &spec.cfg, writer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub trace: PathBuf,
    pub aggregates: TraceAggregates,
    pub exact_match_rate: Option<f64>,
    pub failures: usize,
}

/// One [`run_dataset`] per γ, traces written to `out_dir/trace-gamma-<γ>.jsonl`.
pub fn sweep_gamma(dataset: &Path, spec: &RunSpec, gammas: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    if let Some(g) = gammas.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
        return Err(HarnessError::Config(format!("gamma {g} not in (0,1]")));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let spec = RunSpec { cfg: DecoderConfig { gamma, ..spec.cfg.clone() }, ..spec.clone() };
        let trace = out_dir.join(format!("trace-gamma-{gamma}.jsonl"));
        let report = run_dataset(dataset, &spec, &trace)?;
        rows.push(SweepRow {
            gamma,
            trace,
            aggregates: report.aggregates,
            exact_match_rate: report.exact_match_rate,
            failures: report.failures,
        });
    }
    Ok(rows)
}

/// Recomputes run aggregates from a trace file.
pub fn stats(trace: &Path) -> Result<TraceAggregates, HarnessError> {
    let records = read_trace(BufReader::new(File::open(trace)?))?;
    Ok(TraceAggregates::from_records(records.iter().map(|(_, e)| e.as_slice())))
}
