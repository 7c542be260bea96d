//! The verified decode loop.
//!
//! At each step the forward model's candidate set is computed. A singleton
//! set emits its token. Otherwise every candidate is rolled out, the span
//! length is fixed from the risk set (or `k = 0` in token mode), each span
//! is scored `q = log p(seed) + PMI(span)`, and the winner is appended in
//! full; decoding then resumes right after it with a fresh model call on
//! the committed prefix.
//!
//! Randomness: a single ChaCha8 generator seeded from `rng_seed`; sampled
//! span selection draws exactly one `f64` per divergence point.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DecoderConfig, SpanMode};
use crate::divergence::candidate_set_at;
use crate::error::{DecodeError, LmError};
use crate::lm::LanguageModel;
use crate::numeric::logsumexp;
use crate::pmi::PmiVerifier;
use crate::span::{build_spans, dynamic_k, extend_rollout, rollout_candidate, RiskSet, Rollout};
use crate::template::PromptTemplatePair;
use crate::trace::{DecodeTrace, EventData, SpanRecord};
use crate::vocab::{TokenId, TokenSeq};

pub use crate::span::CandidateSpan;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub divergence_count: u64,
    /// Committed span length → count.
    pub span_lengths: BTreeMap<usize, u64>,
    pub tokens_per_second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Generated tokens; ends with eos unless the token budget ran out.
    pub output: TokenSeq,
    /// Detokenized output without the trailing eos.
    pub text: String,
    pub trace: DecodeTrace,
    pub stats: DecodeStats,
}

impl DecodeResult {
    pub(crate) fn finish<M: LanguageModel + ?Sized>(model: &M, output: TokenSeq, trace: DecodeTrace) -> Self {
        let rs = trace.record_stats();
        let text = model
            .detokenize(output.without_eos(model.vocab()))
            .unwrap_or_else(|_| model.vocab().detokenize(output.without_eos(model.vocab())));
        let stats = DecodeStats {
            divergence_count: rs.divergence_count,
            span_lengths: rs.span_lengths.clone(),
            tokens_per_second: rs.tokens_per_second(),
        };
        Self { output, text, trace, stats }
    }
}

/// A decode that stopped on an error; `partial` holds everything committed
/// up to that point.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct DecodeFailure {
    #[source]
    pub error: DecodeError,
    pub partial: Box<DecodeResult>,
}

fn cmp_spans(a: &CandidateSpan, b: &CandidateSpan) -> Ordering {
    b.q.partial_cmp(&a.q).unwrap_or(Ordering::Equal).then(a.seed().cmp(&b.seed()))
}

/// Recomputes `q = seed_base_logp + pmi` and sorts by `q` descending, ties
/// by ascending seed id.
pub fn rerank(mut spans: Vec<CandidateSpan>) -> Vec<CandidateSpan> {
    for s in &mut spans {
        s.q = s.seed_base_logp + s.pmi;
    }
    spans.sort_by(cmp_spans);
    spans
}

/// Picks a span index: the best `q` (ties by lower seed id), or a draw from
/// softmax(q) when `sample` is set. Spans with `q = -inf` are never drawn.
pub fn select_span<R: Rng + ?Sized>(spans: &[CandidateSpan], sample: bool, rng: &mut R) -> Result<usize, DecodeError> {
    if spans.is_empty() {
        return Err(DecodeError::EmptySpanList);
    }
    let best = (0..spans.len())
        .min_by(|&a, &b| cmp_spans(&spans[a], &spans[b]))
        .unwrap_or(0);
    if !sample {
        return Ok(best);
    }
    let qs: Vec<f64> = spans.iter().map(|s| s.q).collect();
    let norm = logsumexp(&qs)?;
    if !norm.is_finite() {
        return Ok(best);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_live = best;
    for (i, q) in qs.iter().enumerate() {
        let p = (q - norm).exp();
        if p > 0.0 {
            last_live = i;
        }
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last_live)
}

/// Maps forward-model ids into the verifier's id space, dropping a trailing
/// eos. Shared vocabularies pass through; otherwise via text.
fn to_verifier_ids<F, V>(forward: &F, verifier: &V, ids: &[TokenId]) -> Result<Vec<TokenId>, LmError>
where
    F: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    let ids = match ids.split_last() {
        Some((&last, rest)) if last == forward.vocab().eos() => rest,
        _ => ids,
    };
    if forward.vocab() == verifier.vocab() {
        return Ok(ids.to_vec());
    }
    Ok(verifier.tokenize(&forward.detokenize(ids)?)?.0)
}

struct Session {
    context: Vec<TokenId>,
    output: TokenSeq,
    trace: DecodeTrace,
}

impl Session {
    fn emit(&mut self, token: TokenId, from_span: bool) {
        let step = self.output.len();
        self.trace.push(step, EventData::Emit { token, from_span });
        self.output.push(token);
        self.context.push(token);
    }
}

/// Verified decoding of `input` with the strategy's span mode.
pub fn decode<M, V>(
    model: &M,
    verify_model: &V,
    tpl: &PromptTemplatePair,
    input: &str,
    cfg: &DecoderConfig,
) -> Result<DecodeResult, DecodeFailure>
where
    M: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    let mut session = Session { context: Vec::new(), output: TokenSeq::new(), trace: DecodeTrace::new() };
    match run(model, verify_model, tpl, input, cfg, &mut session) {
        Ok(()) => Ok(DecodeResult::finish(model, session.output, session.trace)),
        Err(error) => Err(DecodeFailure {
            error,
            partial: Box::new(DecodeResult::finish(model, session.output, session.trace)),
        }),
    }
}

fn run<M, V>(
    model: &M,
    verify_model: &V,
    tpl: &PromptTemplatePair,
    input: &str,
    cfg: &DecoderConfig,
    s: &mut Session,
) -> Result<(), DecodeError>
where
    M: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    cfg.validate()?;
    let mode = cfg
        .strategy
        .span_mode()
        .ok_or_else(|| DecodeError::WrongStrategy(cfg.strategy.to_string()))?;
    tpl.validate()?;
    s.context = model.tokenize(&tpl.render_forward(input))?.0;
    let verifier = PmiVerifier::new(verify_model, tpl, input)?;
    let eos = model.vocab().eos();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    while s.output.len() < cfg.max_new_tokens && s.output.last() != Some(eos) {
        let step = s.output.len();
        let mut cs = candidate_set_at(&model.next_dist(&s.context)?, cfg.gamma, step);
        if let Some(n) = cfg.max_candidates {
            cs.truncate(n);
        }
        if cs.len() == 1 {
            s.emit(cs.argmax(), false);
            continue;
        }

        let cap = cfg.max_span_len.min(cfg.max_new_tokens - step);
        let (rollouts, risks, k) = match mode {
            SpanMode::Token => {
                let seeds = cs
                    .members
                    .iter()
                    .map(|&seed| Rollout {
                        start: step,
                        tokens: TokenSeq(vec![seed]),
                        first_risk: None,
                        ended: seed == eos,
                        hit_cap: false,
                    })
                    .collect::<Vec<_>>();
                (seeds, RiskSet::default(), 0)
            }
            SpanMode::Left | SpanMode::Right => {
                let mut rollouts = cs
                    .members
                    .iter()
                    .map(|&seed| rollout_candidate(model, &s.context, step, seed, cfg.gamma, cap))
                    .collect::<Result<Vec<_>, _>>()?;
                let risks = RiskSet::from_rollouts(&rollouts);
                let k = dynamic_k(&risks, step, mode)?;
                if mode == SpanMode::Right {
                    for r in rollouts.iter_mut().filter(|r| !r.ended && r.tokens.len() < k + 1) {
                        extend_rollout(model, &s.context, r, k + 1)?;
                    }
                }
                (rollouts, risks, k)
            }
        };
        let mut spans = build_spans(&rollouts, k, &cs, eos);
        s.trace.push(
            step,
            EventData::Divergence {
                candidates: cs.members.clone(),
                base_logp: cs.base_logp.clone(),
                risks: risks.entries.clone(),
                k,
            },
        );

        let y_prefix = to_verifier_ids(model, verify_model, &s.output)?;
        let baseline = verifier.baseline(&y_prefix)?;
        let mut truncated = baseline.truncated;
        let mut clamps = Vec::with_capacity(spans.len());
        for span in &mut spans {
            let mapped = to_verifier_ids(model, verify_model, &span.tokens)?;
            let score = verifier.score_with_baseline(&baseline, &y_prefix, &mapped)?;
            truncated |= score.truncated;
            clamps.push(score.clamped);
            span.set_pmi(score.value);
        }
        s.trace.push(
            step,
            EventData::SpanEval {
                spans: spans
                    .iter()
                    .zip(&clamps)
                    .map(|(sp, &clamped)| SpanRecord {
                        tokens: sp.tokens.0.clone(),
                        seed_base_logp: sp.seed_base_logp,
                        pmi: sp.pmi,
                        q: sp.q,
                        terminal: sp.terminal,
                        clamped,
                    })
                    .collect(),
                truncated,
            },
        );

        let ranked = rerank(spans);
        let index = select_span(&ranked, cfg.sample_spans, &mut rng)?;
        let chosen = &ranked[index];
        s.trace.push(
            step,
            EventData::Selection { index, seed: chosen.seed(), span_len: chosen.tokens.len() },
        );
        for &tok in chosen.tokens.iter() {
            s.emit(tok, true);
        }
    }
    Ok(())
}
