//! Reference decoding strategies: greedy, nucleus, beam search, contrastive
//! decoding (CD) and context-aware decoding (CAD).
//!
//! CD and CAD contrast *probabilities*, not log-probabilities:
//!
//! ```text
//! CD:  argmax_{v in C(i)}  p_expert(v) - p_amateur(v)
//! CAD: argmax_v  (1 + alpha) p(v | input, y_<i) - alpha p(v | y_<i)
//! ```
//!
//! All argmaxes break ties toward the lowest token id. Every baseline emits a
//! trace in the same schema as verified decoding, with no divergence events.

use std::cmp::Ordering;

use rand::Rng;

use crate::divergence::candidate_set_at;
use crate::engine::{DecodeFailure, DecodeResult};
use crate::error::DecodeError;
use crate::lm::LanguageModel;
use crate::trace::{DecodeTrace, EventData};
use crate::vocab::{TokenId, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: TokenSeq,
    pub cum_logp: f64,
    pub finished: bool,
}

/// Best score first; equal scores put the lexicographically smaller
/// sequence first.
fn cmp_hyp(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.cum_logp
        .partial_cmp(&a.cum_logp)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Index of the largest score; ties go to the lowest index.
fn argmax_scores(scores: impl IntoIterator<Item = (TokenId, f64)>) -> Option<TokenId> {
    let mut best: Option<(TokenId, f64)> = None;
    for (id, s) in scores {
        match best {
            Some((_, bs)) if s <= bs => {}
            _ => best = Some((id, s)),
        }
    }
    best.map(|b| b.0)
}

/// Runs a one-token-per-step loop until eos or the budget, collecting emit
/// events. `pick` sees the current context and step.
fn step_loop<M, F>(model: &M, prompt: &[TokenId], max_new_tokens: usize, mut pick: F) -> Result<DecodeResult, DecodeFailure>
where
    M: LanguageModel + ?Sized,
    F: FnMut(&[TokenId], usize) -> Result<TokenId, DecodeError>,
{
    let eos = model.vocab().eos();
    let mut context = prompt.to_vec();
    let mut output = TokenSeq::new();
    let mut trace = DecodeTrace::new();
    while output.len() < max_new_tokens && output.last() != Some(eos) {
        let step = output.len();
        match pick(&context, step) {
            Ok(tok) => {
                trace.push(step, EventData::Emit { token: tok, from_span: false });
                output.push(tok);
                context.push(tok);
            }
            Err(error) => {
                return Err(DecodeFailure { error, partial: Box::new(DecodeResult::finish(model, output, trace)) })
            }
        }
    }
    Ok(DecodeResult::finish(model, output, trace))
}

pub fn greedy_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_new_tokens: usize,
) -> Result<DecodeResult, DecodeFailure> {
    step_loop(model, prompt, max_new_tokens, |ctx, _| Ok(model.next_dist(ctx)?.argmax()))
}

/// Samples from the smallest descending-probability prefix whose mass
/// reaches `top_p`, renormalized. One uniform draw per step.
pub fn nucleus_decode<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    top_p: f64,
    rng: &mut R,
    max_new_tokens: usize,
) -> Result<DecodeResult, DecodeFailure> {
    step_loop(model, prompt, max_new_tokens, |ctx, _| {
        let dist = model.next_dist(ctx)?;
        let ranked = dist.ranked();
        let mut nucleus = Vec::new();
        let mut mass = 0.0;
        for id in ranked {
            let p = dist.prob(id);
            nucleus.push((id, p));
            mass += p;
            if mass >= top_p {
                break;
            }
        }
        let u: f64 = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        for &(id, p) in &nucleus {
            acc += p;
            if u < acc {
                return Ok(id);
            }
        }
        Ok(nucleus.last().map(|n| n.0).unwrap_or_else(|| dist.argmax()))
    })
}

/// Length-unnormalized beam search. Returns the best finished hypothesis,
/// or the best unfinished one if nothing reached eos within the budget.
pub fn beam_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    beam_width: usize,
    max_new_tokens: usize,
) -> Result<DecodeResult, DecodeFailure> {
    let eos = model.vocab().eos();
    let fail = |error: DecodeError| DecodeFailure {
        error,
        partial: Box::new(DecodeResult::finish(model, TokenSeq::new(), DecodeTrace::new())),
    };
    if beam_width == 0 {
        return Err(fail(DecodeError::BadConfig("beam_width must be positive".into())));
    }
    let mut trace = DecodeTrace::new();
    let mut alive = vec![BeamHypothesis { tokens: TokenSeq::new(), cum_logp: 0.0, finished: false }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_new_tokens {
        let mut expansions = Vec::new();
        for h in &alive {
            let ctx: Vec<TokenId> = prompt.iter().chain(h.tokens.iter()).copied().collect();
            let dist = model.next_dist(&ctx).map_err(|e| fail(e.into()))?;
            for id in dist.support() {
                let tok = id as TokenId;
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                expansions.push(BeamHypothesis {
                    tokens,
                    cum_logp: h.cum_logp + dist.logp(tok),
                    finished: tok == eos,
                });
            }
        }
        expansions.sort_by(cmp_hyp);
        expansions.truncate(beam_width);
        let (done, open): (Vec<_>, Vec<_>) = expansions.into_iter().partition(|h| h.finished);
        finished.extend(done);
        alive = open;
        if alive.is_empty() {
            break;
        }
        // extensions only lower the score, so a strictly better finished
        // hypothesis can no longer be overtaken
        let best_finished = finished.iter().map(|h| h.cum_logp).fold(f64::NEG_INFINITY, f64::max);
        if best_finished > alive[0].cum_logp {
            break;
        }
    }
    let pool = if finished.is_empty() { &mut alive } else { &mut finished };
    pool.sort_by(cmp_hyp);
    let best = pool.first().map(|h| h.tokens.clone()).unwrap_or_default();
    for (step, &tok) in best.iter().enumerate() {
        trace.push(step, EventData::Emit { token: tok, from_span: false });
    }
    Ok(DecodeResult::finish(model, best, trace))
}

/// Contrastive decoding restricted to the expert's γ-candidate set.
pub fn cd_decode<M, A>(
    model: &M,
    amateur: &A,
    prompt: &[TokenId],
    gamma: f64,
    max_new_tokens: usize,
) -> Result<DecodeResult, DecodeFailure>
where
    M: LanguageModel + ?Sized,
    A: LanguageModel + ?Sized,
{
    if model.vocab() != amateur.vocab() {
        return Err(DecodeFailure {
            error: DecodeError::VocabMismatch,
            partial: Box::new(DecodeResult::finish(model, TokenSeq::new(), DecodeTrace::new())),
        });
    }
    step_loop(model, prompt, max_new_tokens, |ctx, step| {
        let expert = model.next_dist(ctx)?;
        let weak = amateur.next_dist(ctx)?;
        let cs = candidate_set_at(&expert, gamma, step);
        let mut members = cs.members.clone();
        members.sort_unstable();
        let scored = members.into_iter().map(|id| (id, expert.prob(id) - weak.prob(id)));
        Ok(argmax_scores(scored).unwrap_or_else(|| cs.argmax()))
    })
}

/// Context-aware decoding: both prompts are extended with every generated token.
pub fn cad_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt_with_input: &[TokenId],
    prompt_without_input: &[TokenId],
    alpha: f64,
    max_new_tokens: usize,
) -> Result<DecodeResult, DecodeFailure> {
    let with_len = prompt_with_input.len();
    step_loop(model, prompt_with_input, max_new_tokens, |ctx, _| {
        let mut without = prompt_without_input.to_vec();
        without.extend_from_slice(&ctx[with_len..]);
        let with = model.next_dist(ctx)?;
        let free = model.next_dist(&without)?;
        let scored = (0..with.len() as TokenId).map(|id| (id, (1.0 + alpha) * with.prob(id) - alpha * free.prob(id)));
        Ok(argmax_scores(scored).unwrap_or_else(|| with.argmax()))
    })
}
