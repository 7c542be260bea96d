//! Span-level PMI between a candidate span and the input:
//!
//! ```text
//! PMI = log p(x | y_<i ++ span) - log p(x | y_<i)
//!     = Σ_t [ log p(x_t | y_<i ++ span, x_<t) - log p(x_t | y_<i, x_<t) ]
//! ```
//!
//! Both terms are teacher-forced scores of the input under the backward
//! prompt. The baseline term does not depend on the span and is computed
//! once per divergence point.

use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, LmError};
use crate::lm::LanguageModel;
use crate::span::CandidateSpan;
use crate::template::{BackwardPrompt, PromptTemplatePair};
use crate::vocab::{TokenId, TokenSeq};

/// Per-token deltas are clamped to ±this many nats. Zero-probability input
/// tokens land on the clamp instead of producing infinities.
pub const DELTA_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiScore {
    pub value: f64,
    pub per_token_deltas: Vec<f64>,
    /// Number of deltas that hit the clamp.
    pub clamped: usize,
    /// The backward prefix was cut from the left to fit the context limit.
    pub truncated: bool,
}

/// Baseline teacher-forced scores of the input given the output prefix only.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub scores: Vec<f64>,
    pub truncated: bool,
}

fn clamp_delta(with: f64, base: f64) -> (f64, bool) {
    match (with.is_finite(), base.is_finite()) {
        (true, true) => {
            let d = with - base;
            (d.clamp(-DELTA_CLAMP, DELTA_CLAMP), d.abs() > DELTA_CLAMP)
        }
        (false, true) => (-DELTA_CLAMP, true),
        (true, false) => (DELTA_CLAMP, true),
        (false, false) => (0.0, true),
    }
}

/// Scores `target` after `prefix`, cutting the prefix from the left if the
/// model advertises a context limit that would be exceeded.
fn score_within_limit<M: LanguageModel + ?Sized>(
    model: &M,
    prefix: &[TokenId],
    target: &[TokenId],
) -> Result<(Vec<f64>, bool), LmError> {
    if let Some(limit) = model.context_limit() {
        let total = prefix.len() + target.len();
        if total > limit {
            if target.len() > limit {
                return Err(LmError::ContextTooLong { len: target.len(), limit });
            }
            let cut = total - limit;
            return Ok((model.score_tokens(&prefix[cut..], target)?, true));
        }
    }
    Ok((model.score_tokens(prefix, target)?, false))
}

/// Scores spans against one input with a prepared backward prompt.
pub struct PmiVerifier<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    prompt: BackwardPrompt,
}

impl<'a, M: LanguageModel + ?Sized> PmiVerifier<'a, M> {
    pub fn new(model: &'a M, tpl: &PromptTemplatePair, input: &str) -> Result<Self, DecodeError> {
        Ok(Self { model, prompt: BackwardPrompt::prepare(model, tpl, input)? })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn prompt(&self) -> &BackwardPrompt {
        &self.prompt
    }

    fn strip_eos<'s>(&self, output: &'s [TokenId]) -> &'s [TokenId] {
        match output.split_last() {
            Some((&last, rest)) if last == self.model.vocab().eos() => rest,
            _ => output,
        }
    }

    /// `log p(x_t | y_<i, x_<t)` for every input token.
    pub fn baseline(&self, y_prefix: &[TokenId]) -> Result<Baseline, LmError> {
        let prefix = self.prompt.prefix_for(self.strip_eos(y_prefix));
        let (scores, truncated) = score_within_limit(self.model, &prefix, &self.prompt.target)?;
        Ok(Baseline { scores, truncated })
    }

    pub fn score_with_baseline(
        &self,
        baseline: &Baseline,
        y_prefix: &[TokenId],
        span: &[TokenId],
    ) -> Result<PmiScore, LmError> {
        let mut output = Vec::with_capacity(y_prefix.len() + span.len());
        output.extend_from_slice(y_prefix);
        output.extend_from_slice(span);
        let prefix = self.prompt.prefix_for(self.strip_eos(&output));
        let (with, truncated) = score_within_limit(self.model, &prefix, &self.prompt.target)?;
        let mut clamped = 0;
        let per_token_deltas: Vec<f64> = with
            .iter()
            .zip(&baseline.scores)
            .map(|(&w, &b)| {
                let (d, hit) = clamp_delta(w, b);
                clamped += hit as usize;
                d
            })
            .collect();
        Ok(PmiScore {
            value: per_token_deltas.iter().sum(),
            per_token_deltas,
            clamped,
            truncated: truncated || baseline.truncated,
        })
    }

    pub fn score(&self, y_prefix: &[TokenId], span: &[TokenId]) -> Result<PmiScore, LmError> {
        let baseline = self.baseline(y_prefix)?;
        self.score_with_baseline(&baseline, y_prefix, span)
    }

    /// Scores several spans sharing one baseline computation.
    pub fn score_batch(&self, y_prefix: &[TokenId], spans: &[&[TokenId]]) -> Result<Vec<PmiScore>, LmError> {
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let baseline = self.baseline(y_prefix)?;
        spans
            .iter()
            .map(|span| self.score_with_baseline(&baseline, y_prefix, span))
            .collect()
    }
}

pub fn pmi_score<M: LanguageModel + ?Sized>(
    verify_model: &M,
    tpl: &PromptTemplatePair,
    input: &str,
    y_prefix: &TokenSeq,
    span: &CandidateSpan,
) -> Result<PmiScore, DecodeError> {
    let verifier = PmiVerifier::new(verify_model, tpl, input)?;
    Ok(verifier.score(y_prefix, &span.tokens)?)
}

pub fn pmi_score_batch<M: LanguageModel + ?Sized>(
    verify_model: &M,
    tpl: &PromptTemplatePair,
    input: &str,
    y_prefix: &TokenSeq,
    spans: &[CandidateSpan],
) -> Result<Vec<PmiScore>, DecodeError> {
    if spans.is_empty() {
        return Ok(Vec::new());
    }
    let verifier = PmiVerifier::new(verify_model, tpl, input)?;
    let refs: Vec<&[TokenId]> = spans.iter().map(|s| s.tokens.as_slice()).collect();
    Ok(verifier.score_batch(y_prefix, &refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::LogProbDist;
    use crate::lm::tabular::{Fallback, TabularLm};
    use crate::vocab::Vocab;

    fn vocab() -> Vocab {
        Vocab::from_words("<s> </s> a b x", "</s>", Some("<s>")).unwrap()
    }

    fn tpl() -> PromptTemplatePair {
        PromptTemplatePair::new("toy", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").unwrap()
    }

    fn span(tokens: &[TokenId]) -> CandidateSpan {
        CandidateSpan {
            tokens: TokenSeq(tokens.to_vec()),
            seed_base_logp: 0.0,
            pmi: 0.0,
            q: 0.0,
            terminal: false,
        }
    }

    /// Backward bigram: p(x | a) = 0.9, p(x | b) = 0.1, p(x | <s>) = 0.5.
    fn two_row() -> TabularLm {
        TabularLm::from_rows(
            "v",
            vocab(),
            2,
            &[
                ("<s>", &[("x", 0.5), ("a", 0.5)]),
                ("a", &[("x", 0.9), ("b", 0.1)]),
                ("b", &[("x", 0.1), ("a", 0.9)]),
                ("x", &[("x", 0.3), ("a", 0.2), ("</s>", 0.5)]),
            ],
            Fallback::Uniform,
        )
        .unwrap()
    }

    #[test]
    fn two_row_oracle_values() {
        let lm = two_row();
        let empty = TokenSeq::new();
        let a = pmi_score(&lm, &tpl(), "x", &empty, &span(&[2])).unwrap();
        let b = pmi_score(&lm, &tpl(), "x", &empty, &span(&[3])).unwrap();
        assert!((a.value - (0.9f64 / 0.5).ln()).abs() < 1e-12);
        assert!((b.value - (0.1f64 / 0.5).ln()).abs() < 1e-12);
        assert!(a.value > b.value);
        assert!((a.value - 0.587_786_664_902_119).abs() < 1e-12);
    }

    #[test]
    fn independent_verifier_gives_zero() {
        // unigram: the input likelihood ignores the output entirely
        let lm = TabularLm::from_rows("u", vocab(), 1, &[("", &[("x", 0.3), ("a", 0.7)])], Fallback::Error)
            .unwrap();
        let scores = pmi_score_batch(
            &lm,
            &tpl(),
            "x x",
            &TokenSeq(vec![3]),
            &[span(&[2]), span(&[3, 2]), span(&[2, 1])],
        )
        .unwrap();
        assert!(scores.iter().all(|s| s.value == 0.0));
    }

    #[test]
    fn batch_matches_single() {
        let lm = two_row();
        let prefix = TokenSeq(vec![2]);
        let spans = [span(&[2]), span(&[3]), span(&[2, 3])];
        let batch = pmi_score_batch(&lm, &tpl(), "x", &prefix, &spans).unwrap();
        for (s, b) in spans.iter().zip(&batch) {
            let single = pmi_score(&lm, &tpl(), "x", &prefix, s).unwrap();
            assert_eq!(&single, b);
        }
        assert!(pmi_score_batch(&lm, &tpl(), "x", &prefix, &[]).unwrap().is_empty());
    }

    #[test]
    fn value_is_sum_of_deltas_and_telescopes() {
        let lm = two_row();
        let v = PmiVerifier::new(&lm, &tpl(), "x a x").unwrap();
        let y = [3];
        let s = v.score(&y, &[2]).unwrap();
        assert!((s.value - s.per_token_deltas.iter().sum::<f64>()).abs() < 1e-9);
        let with: f64 = lm.score_tokens(&[3, 2], &v.prompt().target).unwrap().iter().sum();
        let base: f64 = lm.score_tokens(&[3], &v.prompt().target).unwrap().iter().sum();
        assert!((s.value - (with - base)).abs() < 1e-12);
    }

    #[test]
    fn eos_is_dropped_from_backward_output() {
        let lm = two_row();
        let v = PmiVerifier::new(&lm, &tpl(), "x").unwrap();
        let a = v.score(&[], &[2]).unwrap();
        let a_eos = v.score(&[], &[2, 1]).unwrap();
        assert_eq!(a, a_eos);
    }

    #[test]
    fn zero_probability_clamps() {
        // p(x | b) = 0, p(x | <s>) > 0
        let lm = TabularLm::from_rows(
            "v",
            vocab(),
            2,
            &[("<s>", &[("x", 0.5), ("a", 0.5)]), ("b", &[("a", 1.0)]), ("a", &[("x", 1.0)])],
            Fallback::Uniform,
        )
        .unwrap();
        let v = PmiVerifier::new(&lm, &tpl(), "x").unwrap();
        let s = v.score(&[], &[3]).unwrap();
        assert_eq!(s.value, -DELTA_CLAMP);
        assert_eq!(s.clamped, 1);
        // and the other direction: baseline after b is zero, span a restores it
        let s = v.score(&[3], &[2]).unwrap();
        assert_eq!(s.value, DELTA_CLAMP);
    }

    struct Limited {
        inner: TabularLm,
        limit: usize,
    }

    impl LanguageModel for Limited {
        fn id(&self) -> &str {
            "limited"
        }
        fn vocab(&self) -> &Vocab {
            self.inner.vocab()
        }
        fn context_limit(&self) -> Option<usize> {
            Some(self.limit)
        }
        fn next_dist(&self, context: &[TokenId]) -> Result<LogProbDist, LmError> {
            if context.len() >= self.limit {
                return Err(LmError::ContextTooLong { len: context.len() + 1, limit: self.limit });
            }
            self.inner.next_dist(context)
        }
    }

    #[test]
    fn long_prefixes_are_cut_from_the_left() {
        let lm = Limited { inner: two_row(), limit: 3 };
        let v = PmiVerifier::new(&lm, &tpl(), "x").unwrap();
        let s = v.score(&[2, 3, 3, 2], &[3, 2]).unwrap();
        assert!(s.truncated);
        let short = v.score(&[], &[2]).unwrap();
        assert!(!short.truncated);
        let v = PmiVerifier::new(&lm, &tpl(), "x x x x").unwrap();
        assert!(matches!(v.baseline(&[]), Err(LmError::ContextTooLong { .. })));
    }
}
