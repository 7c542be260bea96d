//! Candidate rollouts and dynamic span lengths.
//!
//! Each candidate at a divergence point `i` is continued greedily until the
//! rollout meets its own first risk step `r` (a position `j > i` whose
//! candidate set has more than one member), hits eos, or reaches the cap.
//! In every case `r` is the position just after the last rollout token, so
//! an eos- or cap-terminated rollout yields a span that contains all of its
//! tokens. The span length is then `k + 1` with `k = r - i - 1`, taking the
//! minimum `r` (Left) or the maximum (Right).

use serde::{Deserialize, Serialize};

use crate::config::SpanMode;
use crate::divergence::{candidate_set_at, CandidateSet};
use crate::error::{DecodeError, LmError};
use crate::lm::LanguageModel;
use crate::vocab::{TokenId, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Absolute position of the seed token.
    pub start: usize,
    pub tokens: TokenSeq,
    /// Position of the first risk step, when one was met before eos or cap.
    pub first_risk: Option<usize>,
    /// Stopped at eos or at the cap rather than at a risk step.
    pub ended: bool,
    pub hit_cap: bool,
}

impl Rollout {
    pub fn seed(&self) -> TokenId {
        self.tokens[0]
    }

    /// `r_m`: the risk position, or the position after the last token when
    /// the rollout ended without one.
    pub fn risk_step(&self) -> usize {
        self.first_risk.unwrap_or(self.start + self.tokens.len())
    }
}

/// First-risk positions, one per candidate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskSet {
    pub entries: Vec<(TokenId, usize)>,
}

impl RiskSet {
    pub fn from_rollouts(rollouts: &[Rollout]) -> Self {
        Self { entries: rollouts.iter().map(|r| (r.seed(), r.risk_step())).collect() }
    }

    pub fn min(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.1).min()
    }

    pub fn max(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.1).max()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A rolled-out span and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpan {
    pub tokens: TokenSeq,
    /// `log p(seed | prefix)` under the forward model.
    pub seed_base_logp: f64,
    pub pmi: f64,
    /// `seed_base_logp + pmi`.
    pub q: f64,
    /// Ends with eos.
    pub terminal: bool,
}

impl CandidateSpan {
    pub fn seed(&self) -> TokenId {
        self.tokens[0]
    }

    pub fn set_pmi(&mut self, pmi: f64) {
        self.pmi = pmi;
        self.q = self.seed_base_logp + pmi;
    }
}

/// Greedy continuation of `context ++ [seed]` up to the first risk step,
/// eos, or `cap` tokens. `step` is the seed's absolute output position.
pub fn rollout_candidate<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    step: usize,
    seed: TokenId,
    gamma: f64,
    cap: usize,
) -> Result<Rollout, LmError> {
    let eos = model.vocab().eos();
    let mut ctx = context.to_vec();
    let mut tokens = TokenSeq(vec![seed]);
    ctx.push(seed);
    loop {
        if tokens.last() == Some(eos) {
            return Ok(Rollout { start: step, tokens, first_risk: None, ended: true, hit_cap: false });
        }
        if tokens.len() >= cap {
            return Ok(Rollout { start: step, tokens, first_risk: None, ended: true, hit_cap: true });
        }
        let position = step + tokens.len();
        let cs = candidate_set_at(&model.next_dist(&ctx)?, gamma, position);
        if cs.len() > 1 {
            return Ok(Rollout {
                start: step,
                tokens,
                first_risk: Some(position),
                ended: false,
                hit_cap: false,
            });
        }
        let next = cs.argmax();
        tokens.push(next);
        ctx.push(next);
    }
}

/// Continues a rollout greedily, ignoring divergence, until it holds
/// `target_len` tokens or ends with eos. Used when a Right-mode span runs
/// past a rollout's own risk step.
pub fn extend_rollout<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    rollout: &mut Rollout,
    target_len: usize,
) -> Result<(), LmError> {
    let eos = model.vocab().eos();
    if rollout.tokens.len() >= target_len || rollout.tokens.last() == Some(eos) {
        return Ok(());
    }
    let mut ctx = context.to_vec();
    ctx.extend_from_slice(&rollout.tokens);
    while rollout.tokens.len() < target_len && rollout.tokens.last() != Some(eos) {
        let next = model.next_dist(&ctx)?.argmax();
        rollout.tokens.push(next);
        ctx.push(next);
    }
    Ok(())
}

/// Span length offset `k` for a divergence at `step`.
pub fn dynamic_k(risks: &RiskSet, step: usize, mode: SpanMode) -> Result<usize, DecodeError> {
    let r = match mode {
        SpanMode::Token => return Ok(0),
        SpanMode::Left => risks.min(),
        SpanMode::Right => risks.max(),
    }
    .ok_or(DecodeError::EmptyRiskSet)?;
    // every r_m > step by construction
    Ok(r.saturating_sub(step + 1))
}

/// First `k + 1` tokens of every rollout (fewer when the rollout ended
/// sooner), paired with the seed's base log-prob from `cs`.
pub fn build_spans(rollouts: &[Rollout], k: usize, cs: &CandidateSet, eos: TokenId) -> Vec<CandidateSpan> {
    rollouts
        .iter()
        .map(|r| {
            let take = (k + 1).min(r.tokens.len());
            let tokens = TokenSeq(r.tokens[..take].to_vec());
            let seed_base_logp = cs.base_logp_of(r.seed()).unwrap_or(f64::NEG_INFINITY);
            CandidateSpan {
                terminal: tokens.last() == Some(eos),
                tokens,
                seed_base_logp,
                pmi: 0.0,
                q: seed_base_logp,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tabular::{Fallback, TabularLm};
    use crate::vocab::Vocab;
    use proptest::prelude::*;

    fn risks(v: &[usize]) -> RiskSet {
        RiskSet { entries: v.iter().enumerate().map(|(i, &r)| (i as TokenId, r)).collect() }
    }

    #[test]
    fn dynamic_k_formulas() {
        let i = 10;
        let r = risks(&[i + 3, i + 5]);
        assert_eq!(dynamic_k(&r, i, SpanMode::Left).unwrap(), 2);
        assert_eq!(dynamic_k(&r, i, SpanMode::Right).unwrap(), 4);
        let r = risks(&[i + 1, i + 1]);
        assert_eq!(dynamic_k(&r, i, SpanMode::Left).unwrap(), 0);
        assert_eq!(dynamic_k(&r, i, SpanMode::Right).unwrap(), 0);
        let r = risks(&[i + 6]);
        assert_eq!(dynamic_k(&r, i, SpanMode::Left).unwrap(), 5);
        assert_eq!(dynamic_k(&r, i, SpanMode::Right).unwrap(), 5);
        assert!(matches!(
            dynamic_k(&RiskSet::default(), i, SpanMode::Left),
            Err(DecodeError::EmptyRiskSet)
        ));
    }

    fn rollout(len: usize, ended: bool) -> Rollout {
        Rollout {
            start: 0,
            tokens: TokenSeq((0..len as TokenId).map(|t| t + 2).collect()),
            first_risk: if ended { None } else { Some(len) },
            ended,
            hit_cap: false,
        }
    }

    fn cs() -> CandidateSet {
        CandidateSet { step: 0, members: vec![2, 3], base_logp: vec![-0.5, -1.0] }
    }

    #[test]
    fn build_spans_prefix_take() {
        let spans = build_spans(&[rollout(3, false), rollout(5, false)], 2, &cs(), 1);
        assert_eq!(spans.iter().map(|s| s.tokens.len()).collect::<Vec<_>>(), vec![3, 3]);
        assert_eq!(spans[0].seed_base_logp, -0.5);
        assert_eq!(spans[0].q, -0.5);
    }

    #[test]
    fn build_spans_eos_truncation() {
        let mut r = rollout(1, true);
        r.tokens.push(1);
        let spans = build_spans(&[r], 4, &cs(), 1);
        assert_eq!(spans[0].tokens.as_slice(), &[2, 1]);
        assert!(spans[0].terminal);
    }

    #[test]
    fn build_spans_k0_is_token_level() {
        let spans = build_spans(&[rollout(3, false), rollout(2, false)], 0, &cs(), 1);
        assert!(spans.iter().all(|s| s.tokens.len() == 1));
    }

    fn chain_vocab() -> Vocab {
        Vocab::from_words("<s> </s> a b c d e f", "</s>", Some("<s>")).unwrap()
    }

    #[test]
    fn deterministic_rollout_runs_to_eos() {
        let lm = TabularLm::from_rows(
            "t",
            chain_vocab(),
            2,
            &[("a", &[("c", 1.0)]), ("c", &[("d", 1.0)]), ("d", &[("</s>", 1.0)])],
            Fallback::Error,
        )
        .unwrap();
        let r = rollout_candidate(&lm, &[], 4, 2, 0.3, 64).unwrap();
        assert_eq!(r.tokens.as_slice(), &[2, 4, 5, 1]);
        assert!(r.ended && !r.hit_cap);
        // eos sits at position 7; r is one past it
        assert_eq!(r.risk_step(), 8);
    }

    #[test]
    fn rollout_stops_at_first_split() {
        // a -> c -> d -> {e, f} : the split is three positions after the seed
        let lm = TabularLm::from_rows(
            "t",
            chain_vocab(),
            2,
            &[
                ("a", &[("c", 1.0)]),
                ("c", &[("d", 0.9), ("e", 0.1)]),
                ("d", &[("e", 0.6), ("f", 0.4)]),
            ],
            Fallback::Error,
        )
        .unwrap();
        let i = 2;
        let r = rollout_candidate(&lm, &[], i, 2, 0.3, 64).unwrap();
        assert_eq!(r.first_risk, Some(i + 3));
        assert_eq!(r.tokens.len(), 3);
        assert!(!r.ended);
    }

    #[test]
    fn cap_of_one_keeps_only_seed() {
        let lm = TabularLm::from_rows("t", chain_vocab(), 2, &[("a", &[("c", 1.0)])], Fallback::Uniform)
            .unwrap();
        let r = rollout_candidate(&lm, &[], 0, 2, 0.3, 1).unwrap();
        assert_eq!(r.tokens.as_slice(), &[2]);
        assert_eq!(r.risk_step(), 1);
        assert!(r.hit_cap);
    }

    #[test]
    fn extend_runs_through_splits() {
        let lm = TabularLm::from_rows(
            "t",
            chain_vocab(),
            2,
            &[("a", &[("c", 0.5), ("d", 0.5)]), ("c", &[("</s>", 1.0)])],
            Fallback::Error,
        )
        .unwrap();
        let mut r = rollout_candidate(&lm, &[], 0, 2, 0.3, 64).unwrap();
        assert_eq!(r.first_risk, Some(1));
        extend_rollout(&lm, &[], &mut r, 5).unwrap();
        assert_eq!(r.tokens.as_slice(), &[2, 4, 1]);
    }

    proptest! {
        #[test]
        fn left_never_exceeds_right(step in 0usize..50, offs in prop::collection::vec(1usize..40, 1..6)) {
            let r = RiskSet { entries: offs.iter().map(|o| (0, step + o)).collect() };
            let l = dynamic_k(&r, step, SpanMode::Left).unwrap();
            let rr = dynamic_k(&r, step, SpanMode::Right).unwrap();
            prop_assert!(l <= rr);
        }
    }
}
