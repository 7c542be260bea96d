//! Divergence points: steps where more than one token clears the relative
//! probability threshold `p(v) >= gamma * max_w p(w)`.

use serde::{Deserialize, Serialize};

use crate::dist::LogProbDist;
use crate::vocab::TokenId;

/// Relative slack on the threshold comparison, so that values equal to the
/// threshold up to log/exp round-off are kept.
const THRESHOLD_SLACK: f64 = 1e-12;

/// γ-truncated candidate tokens at one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub step: usize,
    /// Descending base log-prob, ties by ascending id. `members[0]` is the argmax.
    pub members: Vec<TokenId>,
    /// `log p(member | context)`, parallel to `members`.
    pub base_logp: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.members.contains(&id)
    }

    pub fn argmax(&self) -> TokenId {
        self.members[0]
    }

    pub fn base_logp_of(&self, id: TokenId) -> Option<f64> {
        self.members.iter().position(|&m| m == id).map(|i| self.base_logp[i])
    }

    /// Keeps only the first `n` members.
    pub fn truncate(&mut self, n: usize) {
        self.members.truncate(n.max(1));
        self.base_logp.truncate(n.max(1));
    }
}

pub fn candidate_set(dist: &LogProbDist, gamma: f64) -> CandidateSet {
    candidate_set_at(dist, gamma, 0)
}

/// [`candidate_set`] tagged with the decode step it belongs to.
pub fn candidate_set_at(dist: &LogProbDist, gamma: f64, step: usize) -> CandidateSet {
    let max_p = dist.max_logp().exp();
    let threshold = gamma * max_p * (1.0 - THRESHOLD_SLACK);
    let members: Vec<TokenId> = dist
        .ranked()
        .into_iter()
        .take_while(|&id| dist.prob(id) >= threshold)
        .collect();
    let base_logp = members.iter().map(|&id| dist.logp(id)).collect();
    CandidateSet { step, members, base_logp }
}

pub fn is_divergence(cs: &CandidateSet) -> bool {
    cs.members.len() > 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::normalize_dist;
    use proptest::prelude::*;

    fn set(probs: &[f64], gamma: f64) -> Vec<TokenId> {
        let mut m = candidate_set(&normalize_dist(probs).unwrap(), gamma).members;
        m.sort();
        m
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(set(&[0.6, 0.3, 0.1], 0.5), vec![0, 1]);
        assert_eq!(set(&[0.7, 0.2, 0.1], 0.3), vec![0]);
        assert_eq!(set(&[0.5, 0.5], 1.0), vec![0, 1]);
    }

    #[test]
    fn ordering_is_descending_then_by_id() {
        let cs = candidate_set(&normalize_dist(&[0.2, 0.4, 0.4]).unwrap(), 0.1);
        assert_eq!(cs.members, vec![1, 2, 0]);
        assert_eq!(cs.base_logp_of(0), Some(0.2f64.ln()));
        assert_eq!(cs.argmax(), 1);
    }

    #[test]
    fn divergence_flag() {
        let single = CandidateSet { step: 0, members: vec![0], base_logp: vec![0.0] };
        assert!(!is_divergence(&single));
        let two = CandidateSet { step: 0, members: vec![0, 1], base_logp: vec![-0.1, -2.0] };
        assert!(is_divergence(&two));
        let three = CandidateSet { step: 0, members: vec![0, 1, 2], base_logp: vec![-1.0; 3] };
        assert!(is_divergence(&three));
    }

    fn weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], 2..10)
            .prop_filter("some mass", |w| w.iter().any(|&x| x > 0.0))
    }

    proptest! {
        #[test]
        fn monotone_in_gamma(w in weights(), g1 in 0.01f64..=1.0, g2 in 0.01f64..=1.0) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let d = normalize_dist(&w).unwrap();
            let wide = candidate_set(&d, lo);
            let narrow = candidate_set(&d, hi);
            prop_assert!(narrow.members.iter().all(|m| wide.contains(*m)));
            prop_assert!(narrow.contains(d.argmax()));
        }

        #[test]
        fn scale_invariant(w in weights(), c in 0.1f64..100.0, g in 0.05f64..=1.0) {
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let a = candidate_set(&normalize_dist(&w).unwrap(), g).members;
            let b = candidate_set(&normalize_dist(&scaled).unwrap(), g).members;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tiny_gamma_is_full_support(w in weights()) {
            let d = normalize_dist(&w).unwrap();
            let cs = candidate_set(&d, 1e-300);
            prop_assert_eq!(cs.len(), d.support().count());
        }
    }
}
