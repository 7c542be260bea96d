use std::cmp::Ordering;

use crate::error::NumericError;
use crate::vocab::TokenId;

const MASS_TOLERANCE: f64 = 1e-9;

/// Next-token distribution in natural-log space, one entry per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbDist {
    values: Vec<f64>,
}

impl LogProbDist {
    /// Wraps already-normalized log values; callers inside the crate
    /// guarantee the mass invariant.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Validates and wraps log values produced elsewhere (e.g. a bridge).
    pub fn from_log_values(values: Vec<f64>) -> Result<Self, NumericError> {
        if values.is_empty() {
            return Err(NumericError::Empty);
        }
        for (index, &value) in values.iter().enumerate() {
            if value.is_nan() || value == f64::INFINITY {
                return Err(NumericError::BadValue { index, value });
            }
        }
        let mass: f64 = values.iter().map(|v| v.exp()).sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(NumericError::NotNormalized(mass));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn logp(&self, id: TokenId) -> f64 {
        self.values.get(id as usize).copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.logp(id).exp()
    }

    /// Ids with finite log-probability.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, _)| i)
    }

    /// Most probable id; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > self.values[best] {
                best = i;
            }
        }
        best as TokenId
    }

    pub fn max_logp(&self) -> f64 {
        self.values[self.argmax() as usize]
    }

    /// Ids in descending probability, ties by ascending id. Zero-probability
    /// ids are left out.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = self.support().map(|i| i as TokenId).collect();
        ids.sort_by(|&a, &b| {
            self.logp(b)
                .partial_cmp(&self.logp(a))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        ids
    }
}
