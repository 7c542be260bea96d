//! Log-domain helpers. All engine arithmetic is natural log in `f64`;
//! `f64::NEG_INFINITY` marks excluded tokens.

use crate::dist::LogProbDist;
use crate::error::NumericError;

/// Normalizes non-negative weights into a log-probability distribution.
pub fn normalize_dist(raw: &[f64]) -> Result<LogProbDist, NumericError> {
    if raw.is_empty() {
        return Err(NumericError::Empty);
    }
    for (index, &value) in raw.iter().enumerate() {
        if value.is_nan() || value < 0.0 || value.is_infinite() {
            return Err(NumericError::BadValue { index, value });
        }
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(NumericError::AllZero);
    }
    let values = raw
        .iter()
        .map(|&w| if w > 0.0 { (w / total).ln() } else { f64::NEG_INFINITY })
        .collect();
    Ok(LogProbDist::from_normalized(values))
}

/// Numerically stable `ln Σ exp(v)`. Entries equal to `-inf` contribute nothing.
pub fn logsumexp(values: &[f64]) -> Result<f64, NumericError> {
    let max = values
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.max(v))))
        .ok_or(NumericError::Empty)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}
