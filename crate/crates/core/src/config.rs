use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DecodeError;

/// Candidate-set truncation grid searched for CD, also the default γ sweep.
pub const GAMMA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Nucleus,
    Beam,
    Cd,
    Cad,
    DiverLeft,
    DiverRight,
    DiverToken,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Greedy,
        Strategy::Nucleus,
        Strategy::Beam,
        Strategy::Cd,
        Strategy::Cad,
        Strategy::DiverLeft,
        Strategy::DiverRight,
        Strategy::DiverToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Nucleus => "nucleus",
            Strategy::Beam => "beam",
            Strategy::Cd => "cd",
            Strategy::Cad => "cad",
            Strategy::DiverLeft => "diver-left",
            Strategy::DiverRight => "diver-right",
            Strategy::DiverToken => "diver-token",
        }
    }

    /// Span mode for the verified strategies, `None` for baselines.
    pub fn span_mode(self) -> Option<SpanMode> {
        match self {
            Strategy::DiverLeft => Some(SpanMode::Left),
            Strategy::DiverRight => Some(SpanMode::Right),
            Strategy::DiverToken => Some(SpanMode::Token),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| DecodeError::BadConfig(format!("unknown strategy {s:?}")))
    }
}

/// How the span length `k` is chosen at a divergence point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanMode {
    /// `k` from the earliest first-risk step.
    Left,
    /// `k` from the latest first-risk step.
    Right,
    /// `k = 0`: spans are the candidate tokens alone.
    Token,
}

/// Decoding configuration shared by every strategy. Fields a strategy does
/// not use are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub strategy: Strategy,
    /// Relative candidate-set threshold in (0, 1].
    pub gamma: f64,
    pub top_p: f64,
    /// CAD contrast weight.
    pub alpha: f64,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Cap on rollout length at a divergence point.
    pub max_span_len: usize,
    pub rng_seed: u64,
    /// Model spec of a separate verifier (or CD amateur); `None` reuses the
    /// forward model.
    pub verifier: Option<String>,
    /// Sample spans from softmax(q) instead of taking the argmax.
    pub sample_spans: bool,
    /// Optional cap on |candidate set| for speed experiments.
    pub max_candidates: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DiverRight,
            gamma: 0.3,
            top_p: 0.9,
            alpha: 0.5,
            beam_width: 4,
            max_new_tokens: 64,
            max_span_len: 64,
            rng_seed: 0,
            verifier: None,
            sample_spans: false,
            max_candidates: None,
        }
    }
}

impl DecoderConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.gamma) {
            return Err(DecodeError::BadConfig(format!("gamma {} not in (0,1]", self.gamma)));
        }
        if !unit(self.top_p) {
            return Err(DecodeError::BadConfig(format!("top_p {} not in (0,1]", self.top_p)));
        }
        if !(self.alpha >= 0.0) {
            return Err(DecodeError::BadConfig(format!("alpha {} is negative", self.alpha)));
        }
        if self.beam_width == 0 || self.max_new_tokens == 0 || self.max_span_len == 0 {
            return Err(DecodeError::BadConfig(
                "beam_width, max_new_tokens and max_span_len must be positive".into(),
            ));
        }
        if self.max_candidates == Some(0) {
            return Err(DecodeError::BadConfig("max_candidates must be positive".into()));
        }
        Ok(())
    }
}
