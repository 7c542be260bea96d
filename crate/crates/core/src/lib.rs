//! Span-level PMI-verified decoding.
//!
//! At every decode step whose γ-truncated candidate set holds more than one
//! token, the engine rolls out a span for each candidate, scores how much
//! each span raises the teacher-forced likelihood of the input under a
//! backward prompt, and commits the span maximising
//! `log p(seed) + PMI(span, input)`. Greedy, nucleus, beam, contrastive
//! and context-aware decoding are included as baselines.
//!
//! Everything decodes against the [`LanguageModel`] trait. [`TabularLm`] is a
//! deterministic n-gram table used for exact testing; [`bridge::BridgeLm`]
//! talks to an external model process over JSON lines.

pub mod baselines;
pub mod bridge;
pub mod config;
pub mod dist;
pub mod divergence;
pub mod engine;
pub mod error;
pub mod lm;
pub mod numeric;
pub mod pmi;
pub mod span;
pub mod strategy;
pub mod template;
pub mod trace;
pub mod vocab;

pub use config::{DecoderConfig, SpanMode, Strategy};
pub use dist::LogProbDist;
pub use divergence::{candidate_set, is_divergence, CandidateSet};
pub use engine::{decode, rerank, select_span, CandidateSpan, DecodeResult, DecodeStats};
pub use error::{DecodeError, LmError, NumericError, TemplateError};
pub use lm::tabular::{Fallback, TabularLm};
pub use lm::{score_sequence, Capabilities, LanguageModel};
pub use pmi::{pmi_score, pmi_score_batch, PmiScore};
pub use template::{render_backward_prompt, PromptTemplatePair};
pub use trace::{DecodeTrace, Event, EventData};
pub use vocab::{TokenId, TokenSeq, Vocab};
