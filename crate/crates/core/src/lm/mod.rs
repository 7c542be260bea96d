//! The scoring contract every model exposes to the engine.

pub mod tabular;

use crate::dist::LogProbDist;
use crate::error::LmError;
use crate::vocab::{TokenId, TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    /// The model tolerates concurrent scoring calls.
    pub supports_batch_scoring: bool,
}

/// A language model as seen by the decoder: a next-token distribution and
/// teacher-forced scoring of a target continuation. Both must be pure
/// functions of their arguments.
pub trait LanguageModel: Send + Sync {
    /// Opaque model identity, used in traces and reports.
    fn id(&self) -> &str;

    fn vocab(&self) -> &Vocab;

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    /// Maximum context length in tokens, if the model has one.
    fn context_limit(&self) -> Option<usize> {
        None
    }

    /// Full next-token distribution given `context`.
    fn next_dist(&self, context: &[TokenId]) -> Result<LogProbDist, LmError>;

    /// Per-token `log p(target_t | prefix ++ target_<t)`. Zero-probability
    /// tokens come back as `-inf`; [`score_sequence`] turns them into errors.
    fn score_tokens(&self, prefix: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let mut context = Vec::with_capacity(prefix.len() + target.len());
        context.extend_from_slice(prefix);
        let mut out = Vec::with_capacity(target.len());
        for &tok in target {
            out.push(self.next_dist(&context)?.logp(tok));
            context.push(tok);
        }
        Ok(out)
    }

    fn tokenize(&self, text: &str) -> Result<TokenSeq, LmError> {
        self.vocab().tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, LmError> {
        Ok(self.vocab().detokenize(ids))
    }
}

/// Teacher-forced scoring that rejects zero-probability target tokens.
pub fn score_sequence<M: LanguageModel + ?Sized>(
    model: &M,
    prefix: &[TokenId],
    target: &[TokenId],
) -> Result<Vec<f64>, LmError> {
    let scores = model.score_tokens(prefix, target)?;
    if let Some(position) = scores.iter().position(|s| *s == f64::NEG_INFINITY) {
        return Err(LmError::ZeroProbToken { position, token: target[position] });
    }
    Ok(scores)
}
