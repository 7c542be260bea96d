use thiserror::Error;

use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("every weight is zero")]
    AllZero,
    #[error("weight {index} is negative or NaN: {value}")]
    BadValue { index: usize, value: f64 },
    #[error("empty input")]
    Empty,
    #[error("distribution mass {0} is not 1")]
    NotNormalized(f64),
    #[error("distribution has {got} entries, vocabulary has {expected}")]
    WrongLength { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("context of {len} tokens exceeds model limit {limit}")]
    ContextTooLong { len: usize, limit: usize },
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
    #[error("target token {token} at position {position} has zero probability")]
    ZeroProbToken { position: usize, token: TokenId },
    #[error("no table row for context {0:?}")]
    MissingContext(Vec<TokenId>),
    #[error("token id {0} outside vocabulary")]
    BadToken(TokenId),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("end-of-sequence token inside context at position {0}")]
    EosInContext(usize),
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid model table: {0}")]
    BadTable(String),
    #[error("bridge protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name:?}: placeholder {placeholder} must appear exactly once in the {which} template")]
    MissingPlaceholder {
        name: String,
        placeholder: &'static str,
        which: &'static str,
    },
    #[error("template {0:?}: [INCOMPLETE_OUTPUT] must precede [INPUT] in the backward template")]
    PlaceholderOrder(String),
    #[error("input does not tokenize identically standalone and in context (first differing token {0})")]
    TokenizationMismatch(usize),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("risk set is empty")]
    EmptyRiskSet,
    #[error("span list is empty")]
    EmptySpanList,
    #[error("models do not share a vocabulary")]
    VocabMismatch,
    #[error("strategy {0} needs a second model")]
    MissingModel(&'static str),
    #[error("strategy {0} is not handled here")]
    WrongStrategy(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}
