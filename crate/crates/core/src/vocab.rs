use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::LmError;

pub type TokenId = u32;

/// A finite vocabulary of atomic, whitespace-free token strings.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    bos: Option<TokenId>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.eos == other.eos && self.bos == other.bos
    }
}

impl Eq for Vocab {}

impl Vocab {
    /// Builds a vocabulary. `eos` must name one of `tokens`; `bos`, when
    /// given, must name a different one.
    pub fn new(tokens: Vec<String>, eos: &str, bos: Option<&str>) -> Result<Self, LmError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(LmError::BadVocab(format!("token {tok:?} is empty or has whitespace")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(LmError::BadVocab(format!("duplicate token {tok:?}")));
            }
        }
        let eos = *index
            .get(eos)
            .ok_or_else(|| LmError::BadVocab(format!("eos {eos:?} not in vocabulary")))?;
        let bos = match bos {
            Some(b) => {
                let id = *index
                    .get(b)
                    .ok_or_else(|| LmError::BadVocab(format!("bos {b:?} not in vocabulary")))?;
                if id == eos {
                    return Err(LmError::BadVocab("bos and eos coincide".into()));
                }
                Some(id)
            }
            None => None,
        };
        Ok(Self { tokens, index, eos, bos })
    }

    /// Shorthand for tests and fixtures: whitespace-separated token list.
    pub fn from_words(words: &str, eos: &str, bos: Option<&str>) -> Result<Self, LmError> {
        Self::new(words.split_whitespace().map(str::to_owned).collect(), eos, bos)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn bos(&self) -> Option<TokenId> {
        self.bos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Whitespace tokenization; every word must be a vocabulary entry.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, LmError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| LmError::UnknownToken(w.to_owned())))
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSeq)
    }

    /// Space-joined surfaces. Unknown ids render as `<id>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<String> = ids
            .iter()
            .map(|&id| match self.surface(id) {
                Some(s) => s.to_owned(),
                None => format!("<{id}>"),
            })
            .collect();
        words.join(" ")
    }

    /// Checks the output-sequence invariants: ids in range, eos only last.
    pub fn validate(&self, seq: &[TokenId]) -> Result<(), LmError> {
        for (pos, &id) in seq.iter().enumerate() {
            if !self.contains(id) {
                return Err(LmError::BadToken(id));
            }
            if id == self.eos && pos + 1 != seq.len() {
                return Err(LmError::EosInContext(pos));
            }
        }
        Ok(())
    }
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn last(&self) -> Option<TokenId> {
        self.0.last().copied()
    }

    pub fn ends_with_eos(&self, vocab: &Vocab) -> bool {
        self.last() == Some(vocab.eos())
    }

    /// The sequence with one trailing eos removed, if present.
    pub fn without_eos(&self, vocab: &Vocab) -> &[TokenId] {
        match self.0.split_last() {
            Some((&last, rest)) if last == vocab.eos() => rest,
            _ => &self.0,
        }
    }

    pub fn concat(&self, tail: &[TokenId]) -> TokenSeq {
        let mut v = Vec::with_capacity(self.0.len() + tail.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(tail);
        TokenSeq(v)
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_words("<s> </s> a b c", "</s>", Some("<s>")).unwrap()
    }

    #[test]
    fn ids_are_dense_and_unique() {
        let v = vocab();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.eos(), 1);
        assert_eq!(v.bos(), Some(0));
        assert!(Vocab::from_words("a a </s>", "</s>", None).is_err());
    }

    #[test]
    fn eos_and_bos_must_be_members_and_distinct() {
        assert!(Vocab::from_words("a b", "</s>", None).is_err());
        assert!(Vocab::from_words("a </s>", "</s>", Some("<s>")).is_err());
        assert!(Vocab::from_words("a </s>", "</s>", Some("</s>")).is_err());
    }

    #[test]
    fn tokenize_roundtrip() {
        let v = vocab();
        let seq = v.tokenize("a  b\tc").unwrap();
        assert_eq!(seq.as_slice(), &[2, 3, 4]);
        assert_eq!(v.detokenize(&seq), "a b c");
        assert!(matches!(v.tokenize("a z"), Err(LmError::UnknownToken(w)) if w == "z"));
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn validate_rejects_interior_eos() {
        let v = vocab();
        assert!(v.validate(&[2, 3, 1]).is_ok());
        assert!(matches!(v.validate(&[2, 1, 3]), Err(LmError::EosInContext(1))));
        assert!(matches!(v.validate(&[9]), Err(LmError::BadToken(9))));
    }

    #[test]
    fn without_eos_strips_one_trailing_eos() {
        let v = vocab();
        let s = TokenSeq(vec![2, 1]);
        assert_eq!(s.without_eos(&v), &[2]);
        assert_eq!(TokenSeq(vec![2, 3]).without_eos(&v), &[2, 3]);
    }
}
