//! Deterministic n-gram model backed by explicit weight tables.
//!
//! The next-token distribution depends only on the last `order - 1` tokens
//! of the context, left-padded with `bos` when the vocabulary has one.
//! Contexts with no row fall back to a uniform distribution (over every
//! token except `bos`) or to an error, depending on [`Fallback`].
//!
//! Persistence format (JSON):
//!
//! ```json
//! {"order": 2, "vocab": ["<s>", "</s>", "a", "b"], "eos": "</s>", "bos": "<s>",
//!  "rows": [{"context": ["<s>"], "weights": {"a": 0.7, "b": 0.3}}],
//!  "fallback": "uniform"}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::LogProbDist;
use crate::error::LmError;
use crate::lm::{Capabilities, LanguageModel};
use crate::numeric::normalize_dist;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Uniform,
    Error,
}

#[derive(Debug, Clone)]
struct Row {
    weights: Vec<f64>,
    dist: LogProbDist,
}

#[derive(Debug, Clone)]
pub struct TabularLm {
    id: String,
    vocab: Vocab,
    order: usize,
    rows: BTreeMap<Vec<TokenId>, Row>,
    fallback: Fallback,
    uniform: LogProbDist,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    order: usize,
    vocab: Vec<String>,
    #[serde(default = "default_eos")]
    eos: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bos: Option<String>,
    rows: Vec<RowDoc>,
    #[serde(default)]
    fallback: Fallback,
}

#[derive(Debug, Serialize, Deserialize)]
struct RowDoc {
    context: Vec<String>,
    weights: BTreeMap<String, f64>,
}

fn default_eos() -> String {
    "</s>".to_owned()
}

impl TabularLm {
    /// Builds a model from raw weight rows keyed by context window.
    pub fn new(
        id: impl Into<String>,
        vocab: Vocab,
        order: usize,
        rows: Vec<(Vec<TokenId>, Vec<f64>)>,
        fallback: Fallback,
    ) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::BadTable("order must be at least 1".into()));
        }
        let width = order - 1;
        let mut table = BTreeMap::new();
        for (context, weights) in rows {
            let padded_ok = context.len() == width;
            let short_ok = vocab.bos().is_none() && context.len() < width;
            if !(padded_ok || short_ok) {
                return Err(LmError::BadTable(format!(
                    "context {context:?} has length {}, expected {width}",
                    context.len()
                )));
            }
            if let Some(&bad) = context.iter().find(|&&t| !vocab.contains(t)) {
                return Err(LmError::BadToken(bad));
            }
            if weights.len() != vocab.size() {
                return Err(LmError::BadTable(format!(
                    "row {context:?} has {} weights for {} tokens",
                    weights.len(),
                    vocab.size()
                )));
            }
            let dist = normalize_dist(&weights)?;
            if table.insert(context.clone(), Row { weights, dist }).is_some() {
                return Err(LmError::BadTable(format!("duplicate row {context:?}")));
            }
        }
        let uniform_weights: Vec<f64> = (0..vocab.size())
            .map(|i| if Some(i as TokenId) == vocab.bos() { 0.0 } else { 1.0 })
            .collect();
        let uniform = normalize_dist(&uniform_weights)?;
        Ok(Self { id: id.into(), vocab, order, rows: table, fallback, uniform })
    }

    /// Fixture-friendly constructor: contexts are whitespace-separated token
    /// strings, weights name tokens explicitly (unnamed tokens get 0).
    pub fn from_rows(
        id: impl Into<String>,
        vocab: Vocab,
        order: usize,
        rows: &[(&str, &[(&str, f64)])],
        fallback: Fallback,
    ) -> Result<Self, LmError> {
        let mut raw = Vec::with_capacity(rows.len());
        for (ctx, weights) in rows {
            let context = vocab.tokenize(ctx)?.0;
            let mut w = vec![0.0; vocab.size()];
            for (tok, weight) in weights.iter() {
                let id = vocab.id(tok).ok_or_else(|| LmError::UnknownToken((*tok).to_owned()))?;
                w[id as usize] = *weight;
            }
            raw.push((context, w));
        }
        Self::new(id, vocab, order, raw, fallback)
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let doc: TableDoc = serde_json::from_str(text)?;
        let vocab = Vocab::new(doc.vocab, &doc.eos, doc.bos.as_deref())?;
        let mut rows = Vec::with_capacity(doc.rows.len());
        for row in doc.rows {
            let context = row
                .context
                .iter()
                .map(|t| vocab.id(t).ok_or_else(|| LmError::UnknownToken(t.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let mut weights = vec![0.0; vocab.size()];
            for (tok, w) in row.weights {
                let id = vocab.id(&tok).ok_or(LmError::UnknownToken(tok))?;
                weights[id as usize] = w;
            }
            rows.push((context, weights));
        }
        let id = doc.id.unwrap_or_else(|| "tabular".to_owned());
        Self::new(id, vocab, doc.order, rows, doc.fallback)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut lm = Self::from_json(&text)?;
        if lm.id == "tabular" {
            lm.id = format!("toy:{}", path.as_ref().display());
        }
        Ok(lm)
    }

    pub fn to_json(&self) -> String {
        let surface = |id: &TokenId| self.vocab.surface(*id).unwrap_or_default().to_owned();
        let doc = TableDoc {
            id: Some(self.id.clone()),
            order: self.order,
            vocab: self.vocab.tokens().to_vec(),
            eos: surface(&self.vocab.eos()),
            bos: self.vocab.bos().map(|b| surface(&b)),
            rows: self
                .rows
                .iter()
                .map(|(ctx, row)| RowDoc {
                    context: ctx.iter().map(surface).collect(),
                    weights: row
                        .weights
                        .iter()
                        .enumerate()
                        .filter(|(_, w)| **w > 0.0)
                        .map(|(i, w)| (surface(&(i as TokenId)), *w))
                        .collect(),
                })
                .collect(),
            fallback: self.fallback,
        };
        serde_json::to_string_pretty(&doc).expect("table serializes")
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fallback(&self) -> Fallback {
        self.fallback
    }

    /// Raw (unnormalized) weight rows keyed by context window.
    pub fn raw_rows(&self) -> impl Iterator<Item = (&[TokenId], &[f64])> {
        self.rows.iter().map(|(k, r)| (k.as_slice(), r.weights.as_slice()))
    }

    /// The table key for `context`.
    pub fn window(&self, context: &[TokenId]) -> Vec<TokenId> {
        let width = self.order - 1;
        let take = context.len().min(width);
        let mut key = Vec::with_capacity(width);
        if let Some(bos) = self.vocab.bos() {
            key.resize(width - take, bos);
        }
        key.extend_from_slice(&context[context.len() - take..]);
        key
    }
}

impl LanguageModel for TabularLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_batch_scoring: true }
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<LogProbDist, LmError> {
        let eos = self.vocab.eos();
        for (pos, &id) in context.iter().enumerate() {
            if !self.vocab.contains(id) {
                return Err(LmError::BadToken(id));
            }
            if id == eos && pos + 1 != context.len() {
                return Err(LmError::EosInContext(pos));
            }
        }
        let key = self.window(context);
        match self.rows.get(&key) {
            Some(row) => Ok(row.dist.clone()),
            None => match self.fallback {
                Fallback::Uniform => Ok(self.uniform.clone()),
                Fallback::Error => Err(LmError::MissingContext(key)),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::score_sequence;

    fn bigram() -> TabularLm {
        let vocab = Vocab::from_words("<s> </s> a b", "</s>", Some("<s>")).unwrap();
        TabularLm::from_rows(
            "t",
            vocab,
            2,
            &[
                ("<s>", &[("a", 0.7), ("b", 0.3)]),
                ("a", &[("b", 0.5), ("</s>", 0.5)]),
                ("b", &[("</s>", 1.0)]),
            ],
            Fallback::Uniform,
        )
        .unwrap()
    }

    #[test]
    fn table_echo() {
        let lm = bigram();
        let d = lm.next_dist(&[]).unwrap();
        assert!((d.prob(2) - 0.7).abs() < 1e-15);
        assert!((d.prob(3) - 0.3).abs() < 1e-15);
        assert_eq!(d.logp(1), f64::NEG_INFINITY);
    }

    #[test]
    fn uniform_fallback_without_bos() {
        let vocab = Vocab::from_words("a b </s>", "</s>", None).unwrap();
        let lm = TabularLm::from_rows("t", vocab, 2, &[("a", &[("b", 1.0)])], Fallback::Uniform)
            .unwrap();
        let d = lm.next_dist(&[1]).unwrap();
        for id in 0..3 {
            assert!((d.prob(id) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_fallback_skips_bos() {
        let vocab = Vocab::from_words("<s> </s> a b", "</s>", Some("<s>")).unwrap();
        let lm = TabularLm::new("t", vocab, 2, vec![], Fallback::Uniform).unwrap();
        let d = lm.next_dist(&[2]).unwrap();
        assert_eq!(d.logp(0), f64::NEG_INFINITY);
        assert!((d.prob(2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn error_fallback() {
        let vocab = Vocab::from_words("<s> </s> a", "</s>", Some("<s>")).unwrap();
        let lm = TabularLm::new("t", vocab, 2, vec![], Fallback::Error).unwrap();
        assert!(matches!(lm.next_dist(&[2]), Err(LmError::MissingContext(k)) if k == vec![2]));
    }

    #[test]
    fn interior_eos_rejected() {
        let lm = bigram();
        assert!(matches!(lm.next_dist(&[1, 2]), Err(LmError::EosInContext(0))));
    }

    #[test]
    fn deterministic() {
        let lm = bigram();
        assert_eq!(lm.next_dist(&[2]).unwrap(), lm.next_dist(&[2]).unwrap());
    }

    #[test]
    fn window_pads_with_bos() {
        let vocab = Vocab::from_words("<s> </s> a b", "</s>", Some("<s>")).unwrap();
        let lm = TabularLm::new("t", vocab, 3, vec![], Fallback::Uniform).unwrap();
        assert_eq!(lm.window(&[]), vec![0, 0]);
        assert_eq!(lm.window(&[2]), vec![0, 2]);
        assert_eq!(lm.window(&[2, 3, 2]), vec![3, 2]);
    }

    #[test]
    fn single_token_score() {
        let lm = bigram();
        let s = score_sequence(&lm, &[], &[2]).unwrap();
        assert_eq!(s, vec![0.7f64.ln()]);
    }

    #[test]
    fn chain_rule_against_table_product() {
        let lm = bigram();
        let s = score_sequence(&lm, &[], &[2, 3, 1]).unwrap();
        let product: f64 = 0.7 * 0.5 * 1.0;
        assert!((s.iter().sum::<f64>().exp() - product).abs() < 1e-12);
    }

    #[test]
    fn prefix_shift_consistency() {
        let lm = bigram();
        let whole = score_sequence(&lm, &[], &[2, 3, 1]).unwrap();
        let shifted = score_sequence(&lm, &[2], &[3, 1]).unwrap();
        assert_eq!(&whole[1..], &shifted[..]);
    }

    #[test]
    fn zero_prob_target_is_an_error() {
        let lm = bigram();
        assert!(matches!(
            score_sequence(&lm, &[], &[1]),
            Err(LmError::ZeroProbToken { position: 0, token: 1 })
        ));
        assert_eq!(lm.score_tokens(&[], &[1]).unwrap(), vec![f64::NEG_INFINITY]);
    }

    #[test]
    fn rejects_bad_tables() {
        let vocab = Vocab::from_words("<s> </s> a", "</s>", Some("<s>")).unwrap();
        assert!(TabularLm::new("t", vocab.clone(), 2, vec![(vec![2], vec![0.0; 3])], Fallback::Uniform).is_err());
        assert!(TabularLm::new("t", vocab.clone(), 2, vec![(vec![], vec![1.0; 3])], Fallback::Uniform).is_err());
        assert!(TabularLm::new("t", vocab.clone(), 0, vec![], Fallback::Uniform).is_err());
        let dup = vec![(vec![2], vec![1.0; 3]), (vec![2], vec![1.0; 3])];
        assert!(TabularLm::new("t", vocab, 2, dup, Fallback::Uniform).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let lm = bigram();
        let back = TabularLm::from_json(&lm.to_json()).unwrap();
        assert_eq!(back.vocab(), lm.vocab());
        for ctx in [vec![], vec![2], vec![3]] {
            assert_eq!(back.next_dist(&ctx).unwrap(), lm.next_dist(&ctx).unwrap());
        }
    }

    #[test]
    fn json_with_unknown_token_fails() {
        let text = r#"{"order":2,"vocab":["<s>","</s>","a"],"bos":"<s>",
            "rows":[{"context":["<s>"],"weights":{"zz":1.0}}]}"#;
        assert!(matches!(TabularLm::from_json(text), Err(LmError::UnknownToken(t)) if t == "zz"));
    }
}
