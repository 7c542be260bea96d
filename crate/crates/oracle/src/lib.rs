//! Brute-force reference implementations for checking the decoding engine.
//!
//! Everything here works straight from a [`TabularLm`]'s raw weight rows:
//! probabilities are `w / Σw` looked up by hand, likelihoods are explicit
//! products, and the verified decode loop is replayed step by step from its
//! definition. None of the engine's scoring, rollout, or selection code is
//! called. Only `TabularLm`, `Vocab` and template data are shared.

pub mod fixtures;

use std::collections::HashMap;

use diver_core::config::{DecoderConfig, SpanMode};
use diver_core::lm::tabular::Fallback;
use diver_core::template::{INCOMPLETE_OUTPUT, INPUT};
use diver_core::{PromptTemplatePair, TabularLm, TokenId, TokenSeq, Vocab};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("input token {token} at position {position} has zero probability")]
    ZeroProb { position: usize, token: TokenId },
    #[error("enumeration of {0} sequences exceeds the configured bound")]
    ExplosionGuard(f64),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("no row for context {0:?} and fallback is an error")]
    MissingRow(Vec<TokenId>),
    #[error("strategy {0} is not a verified strategy")]
    NotVerified(String),
}

/// Plain probability tables read out of a [`TabularLm`].
pub struct RefTable<'a> {
    vocab: &'a Vocab,
    width: usize,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
    uniform_fallback: bool,
}

impl<'a> RefTable<'a> {
    pub fn new(model: &'a TabularLm) -> Self {
        let rows = model
            .raw_rows()
            .map(|(ctx, w)| {
                let total: f64 = w.iter().sum();
                (ctx.to_vec(), w.iter().map(|x| x / total).collect())
            })
            .collect();
        Self {
            vocab: diver_core::LanguageModel::vocab(model),
            width: model.order() - 1,
            rows,
            uniform_fallback: model.fallback() == Fallback::Uniform,
        }
    }

    fn key(&self, context: &[TokenId]) -> Vec<TokenId> {
        let mut key = Vec::new();
        if context.len() < self.width {
            if let Some(bos) = self.vocab.bos() {
                for _ in 0..self.width - context.len() {
                    key.push(bos);
                }
            }
            key.extend_from_slice(context);
        } else {
            key.extend_from_slice(&context[context.len() - self.width..]);
        }
        key
    }

    /// Full next-token probability vector.
    pub fn probs(&self, context: &[TokenId]) -> Result<Vec<f64>, OracleError> {
        let key = self.key(context);
        if let Some(row) = self.rows.get(&key) {
            return Ok(row.clone());
        }
        if !self.uniform_fallback {
            return Err(OracleError::MissingRow(key));
        }
        let n = self.vocab.size() - usize::from(self.vocab.bos().is_some());
        Ok((0..self.vocab.size())
            .map(|i| if Some(i as TokenId) == self.vocab.bos() { 0.0 } else { 1.0 / n as f64 })
            .collect())
    }

    pub fn prob(&self, context: &[TokenId], token: TokenId) -> Result<f64, OracleError> {
        Ok(self.probs(context)?[token as usize])
    }

    /// `p(target | prefix)` as an explicit product.
    pub fn sequence_prob(&self, prefix: &[TokenId], target: &[TokenId]) -> Result<f64, OracleError> {
        let mut ctx = prefix.to_vec();
        let mut product = 1.0;
        for (position, &tok) in target.iter().enumerate() {
            let p = self.prob(&ctx, tok)?;
            if p == 0.0 {
                return Err(OracleError::ZeroProb { position, token: tok });
            }
            product *= p;
            ctx.push(tok);
        }
        Ok(product)
    }
}

fn words(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>, OracleError> {
    text.split_whitespace()
        .map(|w| vocab.id(w).ok_or_else(|| OracleError::UnknownWord(w.to_owned())))
        .collect()
}

fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best as TokenId
}

fn candidates(probs: &[f64], gamma: f64) -> Vec<TokenId> {
    let max = probs.iter().cloned().fold(0.0, f64::max);
    (0..probs.len())
        .filter(|&i| probs[i] > 0.0 && probs[i] >= gamma * max)
        .map(|i| i as TokenId)
        .collect()
}

/// Backward prompt for a given output, split at the input:
/// (prefix ids, input ids).
fn backward_split(
    vocab: &Vocab,
    tpl: &PromptTemplatePair,
    input: &str,
    output: &[TokenId],
) -> Result<(Vec<TokenId>, Vec<TokenId>), OracleError> {
    let output: Vec<TokenId> = match output.last() {
        Some(&t) if t == vocab.eos() => output[..output.len() - 1].to_vec(),
        _ => output.to_vec(),
    };
    let out_text: Vec<&str> = output.iter().map(|&t| vocab.surface(t).unwrap_or("")).collect();
    let cut = tpl.backward.find(INPUT).unwrap_or(tpl.backward.len());
    let before = tpl.backward[..cut].replace(INCOMPLETE_OUTPUT, &out_text.join(" "));
    Ok((words(vocab, &before)?, words(vocab, input)?))
}

/// `log p(x | y_prefix ++ span) / p(x | y_prefix)` from explicit products.
pub fn oracle_pmi(
    model: &TabularLm,
    tpl: &PromptTemplatePair,
    input: &str,
    y_prefix: &[TokenId],
    span: &[TokenId],
) -> Result<f64, OracleError> {
    let table = RefTable::new(model);
    oracle_pmi_with(&table, tpl, input, y_prefix, span)
}

fn oracle_pmi_with(
    table: &RefTable<'_>,
    tpl: &PromptTemplatePair,
    input: &str,
    y_prefix: &[TokenId],
    span: &[TokenId],
) -> Result<f64, OracleError> {
    let mut full = y_prefix.to_vec();
    full.extend_from_slice(span);
    let (with_prefix, x) = backward_split(table.vocab, tpl, input, &full)?;
    let (base_prefix, _) = backward_split(table.vocab, tpl, input, y_prefix)?;
    let with = table.sequence_prob(&with_prefix, &x)?;
    let base = table.sequence_prob(&base_prefix, &x)?;
    Ok((with / base).ln())
}

/// Replays verified decoding from its definition: at every step with more
/// than one γ-candidate, roll each candidate out greedily to eos or the
/// budget, find its first risk step, cut spans to `k + 1` tokens, score
/// `ln p(seed) + PMI`, commit the best (lowest id on ties).
pub fn oracle_decode(
    model: &TabularLm,
    verify_model: &TabularLm,
    tpl: &PromptTemplatePair,
    input: &str,
    cfg: &DecoderConfig,
) -> Result<TokenSeq, OracleError> {
    let mode = cfg
        .strategy
        .span_mode()
        .ok_or_else(|| OracleError::NotVerified(cfg.strategy.to_string()))?;
    let fwd = RefTable::new(model);
    let ver = RefTable::new(verify_model);
    let vocab = fwd.vocab;
    let eos = vocab.eos();
    let prompt = words(vocab, &tpl.forward.replace(INPUT, input))?;

    let ctx_of = |y: &[TokenId], extra: &[TokenId]| -> Vec<TokenId> {
        let mut c = prompt.clone();
        c.extend_from_slice(y);
        c.extend_from_slice(extra);
        c
    };

    let mut y: Vec<TokenId> = Vec::new();
    while y.len() < cfg.max_new_tokens && y.last() != Some(&eos) {
        let i = y.len();
        let probs = fwd.probs(&ctx_of(&y, &[]))?;
        let mut cands = candidates(&probs, cfg.gamma);
        if let Some(n) = cfg.max_candidates {
            // keep the n most probable, ties to the lower id
            let mut by_prob = cands.clone();
            by_prob.sort_by(|&a, &b| probs[b as usize].partial_cmp(&probs[a as usize]).unwrap().then(a.cmp(&b)));
            by_prob.truncate(n.max(1));
            cands.retain(|c| by_prob.contains(c));
        }
        if cands.len() == 1 {
            y.push(cands[0]);
            continue;
        }

        let budget = cfg.max_span_len.min(cfg.max_new_tokens - i);
        let mut paths = Vec::new();
        let mut risks = Vec::new();
        for &c in &cands {
            let mut path = vec![c];
            while *path.last().unwrap() != eos && path.len() < budget {
                let next = argmax(&fwd.probs(&ctx_of(&y, &path))?);
                path.push(next);
            }
            let mut r = i + path.len();
            for j in (i + 1)..(i + path.len()) {
                let at = fwd.probs(&ctx_of(&y, &path[..j - i]))?;
                if candidates(&at, cfg.gamma).len() > 1 {
                    r = j;
                    break;
                }
            }
            paths.push(path);
            risks.push(r);
        }
        let k = match mode {
            SpanMode::Token => 0,
            SpanMode::Left => risks.iter().min().unwrap() - i - 1,
            SpanMode::Right => risks.iter().max().unwrap() - i - 1,
        };

        let mut best: Option<(f64, usize)> = None;
        for (n, &c) in cands.iter().enumerate() {
            let span = &paths[n][..(k + 1).min(paths[n].len())];
            let q = probs[c as usize].ln() + oracle_pmi_with(&ver, tpl, input, &y, span)?;
            // cands ascend by id, so strict > keeps the lowest id on ties
            if best.map_or(true, |(bq, _)| q > bq) {
                best = Some((q, n));
            }
        }
        let (_, n) = best.unwrap();
        let span = paths[n][..(k + 1).min(paths[n].len())].to_vec();
        y.extend(span);
    }
    Ok(TokenSeq(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedOutcome {
    pub sequence: TokenSeq,
    pub logp_forward: f64,
    /// `ln p(input | sequence)` under a backward prompt, when requested.
    pub logp_input_given_output: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    /// Every eos-terminated sequence of length ≤ `max_len`.
    pub outcomes: Vec<EnumeratedOutcome>,
    /// Probability of reaching `max_len` tokens without eos.
    pub truncated_mass: f64,
}

impl Enumeration {
    /// Most probable terminated sequence, ties to the lexicographically smaller.
    pub fn best(&self) -> Option<&EnumeratedOutcome> {
        self.outcomes.iter().reduce(|a, b| {
            if b.logp_forward > a.logp_forward || (b.logp_forward == a.logp_forward && b.sequence < a.sequence) {
                b
            } else {
                a
            }
        })
    }

    /// Fills `logp_input_given_output` for every outcome.
    pub fn with_input_likelihood(
        mut self,
        verify_model: &TabularLm,
        tpl: &PromptTemplatePair,
        input: &str,
    ) -> Result<Self, OracleError> {
        let table = RefTable::new(verify_model);
        for o in &mut self.outcomes {
            let (prefix, x) = backward_split(table.vocab, tpl, input, &o.sequence)?;
            o.logp_input_given_output = Some(table.sequence_prob(&prefix, &x)?.ln());
        }
        Ok(self)
    }
}

/// Enumerates all continuations of `prompt` up to `max_len` tokens.
/// Refuses when `|vocab|^max_len` exceeds `bound`.
pub fn enumerate_sequences(
    model: &TabularLm,
    prompt: &[TokenId],
    max_len: usize,
    bound: f64,
) -> Result<Enumeration, OracleError> {
    let table = RefTable::new(model);
    let size = (table.vocab.size() as f64).powi(max_len as i32);
    if size > bound {
        return Err(OracleError::ExplosionGuard(size));
    }
    let eos = table.vocab.eos();
    let mut out = Enumeration { outcomes: Vec::new(), truncated_mass: 0.0 };
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((seq, p)) = stack.pop() {
        if seq.last() == Some(&eos) {
            out.outcomes.push(EnumeratedOutcome {
                sequence: TokenSeq(seq),
                logp_forward: p.ln(),
                logp_input_given_output: None,
            });
            continue;
        }
        if seq.len() == max_len {
            out.truncated_mass += p;
            continue;
        }
        let mut ctx = prompt.to_vec();
        ctx.extend_from_slice(&seq);
        let probs = table.probs(&ctx)?;
        for (tok, &pt) in probs.iter().enumerate() {
            if pt > 0.0 {
                let mut next = seq.clone();
                next.push(tok as TokenId);
                stack.push((next, p * pt));
            }
        }
    }
    out.outcomes.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token() -> TabularLm {
        let vocab = Vocab::from_words("a </s>", "</s>", None).unwrap();
        TabularLm::from_rows("t", vocab, 1, &[("", &[("a", 0.4), ("</s>", 0.6)])], Fallback::Error).unwrap()
    }

    #[test]
    fn tiny_enumeration() {
        let e = enumerate_sequences(&two_token(), &[], 2, 1e6).unwrap();
        let seqs: Vec<_> = e.outcomes.iter().map(|o| o.sequence.0.clone()).collect();
        assert_eq!(seqs, vec![vec![0, 1], vec![1]]);
        assert!((e.truncated_mass - 0.16).abs() < 1e-12);
        let total: f64 = e.outcomes.iter().map(|o| o.logp_forward.exp()).sum::<f64>() + e.truncated_mass;
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(e.best().unwrap().sequence.0, vec![1]);
    }

    #[test]
    fn explosion_guard() {
        assert!(matches!(
            enumerate_sequences(&two_token(), &[], 30, 1e6),
            Err(OracleError::ExplosionGuard(_))
        ));
    }

    #[test]
    fn closed_form_pmi() {
        let vocab = Vocab::from_words("<s> </s> a b x", "</s>", Some("<s>")).unwrap();
        let lm = TabularLm::from_rows(
            "v",
            vocab,
            2,
            &[("<s>", &[("x", 0.5), ("a", 0.5)]), ("a", &[("x", 0.9), ("b", 0.1)])],
            Fallback::Uniform,
        )
        .unwrap();
        let tpl = PromptTemplatePair::new("t", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").unwrap();
        let v = oracle_pmi(&lm, &tpl, "x", &[], &[2]).unwrap();
        assert!((v - 0.587_786_664_902_119).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_surfaces() {
        let vocab = Vocab::from_words("<s> </s> a b x", "</s>", Some("<s>")).unwrap();
        let lm = TabularLm::from_rows(
            "v",
            vocab,
            2,
            &[("<s>", &[("x", 0.5), ("a", 0.5)]), ("a", &[("b", 1.0)])],
            Fallback::Uniform,
        )
        .unwrap();
        let tpl = PromptTemplatePair::new("t", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").unwrap();
        assert_eq!(
            oracle_pmi(&lm, &tpl, "x", &[], &[2]),
            Err(OracleError::ZeroProb { position: 0, token: 4 })
        );
    }

    #[test]
    fn independence_gives_exact_zero() {
        let vocab = Vocab::from_words("<s> </s> a b x", "</s>", Some("<s>")).unwrap();
        let lm = TabularLm::from_rows("u", vocab, 1, &[("", &[("x", 0.3), ("a", 0.7)])], Fallback::Error).unwrap();
        let tpl = PromptTemplatePair::new("t", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").unwrap();
        assert_eq!(oracle_pmi(&lm, &tpl, "x x", &[3], &[2, 3]).unwrap(), 0.0);
    }
}
