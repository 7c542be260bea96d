//! Random and hand-built [`TabularLm`] fixtures for engine/oracle checks.

use diver_core::config::{DecoderConfig, Strategy, GAMMA_GRID};
use diver_core::{Fallback, PromptTemplatePair, TabularLm, TokenId, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub model: TabularLm,
    pub verifier: Option<TabularLm>,
    pub tpl: PromptTemplatePair,
    pub input: String,
    pub cfg: DecoderConfig,
}

impl Fixture {
    pub fn verify_model(&self) -> &TabularLm {
        self.verifier.as_ref().unwrap_or(&self.model)
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.cfg.strategy = strategy;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightShape {
    /// `exp(U(-4, 2))` per entry; rows differ sharply.
    Spread,
    /// `U(1, 2)` per entry; at γ ≤ 0.5 every row is fully divergent.
    Flat,
}

pub fn plain_template() -> PromptTemplatePair {
    PromptTemplatePair::new("plain", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").expect("valid template")
}

/// Template whose scaffolding words are themselves vocabulary tokens.
pub fn scaffold_template() -> PromptTemplatePair {
    PromptTemplatePair::new("scaffold", "t0 [INPUT] t1", "t1 [INCOMPLETE_OUTPUT] t0 [INPUT]").expect("valid template")
}

fn vocab(content: usize) -> Vocab {
    let mut words = vec!["<s>".to_owned(), "</s>".to_owned()];
    words.extend((0..content).map(|i| format!("t{i}")));
    Vocab::new(words, "</s>", Some("<s>")).expect("valid vocab")
}

fn contexts(width: usize, alphabet: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..width {
        out = out
            .into_iter()
            .flat_map(|c| {
                alphabet.iter().map(move |&t| {
                    let mut n = c.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
    }
    out
}

fn random_table(
    rng: &mut ChaCha8Rng,
    id: &str,
    vocab: &Vocab,
    order: usize,
    shape: WeightShape,
    allow_zeros: bool,
    skip_rows: bool,
) -> TabularLm {
    let bos = vocab.bos().expect("fixture vocab has bos");
    let alphabet: Vec<TokenId> = (0..vocab.size() as TokenId).filter(|&t| t != vocab.eos()).collect();
    let mut rows = Vec::new();
    for ctx in contexts(order - 1, &alphabet) {
        if skip_rows && rng.gen_bool(0.15) {
            continue;
        }
        let mut w: Vec<f64> = (0..vocab.size() as TokenId)
            .map(|t| {
                if t == bos {
                    0.0
                } else if allow_zeros && rng.gen_bool(0.2) {
                    0.0
                } else {
                    match shape {
                        WeightShape::Spread => rng.gen_range(-4.0f64..2.0).exp(),
                        WeightShape::Flat => rng.gen_range(1.0..2.0),
                    }
                }
            })
            .collect();
        if w.iter().all(|&x| x == 0.0) {
            w[vocab.eos() as usize] = 1.0;
        }
        rows.push((ctx, w));
    }
    TabularLm::new(id, vocab.clone(), order, rows, Fallback::Uniform).expect("valid random table")
}

/// A small random fixture: vocab ≤ 8, order 1..=3, short input, budget ≤ 8.
/// Roughly a third of fixtures carry a separate verifier.
pub fn random_fixture(seed: u64, shape: WeightShape) -> Fixture {
    generate(seed, shape, true)
}

/// Like [`random_fixture`] but every context has its own row, so no
/// distribution is the (fully tied) uniform fallback.
pub fn dense_fixture(seed: u64) -> Fixture {
    let mut f = generate(seed, WeightShape::Spread, false);
    f.name = format!("dense-{seed}");
    f
}

fn generate(seed: u64, shape: WeightShape, skip_rows: bool) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = rng.gen_range(2..=6);
    let vocab = vocab(content);
    let order = rng.gen_range(1..=3);
    let separate = rng.gen_bool(0.33);
    let zeros = separate && shape == WeightShape::Spread;
    let model = random_table(&mut rng, &format!("fwd-{seed}"), &vocab, order, shape, zeros, skip_rows);
    let verifier = separate.then(|| {
        let v_order = rng.gen_range(1..=3);
        random_table(&mut rng, &format!("ver-{seed}"), &vocab, v_order, WeightShape::Spread, false, skip_rows)
    });
    let tpl = if rng.gen_bool(0.5) { plain_template() } else { scaffold_template() };
    let input_len = rng.gen_range(1..=3);
    let input: Vec<String> = (0..input_len).map(|_| format!("t{}", rng.gen_range(0..content))).collect();
    let gamma = match shape {
        WeightShape::Spread => GAMMA_GRID[rng.gen_range(0..GAMMA_GRID.len())],
        WeightShape::Flat => GAMMA_GRID[rng.gen_range(0..3)],
    };
    let cfg = DecoderConfig {
        gamma,
        max_new_tokens: rng.gen_range(3..=8),
        max_span_len: rng.gen_range(1..=8),
        ..DecoderConfig::default()
    };
    Fixture { name: format!("random-{seed}"), model, verifier, tpl, input: input.join(" "), cfg }
}

/// Order-2 model over prompt `x` whose two candidates hit their first risk
/// at different depths: seed `a` at i+2, seed `b` at i+4. The short spans
/// favour `b`, the long spans favour `a`.
pub fn staggered_risk() -> Fixture {
    let vocab = Vocab::from_words("<s> </s> x a b c d e f g h", "</s>", Some("<s>")).expect("valid vocab");
    let model = TabularLm::from_rows(
        "staggered",
        vocab,
        2,
        &[
            ("<s>", &[("x", 0.5), ("a", 0.5)]),
            ("x", &[("a", 0.6), ("b", 0.4)]),
            ("a", &[("c", 0.9), ("x", 0.1)]),
            ("c", &[("d", 0.5), ("e", 0.4), ("x", 0.1)]),
            ("d", &[("</s>", 0.8), ("x", 0.2)]),
            ("e", &[("</s>", 0.9), ("x", 0.1)]),
            ("b", &[("f", 0.9), ("x", 0.1)]),
            ("f", &[("g", 0.8), ("x", 0.2)]),
            ("g", &[("h", 0.9), ("x", 0.1)]),
            ("h", &[("d", 0.5), ("e", 0.4), ("x", 0.1)]),
        ],
        Fallback::Uniform,
    )
    .expect("valid table");
    let cfg = DecoderConfig { gamma: 0.3, max_new_tokens: 8, max_span_len: 8, ..DecoderConfig::default() };
    Fixture { name: "staggered-risk".into(), model, verifier: None, tpl: plain_template(), input: "x".into(), cfg }
}

/// [`staggered_risk`] with a verifier that reverses the long-span preference.
pub fn disagreeing_verifier() -> Fixture {
    let base = staggered_risk();
    let vocab = diver_core::LanguageModel::vocab(&base.model).clone();
    let verifier = TabularLm::from_rows(
        "disagree",
        vocab,
        2,
        &[
            ("<s>", &[("x", 0.5), ("a", 0.5)]),
            ("d", &[("x", 0.05), ("</s>", 0.95)]),
            ("h", &[("x", 0.9), ("d", 0.1)]),
        ],
        Fallback::Uniform,
    )
    .expect("valid table");
    Fixture { name: "disagreeing-verifier".into(), verifier: Some(verifier), ..base }
}

/// A random fixture verified by a unigram model, so every PMI is exactly 0.
pub fn null_pmi(seed: u64) -> Fixture {
    let mut f = random_fixture(seed, WeightShape::Spread);
    let vocab = diver_core::LanguageModel::vocab(&f.model).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    f.verifier = Some(random_table(&mut rng, "unigram", &vocab, 1, WeightShape::Spread, false, false));
    f.name = format!("null-pmi-{seed}");
    f
}
