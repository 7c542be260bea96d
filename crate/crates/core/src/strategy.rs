//! One entry point for every strategy in [`Strategy`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{beam_decode, cad_decode, cd_decode, greedy_decode, nucleus_decode};
use crate::config::{DecoderConfig, Strategy};
use crate::engine::{decode, DecodeFailure, DecodeResult};
use crate::error::DecodeError;
use crate::lm::LanguageModel;
use crate::template::PromptTemplatePair;
use crate::trace::DecodeTrace;
use crate::vocab::TokenSeq;

/// The forward model plus an optional second model, used as the PMI
/// verifier for verified strategies and as the amateur for CD.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub forward: &'a dyn LanguageModel,
    pub second: Option<&'a dyn LanguageModel>,
}

impl<'a> Models<'a> {
    pub fn single(forward: &'a dyn LanguageModel) -> Self {
        Self { forward, second: None }
    }
}

pub fn decode_with(
    models: Models<'_>,
    tpl: &PromptTemplatePair,
    input: &str,
    cfg: &DecoderConfig,
) -> Result<DecodeResult, DecodeFailure> {
    let model = models.forward;
    let early = |error: DecodeError| DecodeFailure {
        error,
        partial: Box::new(DecodeResult::finish(model, TokenSeq::new(), DecodeTrace::new())),
    };
    cfg.validate().map_err(early)?;
    if cfg.strategy.span_mode().is_some() {
        let verifier = models.second.unwrap_or(model);
        return decode(model, verifier, tpl, input, cfg);
    }
    tpl.validate().map_err(|e| early(e.into()))?;
    let prompt = model
        .tokenize(&tpl.render_forward(input))
        .map_err(|e| early(e.into()))?;
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(model, &prompt, cfg.max_new_tokens),
        Strategy::Nucleus => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            nucleus_decode(model, &prompt, cfg.top_p, &mut rng, cfg.max_new_tokens)
        }
        Strategy::Beam => beam_decode(model, &prompt, cfg.beam_width, cfg.max_new_tokens),
        Strategy::Cd => {
            let amateur = models.second.ok_or_else(|| early(DecodeError::MissingModel("cd")))?;
            cd_decode(model, amateur, &prompt, cfg.gamma, cfg.max_new_tokens)
        }
        Strategy::Cad => {
            let without = model
                .tokenize(&tpl.render_forward_without_input())
                .map_err(|e| early(e.into()))?;
            cad_decode(model, &prompt, &without, cfg.alpha, cfg.max_new_tokens)
        }
        Strategy::DiverLeft | Strategy::DiverRight | Strategy::DiverToken => unreachable!("handled above"),
    }
}
