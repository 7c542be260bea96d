//! Forward/backward prompt templates.
//!
//! The forward template wraps the input for generation. The backward
//! template places the partial output first and the input last, so the
//! input tokens can be scored conditioned on the output:
//!
//! ```text
//! forward:  "Main Components: [INPUT] Write a Sentence ... Sentence:"
//! backward: "Sentence: [INCOMPLETE_OUTPUT] Extract the Main Components ... Main Components: [INPUT]"
//! ```
//!
//! Only the input tokens are scored; scaffolding text conditions but is not
//! scored. Anything after `[INPUT]` in the backward template is ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TemplateError;
use crate::lm::LanguageModel;
use crate::vocab::{TokenId, TokenSeq};

pub const INPUT: &str = "[INPUT]";
pub const INCOMPLETE_OUTPUT: &str = "[INCOMPLETE_OUTPUT]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplatePair {
    pub name: String,
    pub forward: String,
    pub backward: String,
}

impl PromptTemplatePair {
    pub fn new(
        name: impl Into<String>,
        forward: impl Into<String>,
        backward: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let tpl = Self { name: name.into(), forward: forward.into(), backward: backward.into() };
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let missing = |placeholder, which| TemplateError::MissingPlaceholder {
            name: self.name.clone(),
            placeholder,
            which,
        };
        if self.forward.matches(INPUT).count() != 1 {
            return Err(missing(INPUT, "forward"));
        }
        if self.backward.matches(INPUT).count() != 1 {
            return Err(missing(INPUT, "backward"));
        }
        if self.backward.matches(INCOMPLETE_OUTPUT).count() != 1 {
            return Err(missing(INCOMPLETE_OUTPUT, "backward"));
        }
        let out_at = self.backward.find(INCOMPLETE_OUTPUT).unwrap_or(0);
        let in_at = self.backward.find(INPUT).unwrap_or(0);
        if out_at > in_at {
            return Err(TemplateError::PlaceholderOrder(self.name.clone()));
        }
        Ok(())
    }

    pub fn render_forward(&self, input: &str) -> String {
        self.forward.replacen(INPUT, input, 1)
    }

    /// Forward prompt with the input block removed (context-free branch of CAD).
    pub fn render_forward_without_input(&self) -> String {
        self.forward.replacen(INPUT, "", 1)
    }

    /// Substitutes by position, so placeholder text inside `input` or
    /// `incomplete_output` is left alone.
    pub fn render_backward(&self, input: &str, incomplete_output: &str) -> String {
        let split = self
            .backward
            .split_once(INCOMPLETE_OUTPUT)
            .and_then(|(head, rest)| rest.split_once(INPUT).map(|(mid, tail)| (head, mid, tail)));
        match split {
            Some((head, mid, tail)) => format!("{head}{incomplete_output}{mid}{input}{tail}"),
            None => self.backward.replacen(INCOMPLETE_OUTPUT, incomplete_output, 1).replacen(INPUT, input, 1),
        }
    }

    /// (before output, between output and input) scaffolding text.
    fn backward_scaffold(&self) -> (&str, &str) {
        let out_at = self.backward.find(INCOMPLETE_OUTPUT).unwrap_or(0);
        let in_at = self.backward.find(INPUT).unwrap_or(self.backward.len());
        let head = &self.backward[..out_at];
        let middle = &self.backward[(out_at + INCOMPLETE_OUTPUT.len()).min(in_at)..in_at];
        (head, middle)
    }
}

/// Reads a template file: one `{name, forward, backward}` object or a list.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplatePair>, TemplateError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        One(PromptTemplatePair),
        Many(Vec<PromptTemplatePair>),
    }
    let list = match serde_json::from_str(text)? {
        Doc::One(t) => vec![t],
        Doc::Many(v) => v,
    };
    for t in &list {
        t.validate()?;
    }
    Ok(list)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<PromptTemplatePair>, TemplateError> {
    let text = std::fs::read_to_string(path).map_err(crate::error::LmError::from)?;
    parse_templates(&text)
}

/// Renders the backward prompt and splits it at the input: `prefix` is
/// everything before `[INPUT]` (output substituted), `target` is the
/// tokenized input.
pub fn render_backward_prompt<M: LanguageModel + ?Sized>(
    model: &M,
    tpl: &PromptTemplatePair,
    input: &str,
    incomplete_output: &str,
) -> Result<(TokenSeq, TokenSeq), TemplateError> {
    tpl.validate()?;
    let in_at = tpl.backward.find(INPUT).unwrap_or(0);
    let before_input = tpl.backward[..in_at].replacen(INCOMPLETE_OUTPUT, incomplete_output, 1);
    let prefix = model.tokenize(&before_input)?;
    let target = model.tokenize(input)?;
    let joined = prefix.concat(&target);
    match model.tokenize(&format!("{before_input}{input}")) {
        Ok(full) if full == joined => Ok((prefix, target)),
        Ok(full) => {
            let at = full.iter().zip(joined.iter()).take_while(|(a, b)| a == b).count();
            Err(TemplateError::TokenizationMismatch(at))
        }
        Err(_) => Err(TemplateError::TokenizationMismatch(prefix.len())),
    }
}

/// A backward prompt with its scaffolding pre-tokenized, so that the prefix
/// for any partial output is a splice of token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPrompt {
    pub head: TokenSeq,
    pub middle: TokenSeq,
    pub target: TokenSeq,
}

impl BackwardPrompt {
    pub fn prepare<M: LanguageModel + ?Sized>(
        model: &M,
        tpl: &PromptTemplatePair,
        input: &str,
    ) -> Result<Self, TemplateError> {
        tpl.validate()?;
        let (head, middle) = tpl.backward_scaffold();
        let prepared = Self {
            head: model.tokenize(head)?,
            middle: model.tokenize(middle)?,
            target: model.tokenize(input)?,
        };
        let (prefix, target) = render_backward_prompt(model, tpl, input, "")?;
        if prefix.as_slice() != prepared.prefix_for(&[]).as_slice() || target != prepared.target {
            return Err(TemplateError::TokenizationMismatch(0));
        }
        Ok(prepared)
    }

    /// Token prefix conditioning the input on `output`.
    pub fn prefix_for(&self, output: &[TokenId]) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.head.len() + output.len() + self.middle.len());
        v.extend_from_slice(&self.head);
        v.extend_from_slice(output);
        v.extend_from_slice(&self.middle);
        v
    }
}
