//! Prompt templates and rendering.
//!
//! Templates are compiled in from `assets/templates/` and addressed by a
//! versioned id that participates in cache keys. Rendering substitutes
//! `{caption}`, `{references}`, and `{context}` in a single left-to-right
//! pass: substituted values are never rescanned, so a caption that contains
//! a placeholder-like sequence stays literal.

use serde::{Deserialize, Serialize};

use crate::model::{canonical_json, ContentDigest};

const VANILLA: &str = include_str!("../assets/templates/vanilla.txt");
const REFERENCE: &str = include_str!("../assets/templates/reference.txt");
const DESCRIPTION_STEP1: &str = include_str!("../assets/templates/description_step1.txt");
const VISCE_STEP1: &str = include_str!("../assets/templates/visce_step1.txt");
const STEP2: &str = include_str!("../assets/templates/step2.txt");

const PLACEHOLDERS: [&str; 3] = ["{caption}", "{references}", "{context}"];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template_id} needs {placeholder} but no value was supplied")]
    MissingInput {
        template_id: &'static str,
        placeholder: &'static str,
    },
    #[error("value for {placeholder} is empty")]
    EmptyValue { placeholder: &'static str },
}

/// The five prompt shapes. Step-1 modes extract visual context, the rest
/// produce a 0-100 rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Vanilla,
    Reference,
    DescriptionStep1,
    VisceStep1,
    Step2,
}

impl PromptMode {
    /// Stable id, versioned so future template edits invalidate caches.
    pub fn template_id(&self) -> &'static str {
        match self {
            PromptMode::Vanilla => "vanilla@v1",
            PromptMode::Reference => "reference@v1",
            PromptMode::DescriptionStep1 => "description_step1@v1",
            PromptMode::VisceStep1 => "visce_step1@v1",
            PromptMode::Step2 => "step2@v1",
        }
    }

    pub fn template_text(&self) -> &'static str {
        match self {
            PromptMode::Vanilla => VANILLA,
            PromptMode::Reference => REFERENCE,
            PromptMode::DescriptionStep1 => DESCRIPTION_STEP1,
            PromptMode::VisceStep1 => VISCE_STEP1,
            PromptMode::Step2 => STEP2,
        }
    }

    pub fn is_scoring(&self) -> bool {
        matches!(
            self,
            PromptMode::Vanilla | PromptMode::Reference | PromptMode::Step2
        )
    }

    pub fn all() -> [PromptMode; 5] {
        [
            PromptMode::Vanilla,
            PromptMode::Reference,
            PromptMode::DescriptionStep1,
            PromptMode::VisceStep1,
            PromptMode::Step2,
        ]
    }
}

/// Values available for substitution. Extra values a template does not use
/// are ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInputs<'a> {
    pub caption: Option<&'a str>,
    pub references: Option<&'a [String]>,
    pub context: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub mode: PromptMode,
    pub text: String,
    /// Digest of the canonical JSON array of substituted values, in template
    /// order. Constant templates digest the empty array.
    pub inputs_digest: ContentDigest,
}

impl RenderedPrompt {
    pub fn template_id(&self) -> &'static str {
        self.mode.template_id()
    }

    pub fn prompt_digest(&self) -> ContentDigest {
        ContentDigest::of_text(&self.text)
    }
}

fn value_for<'a>(
    placeholder: &'static str,
    inputs: &PromptInputs<'a>,
    joined_refs: &'a Option<String>,
    template_id: &'static str,
) -> Result<&'a str, PromptError> {
    let value = match placeholder {
        "{caption}" => inputs.caption,
        "{references}" => joined_refs.as_deref(),
        "{context}" => inputs.context,
        _ => unreachable!("unknown placeholder {placeholder}"),
    };
    let value = value.ok_or(PromptError::MissingInput {
        template_id,
        placeholder,
    })?;
    if value.trim().is_empty() {
        return Err(PromptError::EmptyValue { placeholder });
    }
    Ok(value)
}

/// Render `mode` with `inputs`. Multiple references are joined with a single
/// newline before substitution.
pub fn render(mode: PromptMode, inputs: PromptInputs<'_>) -> Result<RenderedPrompt, PromptError> {
    let template = mode.template_text();
    let template_id = mode.template_id();
    let joined_refs = inputs.references.map(|r| r.join("\n"));

    let mut out = String::with_capacity(template.len());
    let mut substituted: Vec<&str> = Vec::new();
    let mut rest = template;
    loop {
        let next = PLACEHOLDERS
            .iter()
            .filter_map(|p| rest.find(p).map(|at| (at, *p)))
            .min_by_key(|(at, _)| *at);
        match next {
            Some((at, placeholder)) => {
                out.push_str(&rest[..at]);
                let value = value_for(placeholder, &inputs, &joined_refs, template_id)?;
                out.push_str(value);
                substituted.push(value);
                rest = &rest[at + placeholder.len()..];
            }
            None => {
                out.push_str(rest);
                break;
            }
        }
    }

    let inputs_json =
        canonical_json(&substituted).expect("string arrays always serialize");
    Ok(RenderedPrompt {
        mode,
        text: out,
        inputs_digest: ContentDigest::of_text(&inputs_json),
    })
}
