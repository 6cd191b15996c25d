//! Instruction-following sample synthesis for stage-2 data.

pub mod templates;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use templates::{
    category_slots, emit_finetune_prompts, has_unresolved_slot, render_instruction, InstructionTemplate, TemplateError,
    TemplateSet, IMAGE_PLACEHOLDER, KNOWN_SLOTS, NAME_EXEMPT_TAG,
};

use crate::caption::{as_sentence, identification_sentence};
use crate::clients::ClientError;
use crate::knowledge::{AttributeFact, TaxonRecord};
use crate::text::word_count;

pub const SYSTEM_PROMPT: &str = "You are a marine biology expert writing training answers about one organism. \
Use only the facts provided and name the organism in your answer.";
pub const REPAIR_NOTE: &str = "Your previous answer was rejected";

/// Chat-completion style client: system text plus user text in, completion out.
pub trait LlmClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Llm,
    TemplateFact,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Llm => "llm",
            Self::TemplateFact => "template_fact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationReason {
    EmptyResponse,
    TooShort,
    TooLong,
    MissingCategoryMention,
    UnresolvedSlot,
}

impl ValidationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EmptyResponse => "empty_response",
            Self::TooShort => "too_short",
            Self::TooLong => "too_long",
            Self::MissingCategoryMention => "missing_category_mention",
            Self::UnresolvedSlot => "unresolved_slot",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub passed: bool,
    pub reasons: Vec<ValidationReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationRules {
    pub min_words: usize,
    pub max_words: usize,
    pub require_mention: bool,
}

impl Default for ValidationRules {
    fn default() -> Self {
        Self { min_words: 10, max_words: 400, require_mention: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub record_id: String,
    pub instruction: String,
    pub response: String,
    pub generator: Generator,
    pub template_id: u32,
    /// Names the response may mention; kept so validation can be rechecked.
    pub category_names: Vec<String>,
    pub name_exempt: bool,
    pub validation: Validation,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstructError {
    #[error("record {0} has no category annotation")]
    MissingCategory(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("llm unavailable: {0}")]
    LlmUnavailable(String),
    #[error("validation failed after {attempts} attempts")]
    ValidationExhausted { attempts: u32, sample: Box<InstructionSample> },
}

pub fn mentions_any(text: &str, names: &[String]) -> bool {
    let lower = text.to_lowercase();
    names.iter().map(|n| n.trim().to_lowercase()).any(|n| !n.is_empty() && lower.contains(&n))
}

pub fn validate_sample(sample: &InstructionSample, rules: &ValidationRules) -> Validation {
    let mut reasons = Vec::new();
    let words = word_count(&sample.response);
    let empty = sample.response.trim().is_empty();
    if empty {
        reasons.push(ValidationReason::EmptyResponse);
    } else if words < rules.min_words {
        reasons.push(ValidationReason::TooShort);
    }
    if words > rules.max_words {
        reasons.push(ValidationReason::TooLong);
    }
    if !empty && rules.require_mention && !sample.name_exempt && !mentions_any(&sample.response, &sample.category_names)
    {
        reasons.push(ValidationReason::MissingCategoryMention);
    }
    if has_unresolved_slot(&sample.instruction) || has_unresolved_slot(&sample.response) {
        reasons.push(ValidationReason::UnresolvedSlot);
    }
    Validation { passed: reasons.is_empty(), reasons }
}

/// One record plus its knowledge context.
#[derive(Debug, Clone, Copy)]
pub struct QaContext<'a> {
    pub record_id: &'a str,
    pub taxon: &'a TaxonRecord,
    pub facts: &'a [&'a AttributeFact],
}

impl QaContext<'_> {
    /// Slot value for `{category}`.
    pub fn category(&self) -> &str {
        self.taxon.display_name()
    }

    fn names(&self) -> Vec<String> {
        self.taxon.all_names().filter(|n| !n.trim().is_empty()).map(str::to_string).collect()
    }
}

pub fn serialize_facts(facts: &[&AttributeFact]) -> String {
    let mut out = String::new();
    for f in facts {
        let _ = writeln!(out, "- {}: {}", f.key, f.text.trim());
    }
    out
}

pub fn build_prompt(instruction: &str, taxon: &TaxonRecord, facts: &[&AttributeFact]) -> String {
    let mut user = format!("{instruction}\n\nOrganism: {}", taxon.scientific_name);
    if let Some(common) = taxon.common_name() {
        let _ = write!(user, " ({common})");
    }
    user.push_str("\nFacts:\n");
    user.push_str(&serialize_facts(facts));
    user
}

/// Renders `template` for the record, asks the LLM, validates, and retries
/// with a repair note up to `attempts` times.
pub fn generate_qa(
    ctx: QaContext<'_>,
    template: &InstructionTemplate,
    llm: &dyn LlmClient,
    rules: &ValidationRules,
    attempts: u32,
) -> Result<InstructionSample, InstructError> {
    let instruction = render_instruction(template, &category_slots(ctx.category()))?;
    let base_prompt = build_prompt(&instruction, ctx.taxon, ctx.facts);
    let attempts = attempts.max(1);
    let mut prompt = base_prompt.clone();
    let mut last: Option<InstructionSample> = None;
    let mut transport_error = None;
    for _ in 0..attempts {
        let response = match llm.complete(SYSTEM_PROMPT, &prompt) {
            Ok(r) => r.trim().to_string(),
            Err(e) => {
                tracing::debug!(record_id = ctx.record_id, error = %e, "llm request failed");
                transport_error = Some(e.to_string());
                continue;
            }
        };
        let mut sample = InstructionSample {
            record_id: ctx.record_id.to_string(),
            instruction: instruction.clone(),
            response,
            generator: Generator::Llm,
            template_id: template.template_id,
            category_names: ctx.names(),
            name_exempt: template.has_tag(NAME_EXEMPT_TAG),
            validation: Validation::default(),
        };
        sample.validation = validate_sample(&sample, rules);
        if sample.validation.passed {
            return Ok(sample);
        }
        let reasons: Vec<&str> = sample.validation.reasons.iter().map(|r| r.as_str()).collect();
        prompt = format!(
            "{base_prompt}\n{REPAIR_NOTE} ({}). Answer again in {}-{} words.",
            reasons.join(", "),
            rules.min_words,
            rules.max_words
        );
        last = Some(sample);
    }
    match last {
        Some(sample) => Err(InstructError::ValidationExhausted { attempts, sample: Box::new(sample) }),
        None => Err(InstructError::LlmUnavailable(transport_error.unwrap_or_default())),
    }
}

/// Builds a sample without an LLM: the answer is the identification sentence
/// followed by the facts whose attribute group matches a template tag, or all
/// facts if none match.
pub fn template_fact_sample(
    ctx: QaContext<'_>,
    template: &InstructionTemplate,
    rules: &ValidationRules,
) -> Result<InstructionSample, InstructError> {
    let instruction = render_instruction(template, &category_slots(ctx.category()))?;
    let tagged: Vec<&&AttributeFact> =
        ctx.facts.iter().filter(|f| template.tags.iter().any(|t| t == f.key.group())).collect();
    let chosen: Vec<&&AttributeFact> = if tagged.is_empty() { ctx.facts.iter().collect() } else { tagged };
    let mut response = identification_sentence(ctx.taxon);
    for f in chosen {
        response.push(' ');
        response.push_str(&as_sentence(&f.text));
    }
    let mut sample = InstructionSample {
        record_id: ctx.record_id.to_string(),
        instruction,
        response,
        generator: Generator::TemplateFact,
        template_id: template.template_id,
        category_names: ctx.names(),
        name_exempt: template.has_tag(NAME_EXEMPT_TAG),
        validation: Validation::default(),
    };
    sample.validation = validate_sample(&sample, rules);
    Ok(sample)
}
