//! Instruction and prompt templates with `{slot}` markers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

pub const KNOWN_SLOTS: &[&str] = &["category", "image"];
/// What `{image}` renders to: the placeholder a trainer swaps for image tokens.
pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const NAME_EXEMPT_TAG: &str = "name-exempt";

const DEFAULT_INSTRUCTIONS: &str = include_str!("../../assets/instructions.tsv");
const DEFAULT_PROMPTS: &str = include_str!("../../assets/prompts.tsv");

static SLOT_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing slot `{0}`")]
    MissingSlot(String),
    #[error("line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("duplicate template id {0}")]
    DuplicateId(u32),
    #[error("cannot read template file: {0}")]
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub template_id: u32,
    pub text: String,
    pub tags: Vec<String>,
}

impl InstructionTemplate {
    /// Slot names used in the text, in first-occurrence order.
    pub fn slots(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for cap in SLOT_MARKER.captures_iter(&self.text) {
            let name = cap[1].to_string();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

pub fn has_unresolved_slot(text: &str) -> bool {
    SLOT_MARKER.captures_iter(text).any(|c| KNOWN_SLOTS.contains(&&c[1]))
}

/// Substitutes every `{slot}` in one pass; substituted values are not
/// re-scanned.
pub fn render_instruction(
    template: &InstructionTemplate,
    slots: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    for name in template.slots() {
        if !slots.contains_key(&name) {
            return Err(TemplateError::MissingSlot(name));
        }
    }
    Ok(SLOT_MARKER.replace_all(&template.text, |c: &regex::Captures| slots[&c[1]].clone()).into_owned())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    templates: Vec<InstructionTemplate>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut templates: Vec<InstructionTemplate> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |message: &str| TemplateError::BadLine { line: line_no, message: message.into() };
            let mut fields = line.splitn(3, '\t');
            let id: u32 = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .filter(|&id| id >= 1)
                .ok_or_else(|| bad("template id must be a positive integer"))?;
            let tags = fields
                .next()
                .ok_or_else(|| bad("missing tags field"))?
                .split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            let text = fields.next().map(str::trim).filter(|t| !t.is_empty()).ok_or_else(|| bad("missing text"))?;
            let template = InstructionTemplate { template_id: id, text: text.to_string(), tags };
            if let Some(unknown) = template.slots().into_iter().find(|s| !KNOWN_SLOTS.contains(&s.as_str())) {
                return Err(bad(&format!("unknown slot `{{{unknown}}}`")));
            }
            if templates.iter().any(|t| t.template_id == id) {
                return Err(TemplateError::DuplicateId(id));
            }
            templates.push(template);
        }
        templates.sort_by_key(|t| t.template_id);
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text =
            fs::read_to_string(path).map_err(|e| TemplateError::Unreadable(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn default_instructions() -> Self {
        Self::parse(DEFAULT_INSTRUCTIONS).expect("bundled instructions are valid")
    }

    pub fn default_prompts() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("bundled prompts are valid")
    }

    pub fn templates(&self) -> &[InstructionTemplate] {
        &self.templates
    }

    pub fn get(&self, id: u32) -> Option<&InstructionTemplate> {
        self.templates.iter().find(|t| t.template_id == id)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn category_slots(category: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("category".to_string(), category.to_string()),
        ("image".to_string(), IMAGE_PLACEHOLDER.to_string()),
    ])
}

/// Renders the stage-2 prompt set for `category`.
pub fn emit_finetune_prompts(category: &str, prompts: &TemplateSet) -> Result<Vec<String>, TemplateError> {
    if category.trim().is_empty() {
        return Err(TemplateError::MissingSlot("category".into()));
    }
    let slots = category_slots(category.trim());
    prompts.templates().iter().map(|t| render_instruction(t, &slots)).collect()
}
