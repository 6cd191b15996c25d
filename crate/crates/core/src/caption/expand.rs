//! Attribute-based caption expansion.
//!
//! A caption is an identification sentence followed by up to `k` fact
//! sentences. Successive expansions for the same taxon rotate through the
//! taxon's facts so images sharing a category get different descriptions.

use serde::{Deserialize, Serialize};

use super::CaptionError;
use crate::knowledge::{AttributePath, KnowledgeBase, TaxonRecord};
use crate::text::{collapse_whitespace, normalize_taxon_id};

/// Per-taxon rotation cursor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub taxon_id: String,
    pub cursor: u64,
}

impl SamplerState {
    pub fn new(taxon_id: &str) -> Self {
        Self { taxon_id: normalize_taxon_id(taxon_id), cursor: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRef {
    pub key: AttributePath,
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub text: String,
    pub used: Vec<FactRef>,
}

pub fn identification_sentence(taxon: &TaxonRecord) -> String {
    let scientific = taxon.scientific_name.trim();
    match (taxon.common_name(), scientific.is_empty()) {
        (Some(common), false) => format!("This is {common} ({scientific})."),
        (Some(common), true) => format!("This is {common}."),
        (None, _) => format!("This is {scientific}."),
    }
}

pub fn as_sentence(text: &str) -> String {
    let t = collapse_whitespace(text);
    if t.ends_with(['.', '!', '?']) {
        t
    } else {
        format!("{t}.")
    }
}

/// Expands a caption for `state.taxon_id` using `k` facts starting at offset
/// `cursor * k mod fact_count`, then advances the cursor.
pub fn expand_from_attributes(
    kb: &KnowledgeBase,
    k: usize,
    state: &mut SamplerState,
) -> Result<Expansion, CaptionError> {
    if k == 0 {
        return Err(CaptionError::InvalidK);
    }
    let facts = kb.facts_for(&state.taxon_id);
    if facts.is_empty() {
        return Err(CaptionError::NoFactsForTaxon(state.taxon_id.clone()));
    }
    let fallback;
    let taxon = match kb.taxon(&state.taxon_id) {
        Some(t) => t,
        None => {
            fallback = TaxonRecord::new(&state.taxon_id);
            &fallback
        }
    };
    let n = facts.len();
    let take = k.min(n);
    let offset = ((state.cursor % n as u64) * (k as u64 % n as u64) % n as u64) as usize;
    let used: Vec<FactRef> = (0..take)
        .map(|j| {
            let f = facts[(offset + j) % n];
            FactRef { key: f.key.clone(), text: f.text.clone(), source: f.source.clone() }
        })
        .collect();

    let mut text = identification_sentence(taxon);
    for f in &used {
        text.push(' ');
        text.push_str(&as_sentence(&f.text));
    }
    state.cursor += 1;
    Ok(Expansion { text, used })
}
