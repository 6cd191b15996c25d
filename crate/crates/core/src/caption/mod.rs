//! Final training captions: attribute expansion from the knowledge base and
//! captioner-backed diversification.

pub mod expand;
pub mod select;
pub mod similarity;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expand::{as_sentence, expand_from_attributes, identification_sentence, Expansion, FactRef, SamplerState};
pub use select::{
    cap_at_sentence, rank_candidates, select_and_concat, Selection, SelectionConfig, SelectionMode,
    DEFAULT_CAPTION_CAP, DEFAULT_THRESHOLD,
};
pub use similarity::{tf_cosine, SimilarityBackend, SimilarityError, TfCosine};

use crate::clients::ClientError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptionError {
    #[error("no facts for taxon `{0}`")]
    NoFactsForTaxon(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("captioner unavailable: {0}")]
    CaptionerUnavailable(String),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrigin {
    TemplateExpansion,
    CaptionerSample,
    Subtitle,
    Raw,
}

impl CandidateOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TemplateExpansion => "template_expansion",
            Self::CaptionerSample => "captioner_sample",
            Self::Subtitle => "subtitle",
            Self::Raw => "raw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub text: String,
    /// Character count of `text`.
    pub length: usize,
    pub origin: CandidateOrigin,
    pub similarity_to_longest: Option<f64>,
}

impl CaptionCandidate {
    pub fn new(text: String, origin: CandidateOrigin) -> Self {
        let length = text.chars().count();
        Self { text, length, origin, similarity_to_longest: None }
    }
}

/// Steps a caption went through, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceStep {
    Ingested,
    SubtitleAligned,
    TemplateExpansion,
    Diversified,
    ReviewAccepted,
    HumanRefined,
}

impl ProvenanceStep {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ingested => "ingested",
            Self::SubtitleAligned => "subtitle_aligned",
            Self::TemplateExpansion => "template_expansion",
            Self::Diversified => "diversified",
            Self::ReviewAccepted => "review_accepted",
            Self::HumanRefined => "human_refined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub record_id: String,
    pub candidates: Vec<CaptionCandidate>,
    pub final_text: Option<String>,
    provenance: Vec<ProvenanceStep>,
    /// Origin of the text the final caption starts with.
    pub final_origin: Option<CandidateOrigin>,
    /// Highest similarity-to-longest seen during selection.
    pub max_similarity: Option<f64>,
}

impl CaptionBundle {
    pub fn new(record_id: &str) -> Self {
        Self {
            record_id: record_id.to_string(),
            candidates: Vec::new(),
            final_text: None,
            provenance: vec![ProvenanceStep::Ingested],
            final_origin: None,
            max_similarity: None,
        }
    }

    pub fn provenance(&self) -> &[ProvenanceStep] {
        &self.provenance
    }

    pub fn push_step(&mut self, step: ProvenanceStep) {
        self.provenance.push(step);
    }

    pub fn provenance_string(&self) -> String {
        self.provenance.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(">")
    }

    pub fn finalize_expansion(&mut self, expansion: &Expansion) {
        self.candidates = vec![CaptionCandidate::new(expansion.text.clone(), CandidateOrigin::TemplateExpansion)];
        self.final_text = Some(expansion.text.clone());
        self.final_origin = Some(CandidateOrigin::TemplateExpansion);
        self.push_step(ProvenanceStep::TemplateExpansion);
    }

    pub fn finalize_selection(&mut self, selection: Selection) {
        self.final_origin = selection.candidates.first().map(|c| c.origin);
        self.candidates = selection.candidates;
        self.final_text = Some(selection.final_text);
        self.max_similarity = selection.max_similarity;
        self.push_step(ProvenanceStep::Diversified);
    }
}

/// Returns `n` stochastic captions for an image. Latent sampling is the
/// service's business; callers only see strings.
pub trait Captioner: Send + Sync {
    fn sample_captions(&self, record_id: &str, image_ref: &str, n: usize) -> Result<Vec<String>, ClientError>;
}

/// Requests up to `n` candidates, retrying transport failures up to
/// `attempts` times. Exact duplicates and blank texts are dropped.
pub fn request_candidates(
    client: &dyn Captioner,
    record_id: &str,
    image_ref: &str,
    n: usize,
    attempts: u32,
) -> Result<Vec<CaptionCandidate>, CaptionError> {
    let n = n.max(1);
    let mut last = String::new();
    for attempt in 0..attempts.max(1) {
        match client.sample_captions(record_id, image_ref, n) {
            Ok(texts) => {
                let mut seen = HashSet::new();
                return Ok(texts
                    .into_iter()
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty() && seen.insert(t.clone()))
                    .take(n)
                    .map(|t| CaptionCandidate::new(t, CandidateOrigin::CaptionerSample))
                    .collect());
            }
            Err(e) => {
                tracing::debug!(record_id, attempt, error = %e, "captioner request failed");
                last = e.to_string();
            }
        }
    }
    Err(CaptionError::CaptionerUnavailable(last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Fixed(Vec<&'static str>);

    impl Captioner for Fixed {
        fn sample_captions(&self, _: &str, _: &str, _: usize) -> Result<Vec<String>, ClientError> {
            Ok(self.0.iter().map(|s| s.to_string()).collect())
        }
    }

    struct Down(AtomicU32);

    impl Captioner for Down {
        fn sample_captions(&self, _: &str, _: &str, _: usize) -> Result<Vec<String>, ClientError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Err(ClientError::Transport("connection refused".into()))
        }
    }

    #[test]
    fn five_distinct() {
        let c = Fixed(vec!["a", "b", "c", "d", "e"]);
        assert_eq!(request_candidates(&c, "r", "img", 5, 1).unwrap().len(), 5);
    }

    #[test]
    fn collapses_duplicates() {
        let got = request_candidates(&Fixed(vec!["a", "a", "b"]), "r", "img", 5, 1).unwrap();
        let texts: Vec<_> = got.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["a", "b"]);
        assert!(got.iter().all(|c| c.origin == CandidateOrigin::CaptionerSample));
    }

    #[test]
    fn unavailable_after_retries() {
        let down = Down(AtomicU32::new(0));
        assert!(matches!(request_candidates(&down, "r", "img", 5, 3), Err(CaptionError::CaptionerUnavailable(_))));
        assert_eq!(down.0.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn provenance_is_append_only() {
        let mut b = CaptionBundle::new("r");
        b.push_step(ProvenanceStep::Diversified);
        b.push_step(ProvenanceStep::HumanRefined);
        assert_eq!(b.provenance_string(), "ingested>diversified>human_refined");
    }
}
