//! Jobs and review items shared by the store, the service and the API.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Ingest,
    Expand,
    Diversify,
    Instruct,
    Dedup,
    Assemble,
}

impl JobKind {
    pub const ALL: [JobKind; 6] =
        [JobKind::Ingest, JobKind::Expand, JobKind::Diversify, JobKind::Instruct, JobKind::Dedup, JobKind::Assemble];

    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Ingest => "ingest",
            JobKind::Expand => "expand",
            JobKind::Diversify => "diversify",
            JobKind::Instruct => "instruct",
            JobKind::Dedup => "dedup",
            JobKind::Assemble => "assemble",
        }
    }
}

impl FromStr for JobKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        JobKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown job kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// queued -> running -> done | failed
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    pub error: Option<String>,
    pub params: serde_json::Value,
    /// Hash of kind, params and seed; identical submissions share a job.
    pub fingerprint: String,
    pub result: Option<serde_json::Value>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewReason {
    SubtitleAligned,
    LowSimilarityMargin,
    SampledAudit,
}

impl ReviewReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewReason::SubtitleAligned => "subtitle_aligned",
            ReviewReason::LowSimilarityMargin => "low_similarity_margin",
            ReviewReason::SampledAudit => "sampled_audit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Accepted,
    Rejected,
    Edited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub record_id: String,
    pub proposed_text: String,
    pub provenance: Vec<String>,
    pub reason: ReviewReason,
    pub state: ReviewState,
    /// Replacement text, set only for edited items.
    pub edited_text: Option<String>,
    pub reviewer: Option<String>,
    pub decided_at: Option<DateTime<Utc>>,
    /// Relative URL of the image served by the API.
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub item_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_text: Option<String>,
    #[serde(default)]
    pub reviewer: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    #[serde(default = "Utc::now")]
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewCounts {
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub edited: usize,
}
