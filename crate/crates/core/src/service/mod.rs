//! Job orchestration, persistence and the review queue.

pub mod http;
pub mod model;
mod pipeline;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use model::{
    Job, JobKind, JobState, Progress, ReviewCounts, ReviewDecision, ReviewItem, ReviewReason, ReviewState, Verdict,
};
pub use pipeline::{
    build_items, AssembleParams, DedupParams, DiversifyParams, DumpInput, ExpandParams, GeneratorChoice, IngestParams,
    InstructParams, PageInput, VideoInput,
};

use crate::assembly::{compute_stats, select_entries, split_position, Stage, StatsReport};
use crate::caption::{Captioner, ProvenanceStep, SimilarityBackend, TfCosine};
use crate::clients::{ClientError, HttpCaptioner, HttpEmbedder, HttpLlm};
use crate::config::{ClientMode, Config, ExtractorChoice, SimilarityChoice};
use crate::ingest::media::{FfmpegExtractor, FrameExtractor};
use crate::instruct::{LlmClient, TemplateSet};
use crate::knowledge::load_attribute_schema;
use crate::mock::{MockCaptioner, MockFrameExtractor, MockLlm};
use crate::quality::FilterRules;
use crate::store::{Event, Store, StoreError, StoreState};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("unknown review item `{0}`")]
    UnknownItem(String),
    #[error("review item `{0}` is already decided")]
    AlreadyDecided(String),
    #[error("verdict edit requires non-empty edited_text")]
    MissingEditedText,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ServiceError {
    /// Stable name used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidParams(_) => "InvalidParams",
            Self::UnknownJob(_) => "UnknownJob",
            Self::UnknownRecord(_) => "UnknownRecord",
            Self::UnknownItem(_) => "UnknownItem",
            Self::AlreadyDecided(_) => "AlreadyDecided",
            Self::MissingEditedText => "MissingEditedText",
            Self::Config(_) => "ConfigError",
            Self::Store(_) => "StoreError",
        }
    }
}

/// Stand-in for a remote client with no endpoint configured.
struct Unconfigured(&'static str);

impl Captioner for Unconfigured {
    fn sample_captions(&self, _: &str, _: &str, _: usize) -> Result<Vec<String>, ClientError> {
        Err(ClientError::Transport(format!("{} is not configured", self.0)))
    }
}

impl LlmClient for Unconfigured {
    fn complete(&self, _: &str, _: &str) -> Result<String, ClientError> {
        Err(ClientError::Transport(format!("{} is not configured", self.0)))
    }
}

#[derive(Clone)]
pub struct Clients {
    pub captioner: Arc<dyn Captioner>,
    pub similarity: Arc<dyn SimilarityBackend>,
    pub llm: Arc<dyn LlmClient>,
    pub frames: Arc<dyn FrameExtractor>,
}

impl Clients {
    pub fn mock() -> Self {
        Self {
            captioner: Arc::new(MockCaptioner),
            similarity: Arc::new(TfCosine),
            llm: Arc::new(MockLlm),
            frames: Arc::new(MockFrameExtractor),
        }
    }

    pub fn from_config(config: &Config) -> Result<Self, ServiceError> {
        let c = &config.clients;
        let timeout = Duration::from_millis(c.timeout_ms);
        let err = |e: ClientError| ServiceError::Config(e.to_string());
        let frames: Arc<dyn FrameExtractor> = match config.frames.extractor {
            ExtractorChoice::Ffmpeg => Arc::new(FfmpegExtractor {
                ffmpeg: config.frames.ffmpeg.clone(),
                ffprobe: config.frames.ffprobe.clone(),
            }),
            ExtractorChoice::Mock => Arc::new(MockFrameExtractor),
        };
        let mut clients = match c.mode {
            ClientMode::Mock => Self { frames, ..Self::mock() },
            ClientMode::Http => Self {
                captioner: match &c.captioner_url {
                    Some(u) => Arc::new(HttpCaptioner::new(u, c.token.clone(), timeout).map_err(err)?),
                    None => Arc::new(Unconfigured("clients.captioner_url")),
                },
                similarity: Arc::new(TfCosine),
                llm: match &c.llm_url {
                    Some(u) => Arc::new(HttpLlm::new(u, c.token.clone(), timeout).map_err(err)?),
                    None => Arc::new(Unconfigured("clients.llm_url")),
                },
                frames,
            },
        };
        let use_embedder = match c.similarity {
            SimilarityChoice::Embedder => true,
            SimilarityChoice::TfCosine => false,
            SimilarityChoice::Auto => c.mode == ClientMode::Http && c.embedder_url.is_some(),
        };
        if use_embedder {
            let url = c
                .embedder_url
                .as_deref()
                .ok_or_else(|| ServiceError::Config("clients.similarity = embedder needs embedder_url".into()))?;
            clients.similarity = Arc::new(HttpEmbedder::new(url, c.token.clone(), timeout).map_err(err)?);
        }
        Ok(clients)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub records: usize,
    pub captioned: usize,
    pub instruction_samples: usize,
    pub failed_instruction_samples: usize,
    pub dedup_dropped: usize,
    pub review: ReviewCounts,
    /// What each stage would contain right now, pending reviews excluded.
    pub pretrain: StatsReport,
    pub finetune: StatsReport,
}

pub struct Service {
    store: Mutex<Store>,
    config: Config,
    clients: Clients,
    instructions: TemplateSet,
    prompts: TemplateSet,
    filters: FilterRules,
    /// Pipeline jobs run one at a time; API reads and decisions interleave.
    pipeline_lock: Mutex<()>,
    live: Mutex<HashMap<String, Progress>>,
    leases: Mutex<HashMap<String, (String, Instant)>>,
}

impl Service {
    pub fn open(store_dir: &Path, config: Config, clients: Clients) -> Result<Self, ServiceError> {
        let cfg_err = |e: String| ServiceError::Config(e);
        let instructions = match &config.templates.instructions {
            Some(p) => TemplateSet::load(p).map_err(|e| cfg_err(e.to_string()))?,
            None => TemplateSet::default_instructions(),
        };
        let prompts = match &config.templates.prompts {
            Some(p) => TemplateSet::load(p).map_err(|e| cfg_err(e.to_string()))?,
            None => TemplateSet::default_prompts(),
        };
        let filters = match &config.templates.filters {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
                FilterRules::parse(&text).map_err(|e| cfg_err(e.to_string()))?
            }
            None => config.filters,
        };
        if let Some(p) = &config.templates.schema {
            load_attribute_schema(p).map_err(|e| cfg_err(e.to_string()))?;
        }
        let mut store = Store::open(store_dir)?;
        // Jobs cut off by a crash cannot resume mid-way.
        let interrupted: Vec<Job> =
            store.state().jobs.values().filter(|j| j.state == JobState::Running).cloned().collect();
        for mut job in interrupted {
            job.state = JobState::Failed;
            job.error = Some("interrupted by restart".into());
            job.finished_at = Some(Utc::now());
            store.append(Event::JobUpdated(job))?;
        }
        Ok(Self {
            store: Mutex::new(store),
            config,
            clients,
            instructions,
            prompts,
            filters,
            pipeline_lock: Mutex::new(()),
            live: Mutex::new(HashMap::new()),
            leases: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn prompts(&self) -> &TemplateSet {
        &self.prompts
    }

    pub fn instructions(&self) -> &TemplateSet {
        &self.instructions
    }

    pub(crate) fn store(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Clone of the current state for readers.
    pub fn snapshot_state(&self) -> StoreState {
        self.store().state().clone()
    }

    pub fn store_dir(&self) -> std::path::PathBuf {
        self.store().dir().to_path_buf()
    }

    /// Forces a snapshot and log truncation.
    pub fn checkpoint(&self) -> Result<(), ServiceError> {
        self.store().snapshot().map_err(Into::into)
    }

    fn upstream(kind: JobKind) -> &'static [JobKind] {
        use JobKind::*;
        match kind {
            Ingest => &[],
            Expand | Dedup | Instruct => &[Ingest],
            Diversify => &[Ingest, Expand],
            Assemble => &[Ingest, Expand, Diversify, Instruct, Dedup],
        }
    }

    /// Hash of kind, canonical params, seed and the generations of the data
    /// the job reads, so an identical resubmission maps to the same job until
    /// its inputs change.
    fn fingerprint(&self, state: &StoreState, kind: JobKind, params: &serde_json::Value) -> String {
        let mut h = Sha256::new();
        h.update(kind.as_str());
        h.update(serde_json::to_vec(params).expect("json"));
        h.update(self.config.seed.to_le_bytes());
        for up in Self::upstream(kind) {
            let generation = state
                .jobs
                .values()
                .filter(|j| j.kind == *up && j.state == JobState::Done)
                .filter(|j| j.result.as_ref().and_then(|r| r.get("changed")).and_then(|c| c.as_bool()) == Some(true))
                .count();
            h.update((generation as u64).to_le_bytes());
        }
        if kind == JobKind::Assemble {
            let decided = state.review_items.values().filter(|i| i.state != ReviewState::Pending).count();
            h.update((state.review_items.len() as u64).to_le_bytes());
            h.update((decided as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_params(kind: JobKind, params: &serde_json::Value) -> Result<(), ServiceError> {
        fn parse<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<(), ServiceError> {
            serde_json::from_value::<T>(v.clone()).map(|_| ()).map_err(|e| ServiceError::InvalidParams(e.to_string()))
        }
        match kind {
            JobKind::Ingest => parse::<IngestParams>(params),
            JobKind::Expand => parse::<ExpandParams>(params),
            JobKind::Diversify => parse::<DiversifyParams>(params),
            JobKind::Instruct => parse::<InstructParams>(params),
            JobKind::Dedup => parse::<DedupParams>(params),
            JobKind::Assemble => parse::<AssembleParams>(params),
        }
    }

    /// Records a job, or returns the existing one for a repeated idempotency
    /// key or an identical non-failed submission. The flag is true for a new
    /// job.
    pub fn submit_job(
        &self,
        kind: JobKind,
        params: serde_json::Value,
        idempotency_key: Option<String>,
    ) -> Result<(Job, bool), ServiceError> {
        let params = if params.is_null() { serde_json::json!({}) } else { params };
        Self::check_params(kind, &params)?;
        let mut store = self.store();
        let state = store.state();
        if let Some(job) =
            idempotency_key.as_ref().and_then(|k| state.job_keys.get(k)).and_then(|id| state.jobs.get(id))
        {
            return Ok((job.clone(), false));
        }
        let fingerprint = self.fingerprint(state, kind, &params);
        if let Some(job) = state.jobs.values().find(|j| j.fingerprint == fingerprint && j.state != JobState::Failed) {
            return Ok((job.clone(), false));
        }
        let job = Job {
            job_id: format!("job-{:06}", state.next_job + 1),
            kind,
            state: JobState::Queued,
            progress: Progress::default(),
            error: None,
            params,
            fingerprint,
            result: None,
            created_at: Utc::now(),
            finished_at: None,
        };
        store.append(Event::JobCreated { job: job.clone(), idempotency_key })?;
        Ok((job, true))
    }

    pub fn job(&self, job_id: &str) -> Result<Job, ServiceError> {
        let mut job =
            self.store().state().jobs.get(job_id).cloned().ok_or_else(|| ServiceError::UnknownJob(job_id.into()))?;
        if job.state == JobState::Running {
            if let Some(p) = self.live.lock().unwrap().get(job_id) {
                job.progress = *p;
            }
        }
        Ok(job)
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.store().state().jobs.values().cloned().collect()
    }

    pub(crate) fn set_progress(&self, job_id: &str, progress: Progress) {
        self.live.lock().unwrap().insert(job_id.to_string(), progress);
    }

    /// Runs a queued job to completion on the calling thread.
    pub fn execute_job(&self, job_id: &str) -> Result<Job, ServiceError> {
        let _guard = self.pipeline_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut job = self.job(job_id)?;
        if job.state != JobState::Queued {
            return Ok(job);
        }
        job.state = JobState::Running;
        self.store().append(Event::JobUpdated(job.clone()))?;
        tracing::info!(job_id, kind = job.kind.as_str(), "job started");
        let outcome = self.dispatch(&job);
        let progress = self.live.lock().unwrap().remove(job_id).unwrap_or_default();
        job.progress = progress;
        match outcome {
            Ok(result) => {
                job.state = JobState::Done;
                job.result = Some(result);
            }
            Err(message) => {
                tracing::warn!(job_id, error = %message, "job failed");
                job.state = JobState::Failed;
                job.error = Some(message);
            }
        }
        job.finished_at = Some(Utc::now());
        self.store().append(Event::JobUpdated(job.clone()))?;
        Ok(job)
    }

    /// Submit and run synchronously; returns the existing job when an
    /// identical one already finished.
    pub fn run_job(&self, kind: JobKind, params: serde_json::Value) -> Result<Job, ServiceError> {
        let (job, _) = self.submit_job(kind, params, None)?;
        if job.state == JobState::Queued {
            self.execute_job(&job.job_id)
        } else {
            Ok(job)
        }
    }

    fn dispatch(&self, job: &Job) -> Result<serde_json::Value, String> {
        let p = &job.params;
        fn typed<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T, String> {
            serde_json::from_value(v.clone()).map_err(|e| format!("InvalidParams: {e}"))
        }
        match job.kind {
            JobKind::Ingest => self.run_ingest(&job.job_id, typed(p)?),
            JobKind::Expand => self.run_expand(&job.job_id, typed(p)?),
            JobKind::Diversify => self.run_diversify(&job.job_id, typed(p)?),
            JobKind::Instruct => self.run_instruct(&job.job_id, typed(p)?),
            JobKind::Dedup => self.run_dedup(&job.job_id, typed(p)?),
            JobKind::Assemble => self.run_assemble(&job.job_id, typed(p)?),
        }
    }

    /// Routing policy: every subtitle-aligned caption, every caption whose
    /// highest candidate similarity lies in the margin band, and a hashed
    /// audit sample of the rest.
    pub fn review_reason(
        &self,
        record_id: &str,
        provenance: &[ProvenanceStep],
        max_similarity: Option<f64>,
    ) -> Option<ReviewReason> {
        let r = &self.config.review;
        if provenance.contains(&ProvenanceStep::SubtitleAligned) {
            Some(ReviewReason::SubtitleAligned)
        } else if max_similarity.is_some_and(|s| s >= r.band_low && s < r.band_high) {
            Some(ReviewReason::LowSimilarityMargin)
        } else if split_position(&format!("audit:{record_id}"), self.config.seed) < r.audit_rate {
            Some(ReviewReason::SampledAudit)
        } else {
            None
        }
    }

    /// Adds a pending item; a record already under review keeps its item.
    pub fn enqueue_review(
        &self,
        record_id: &str,
        proposed_text: &str,
        reason: ReviewReason,
    ) -> Result<ReviewItem, ServiceError> {
        let mut store = self.store();
        enqueue_locked(&mut store, record_id, proposed_text, reason)
    }

    /// Oldest pending item not leased to another reviewer, plus the number of
    /// pending items.
    pub fn next_review(&self, reviewer: &str) -> Option<(ReviewItem, usize)> {
        let store = self.store();
        let pending: Vec<&ReviewItem> =
            store.state().review_items.values().filter(|i| i.state == ReviewState::Pending).collect();
        let depth = pending.len();
        let lease = Duration::from_secs(self.config.review.lease_secs);
        let mut leases = self.leases.lock().unwrap();
        let now = Instant::now();
        leases.retain(|_, (_, at)| now.duration_since(*at) < lease);
        let item = pending.into_iter().find(|i| leases.get(&i.item_id).is_none_or(|(who, _)| who == reviewer))?.clone();
        leases.insert(item.item_id.clone(), (reviewer.to_string(), now));
        Some((item, depth))
    }

    pub fn review_item(&self, item_id: &str) -> Option<ReviewItem> {
        self.store().state().review_items.get(item_id).cloned()
    }

    /// Applies one decision. Decisions on an item are serialized by the store
    /// lock; replaying an idempotency key returns the first result.
    pub fn apply_decision(&self, decision: ReviewDecision) -> Result<ReviewItem, ServiceError> {
        let mut store = self.store();
        let state = store.state();
        if let Some(prev) = decision.idempotency_key.as_ref().and_then(|k| state.decision_keys.get(k)) {
            return Ok(prev.clone());
        }
        let mut item = state
            .review_items
            .get(&decision.item_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownItem(decision.item_id.clone()))?;
        if item.state != ReviewState::Pending {
            return Err(ServiceError::AlreadyDecided(item.item_id));
        }
        match decision.verdict {
            Verdict::Accept => item.state = ReviewState::Accepted,
            Verdict::Reject => item.state = ReviewState::Rejected,
            Verdict::Edit => {
                let text = decision.edited_text.as_deref().map(str::trim).unwrap_or("");
                if text.is_empty() {
                    return Err(ServiceError::MissingEditedText);
                }
                item.state = ReviewState::Edited;
                item.edited_text = Some(text.to_string());
            }
        }
        item.reviewer = Some(if decision.reviewer.is_empty() { "anonymous".into() } else { decision.reviewer });
        item.decided_at = Some(decision.decided_at);
        store.append(Event::DecisionApplied { item: item.clone(), idempotency_key: decision.idempotency_key })?;
        self.leases.lock().unwrap().remove(&item.item_id);
        Ok(item)
    }

    pub fn stats(&self) -> ServiceStats {
        let state = self.snapshot_state();
        let items = build_items(&state, &self.filters);
        let reviews = pipeline::review_outcomes(&state);
        let stage_stats =
            |stage: Stage| select_entries(stage, &items, &reviews, true).map(|e| compute_stats(&e)).unwrap_or_default();
        let mut review = ReviewCounts::default();
        for i in state.review_items.values() {
            match i.state {
                ReviewState::Pending => review.pending += 1,
                ReviewState::Accepted => review.accepted += 1,
                ReviewState::Rejected => review.rejected += 1,
                ReviewState::Edited => review.edited += 1,
            }
        }
        ServiceStats {
            records: state.records.len(),
            captioned: state.bundles.values().filter(|b| b.final_text.is_some()).count(),
            instruction_samples: state.samples.len(),
            failed_instruction_samples: state.failed_samples.len(),
            dedup_dropped: state.dedup.as_ref().map_or(0, |d| d.dropped_count),
            review,
            pretrain: stage_stats(Stage::Pretrain),
            finetune: stage_stats(Stage::Finetune),
        }
    }

    pub fn manifest_path(&self, stage: Stage) -> std::path::PathBuf {
        self.store().manifests_dir().join(crate::assembly::manifest_file_name(stage))
    }

    pub fn image_file(&self, record_id: &str) -> std::path::PathBuf {
        self.store().image_path(record_id)
    }

    pub fn review_counts_by_reason(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for i in self.store().state().review_items.values() {
            *out.entry(i.reason.as_str().to_string()).or_default() += 1;
        }
        out
    }
}

fn enqueue_locked(
    store: &mut Store,
    record_id: &str,
    proposed_text: &str,
    reason: ReviewReason,
) -> Result<ReviewItem, ServiceError> {
    let state = store.state();
    if !state.records.contains_key(record_id) {
        return Err(ServiceError::UnknownRecord(record_id.into()));
    }
    if let Some(existing) = state.review_for_record(record_id) {
        return Ok(existing.clone());
    }
    let provenance = state
        .bundles
        .get(record_id)
        .map(|b| b.provenance().iter().map(|s| s.as_str().to_string()).collect())
        .unwrap_or_else(|| vec![ProvenanceStep::Ingested.as_str().to_string()]);
    let item = ReviewItem {
        item_id: format!("rev-{:06}", state.next_item + 1),
        record_id: record_id.into(),
        proposed_text: proposed_text.into(),
        provenance,
        reason,
        state: ReviewState::Pending,
        edited_text: None,
        reviewer: None,
        decided_at: None,
        image_url: format!("/images/{record_id}.png"),
    };
    store.append(Event::ReviewEnqueued(item.clone()))?;
    Ok(item)
}
