//! Durable pipeline state: an append-only JSON-lines event log plus periodic
//! snapshots, and content-addressed images.
//!
//! ```text
//! <store>/log.jsonl        {"seq": n, "event": {...}} per line, fsynced
//! <store>/snapshot.json    {"seq": n, "state": {...}}, replaced atomically
//! <store>/images/<record_id>.png
//! <store>/manifests/       assembly output
//! <store>/reports/         dedup report
//! ```
//!
//! Recovery loads the snapshot and replays log events with a higher `seq`.
//! A torn final log line (crash during append) is dropped.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::CaptionBundle;
use crate::ingest::media::{MediaRecord, RawPair};
use crate::instruct::InstructionSample;
use crate::knowledge::{AttributeFact, AttributeSchema, KnowledgeBase, TaxonRecord};
use crate::quality::{DedupReport, ImageHash};
use crate::service::model::{Job, ReviewItem};

const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Everything the pipeline knows. Only [`Event`]s change it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub records: BTreeMap<String, MediaRecord>,
    pub raw_pairs: BTreeMap<String, RawPair>,
    pub knowledge: KnowledgeBase,
    pub sampler_cursors: BTreeMap<String, u64>,
    pub bundles: BTreeMap<String, CaptionBundle>,
    /// Keyed by `record_id#template_id#generator`.
    pub samples: BTreeMap<String, InstructionSample>,
    pub failed_samples: BTreeMap<String, InstructionSample>,
    pub hashes: BTreeMap<String, ImageHash>,
    pub dedup: Option<DedupReport>,
    pub review_items: BTreeMap<String, ReviewItem>,
    /// Decision idempotency key -> item as returned when first applied.
    pub decision_keys: BTreeMap<String, ReviewItem>,
    pub jobs: BTreeMap<String, Job>,
    /// Job idempotency key -> job id.
    pub job_keys: BTreeMap<String, String>,
    pub next_job: u64,
    pub next_item: u64,
}

pub fn sample_key(sample: &InstructionSample) -> String {
    format!("{}#{}#{}", sample.record_id, sample.template_id, sample.generator.as_str())
}

impl StoreState {
    pub fn review_for_record(&self, record_id: &str) -> Option<&ReviewItem> {
        self.review_items.values().find(|i| i.record_id == record_id)
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::RecordIngested { record, raw } => {
                if let Some(raw) = raw {
                    self.raw_pairs.insert(record.record_id.clone(), raw);
                }
                self.records.entry(record.record_id.clone()).or_insert(record);
            }
            Event::SchemaSet(schema) => self.knowledge.set_schema(schema),
            Event::KnowledgeImported { taxa, facts } => {
                for t in taxa {
                    self.knowledge.upsert_taxon(t);
                }
                // Facts were validated before the event was logged.
                let _ = self.knowledge.import_facts(facts);
            }
            Event::SamplerAdvanced { taxon_id, cursor } => {
                self.sampler_cursors.insert(taxon_id, cursor);
            }
            Event::BundleSet(bundle) => {
                self.bundles.insert(bundle.record_id.clone(), bundle);
            }
            Event::SampleStored(sample) => {
                let key = sample_key(&sample);
                self.failed_samples.remove(&key);
                self.samples.insert(key, sample);
            }
            Event::SampleFailed(sample) => {
                self.failed_samples.insert(sample_key(&sample), sample);
            }
            Event::HashesSet(hashes) => self.hashes.extend(hashes),
            Event::DedupSet(report) => self.dedup = Some(report),
            Event::ReviewEnqueued(item) => {
                self.next_item += 1;
                self.review_items.insert(item.item_id.clone(), item);
            }
            Event::DecisionApplied { item, idempotency_key } => {
                if let Some(key) = idempotency_key {
                    self.decision_keys.insert(key, item.clone());
                }
                self.review_items.insert(item.item_id.clone(), item);
            }
            Event::JobCreated { job, idempotency_key } => {
                self.next_job += 1;
                if let Some(key) = idempotency_key {
                    self.job_keys.insert(key, job.job_id.clone());
                }
                self.jobs.insert(job.job_id.clone(), job);
            }
            Event::JobUpdated(job) => {
                self.jobs.insert(job.job_id.clone(), job);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Event {
    RecordIngested { record: MediaRecord, raw: Option<RawPair> },
    SchemaSet(AttributeSchema),
    KnowledgeImported { taxa: Vec<TaxonRecord>, facts: Vec<AttributeFact> },
    SamplerAdvanced { taxon_id: String, cursor: u64 },
    BundleSet(CaptionBundle),
    SampleStored(InstructionSample),
    SampleFailed(InstructionSample),
    HashesSet(BTreeMap<String, ImageHash>),
    DedupSet(DedupReport),
    ReviewEnqueued(ReviewItem),
    DecisionApplied { item: ReviewItem, idempotency_key: Option<String> },
    JobCreated { job: Job, idempotency_key: Option<String> },
    JobUpdated(Job),
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state: StoreState,
}

/// Single-writer handle. Callers share it behind a mutex.
pub struct Store {
    dir: PathBuf,
    state: StoreState,
    seq: u64,
    since_snapshot: u64,
    snapshot_every: u64,
    log: File,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        for sub in ["", "images", "manifests", "reports"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let snap_path = dir.join(SNAPSHOT_FILE);
        let (mut seq, mut state) = match fs::read(&snap_path) {
            Ok(bytes) => {
                let snap: Snapshot =
                    serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
                (snap.seq, snap.state)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (0, StoreState::default()),
            Err(e) => return Err(io_err(&snap_path)(e)),
        };

        let log_path = dir.join(LOG_FILE);
        let mut replayed = 0;
        if log_path.exists() {
            let file = File::open(&log_path).map_err(io_err(&log_path))?;
            let mut valid_len = 0u64;
            let mut lines = BufReader::new(file).split(b'\n').enumerate().peekable();
            while let Some((i, line)) = lines.next() {
                let line = line.map_err(io_err(&log_path))?;
                let is_last = lines.peek().is_none();
                match serde_json::from_slice::<LogLine>(&line) {
                    Ok(entry) => {
                        valid_len += line.len() as u64 + 1;
                        if entry.seq > seq {
                            seq = entry.seq;
                            state.apply(entry.event);
                            replayed += 1;
                        }
                    }
                    Err(_) if is_last => {
                        tracing::warn!(line = i + 1, "dropping torn final log line");
                        let f = OpenOptions::new().write(true).open(&log_path).map_err(io_err(&log_path))?;
                        f.set_len(valid_len).map_err(io_err(&log_path))?;
                        f.sync_all().map_err(io_err(&log_path))?;
                    }
                    Err(e) => return Err(StoreError::CorruptLog { line: i + 1, message: e.to_string() }),
                }
            }
        }
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        let len = log.metadata().map_err(io_err(&log_path))?.len();
        if len > 0 && fs::read(&log_path).map_err(io_err(&log_path))?.last() != Some(&b'\n') {
            // Complete final entry missing its newline.
            log.write_all(b"\n").map_err(io_err(&log_path))?;
            log.sync_data().map_err(io_err(&log_path))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            state,
            seq,
            since_snapshot: replayed,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            log,
        })
    }

    pub fn set_snapshot_every(&mut self, n: u64) {
        self.snapshot_every = n.max(1);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Logs `event` durably, then applies it.
    pub fn append(&mut self, event: Event) -> Result<(), StoreError> {
        let line = LogLine { seq: self.seq + 1, event };
        let mut bytes = serde_json::to_vec(&line).expect("events serialize");
        bytes.push(b'\n');
        let path = self.dir.join(LOG_FILE);
        self.log.write_all(&bytes).map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.seq += 1;
        self.state.apply(line.event);
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot()?;
        }
        Ok(())
    }

    pub fn append_all(&mut self, events: impl IntoIterator<Item = Event>) -> Result<(), StoreError> {
        for e in events {
            self.append(e)?;
        }
        Ok(())
    }

    /// Writes the snapshot atomically and truncates the log.
    pub fn snapshot(&mut self) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join("snapshot.json.tmp");
        let bytes =
            serde_json::to_vec(&Snapshot { seq: self.seq, state: self.state.clone() }).expect("state serializes");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        // Entries up to `seq` are now in the snapshot; replay skips them even
        // if the truncate below never happens.
        let log_path = self.dir.join(LOG_FILE);
        self.log.set_len(0).map_err(io_err(&log_path))?;
        self.log.sync_all().map_err(io_err(&log_path))?;
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn image_rel_path(record_id: &str) -> String {
        format!("images/{record_id}.png")
    }

    pub fn image_path(&self, record_id: &str) -> PathBuf {
        self.dir.join(Self::image_rel_path(record_id))
    }

    /// Stores pixels as PNG under their record id; existing files are kept.
    pub fn put_image(&self, record_id: &str, pixels: &RgbaImage) -> Result<PathBuf, StoreError> {
        let path = self.image_path(record_id);
        if path.exists() {
            return Ok(path);
        }
        let tmp = path.with_extension("png.tmp");
        pixels
            .save_with_format(&tmp, ImageFormat::Png)
            .map_err(|e| StoreError::Io { path: tmp.clone(), message: e.to_string() })?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn manifests_dir(&self) -> PathBuf {
        self.dir.join("manifests")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::media::Source;
    use chrono::{TimeZone, Utc};

    fn record(id: &str) -> MediaRecord {
        MediaRecord {
            record_id: id.into(),
            source: Source::Web,
            origin_uri: format!("https://example.org/{id}.jpg"),
            category_annotation: None,
            raw_text: None,
            width: 100,
            height: 100,
            created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    #[test]
    fn replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let before = {
            let mut s = Store::open(dir.path()).unwrap();
            s.append(Event::RecordIngested { record: record("a"), raw: None }).unwrap();
            s.append(Event::SamplerAdvanced { taxon_id: "t".into(), cursor: 4 }).unwrap();
            s.state().clone()
        };
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.state(), &before);
        assert_eq!(s.seq(), 2);
    }

    #[test]
    fn snapshot_then_more_events() {
        let dir = tempfile::tempdir().unwrap();
        let before = {
            let mut s = Store::open(dir.path()).unwrap();
            s.set_snapshot_every(2);
            for id in ["a", "b", "c"] {
                s.append(Event::RecordIngested { record: record(id), raw: None }).unwrap();
            }
            s.state().clone()
        };
        assert!(dir.path().join(SNAPSHOT_FILE).exists());
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.state(), &before);
        assert_eq!(s.seq(), 3);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.append(Event::RecordIngested { record: record("a"), raw: None }).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(LOG_FILE)).unwrap();
        f.write_all(b"{\"seq\":2,\"event\":{\"type\":\"rec").unwrap();
        drop(f);
        let mut s = Store::open(dir.path()).unwrap();
        assert_eq!(s.state().records.len(), 1);
        s.append(Event::RecordIngested { record: record("b"), raw: None }).unwrap();
        drop(s);
        assert_eq!(Store::open(dir.path()).unwrap().state().records.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOG_FILE), "garbage\n{\"seq\":1}\n").unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn images_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        let img = RgbaImage::from_pixel(4, 4, image::Rgba([1, 2, 3, 255]));
        let p = s.put_image("abc", &img).unwrap();
        assert!(p.ends_with("images/abc.png"));
        let back = image::open(&p).unwrap().to_rgba8();
        assert_eq!(back, img);
    }
}
