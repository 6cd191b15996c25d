//! Stage manifests, shards, splits and corpus statistics.
//!
//! Output layout for a stage `s` inside the output directory:
//!
//! ```text
//! manifest-s.tsv        header lines starting with '#', then one entry per line
//! shard-s-000000.tsv    the same entry lines, `shard_size` per file
//! stats-s.json          StatsReport
//! split-s.tsv           record_id <TAB> train|val
//! ```
//!
//! Entry columns: record_id, image_path, text, provenance, taxon_id,
//! template_id, instruction. Caption pairs leave the last two empty.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::caption::ProvenanceStep;
use crate::text::escape_field;

pub const DEFAULT_SHARD_SIZE: usize = 10_000;
pub const MANIFEST_COLUMNS: [&str; 7] =
    ["record_id", "image_path", "text", "provenance", "taxon_id", "template_id", "instruction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn resize_target(self) -> u32 {
        match self {
            Stage::Pretrain => 224,
            Stage::Finetune => 384,
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("{} records have unresolved review items", .0.len())]
    UnresolvedReviewItems(Vec<String>),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("shard size must be at least 1")]
    BadShardSize,
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub resize_target: u32,
    pub shard_size: usize,
    /// Train and validation fractions.
    pub split: [f64; 2],
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self { stage, resize_target: stage.resize_target(), shard_size: DEFAULT_SHARD_SIZE, split: [0.95, 0.05] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    CaptionPair,
    InstructionSample,
}

/// One candidate manifest line before review and stage filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyItem {
    pub kind: ItemKind,
    pub record_id: String,
    pub image_path: String,
    pub text: String,
    pub provenance: String,
    pub taxon_id: Option<String>,
    pub source: String,
    /// Candidate origin for caption pairs, generator for instruction samples.
    pub origin: String,
    pub template_id: Option<u32>,
    pub instruction: Option<String>,
    /// Quality filters for pairs, validation for samples.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "text", rename_all = "snake_case")]
pub enum ReviewOutcome {
    Pending,
    Accepted,
    Rejected,
    Edited(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub image_path: String,
    pub text: String,
    pub provenance: String,
    pub taxon_id: String,
    pub template_id: Option<u32>,
    pub instruction: Option<String>,
    pub shard_index: usize,
    #[serde(skip)]
    source: String,
    #[serde(skip)]
    origin: String,
    #[serde(skip)]
    kind: Option<ItemKind>,
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        let fields = [
            escape_field(&self.record_id),
            escape_field(&self.image_path),
            escape_field(&self.text),
            escape_field(&self.provenance),
            escape_field(&self.taxon_id),
            self.template_id.map(|t| t.to_string()).unwrap_or_default(),
            escape_field(self.instruction.as_deref().unwrap_or("")),
        ];
        fields.join("\t")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub pair_count: usize,
    pub distinct_concepts: usize,
    pub per_source: BTreeMap<String, usize>,
    pub instruction_sample_count: usize,
    /// Caption origins and sample generators.
    pub per_origin: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub stage: StageConfig,
    pub entries: Vec<ManifestEntry>,
    pub stats: StatsReport,
    pub build_fingerprint: String,
    pub files: Vec<PathBuf>,
}

pub fn compute_stats(entries: &[ManifestEntry]) -> StatsReport {
    let mut stats = StatsReport { pair_count: entries.len(), ..Default::default() };
    let mut concepts = BTreeSet::new();
    for e in entries {
        if !e.taxon_id.is_empty() {
            concepts.insert(e.taxon_id.as_str());
        }
        if !e.source.is_empty() {
            *stats.per_source.entry(e.source.clone()).or_default() += 1;
        }
        if !e.origin.is_empty() {
            *stats.per_origin.entry(e.origin.clone()).or_default() += 1;
        }
        if e.kind == Some(ItemKind::InstructionSample) || e.template_id.is_some() {
            stats.instruction_sample_count += 1;
        }
    }
    stats.distinct_concepts = concepts.len();
    stats
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

fn check_ratios(ratios: &[f64]) -> Result<f64, AssemblyError> {
    let ok = ratios.len() == 2
        && ratios.iter().all(|r| r.is_finite() && *r >= 0.0)
        && (ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    if ok {
        Ok(ratios[0])
    } else {
        Err(AssemblyError::BadRatios(ratios.to_vec()))
    }
}

/// Position of a record in [0, 1): the top 64 bits of
/// SHA-256(seed as u64 LE ‖ record_id) divided by 2^64.
pub fn split_position(record_id: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(record_id.as_bytes());
    let digest = h.finalize();
    let top = u64::from_be_bytes(digest[..8].try_into().unwrap());
    top as f64 / 2f64.powi(64)
}

/// Assigns each distinct record id to train or val by its hash position, so
/// an id's split never depends on the other ids.
pub fn split_records<S: AsRef<str>>(record_ids: &[S], ratios: &[f64], seed: u64) -> Result<Split, AssemblyError> {
    let train_ratio = check_ratios(ratios)?;
    let distinct: BTreeSet<&str> = record_ids.iter().map(|s| s.as_ref()).collect();
    let mut split = Split::default();
    for id in distinct {
        if split_position(id, seed) < train_ratio {
            split.train.push(id.to_string());
        } else {
            split.val.push(id.to_string());
        }
    }
    Ok(split)
}

fn mark(provenance: &str, step: ProvenanceStep) -> String {
    if provenance.split('>').any(|s| s == step.as_str()) {
        provenance.to_string()
    } else if provenance.is_empty() {
        step.as_str().to_string()
    } else {
        format!("{provenance}>{}", step.as_str())
    }
}

/// Applies review outcomes and the stage filter; returns sorted entries.
pub fn select_entries(
    stage: Stage,
    items: &[AssemblyItem],
    reviews: &BTreeMap<String, ReviewOutcome>,
    exclude_pending: bool,
) -> Result<Vec<ManifestEntry>, AssemblyError> {
    let wanted = match stage {
        Stage::Pretrain => ItemKind::CaptionPair,
        Stage::Finetune => ItemKind::InstructionSample,
    };
    let relevant: Vec<&AssemblyItem> = items.iter().filter(|i| i.kind == wanted && i.passed).collect();
    let pending: BTreeSet<String> = relevant
        .iter()
        .filter(|i| reviews.get(&i.record_id) == Some(&ReviewOutcome::Pending))
        .map(|i| i.record_id.clone())
        .collect();
    if !pending.is_empty() && !exclude_pending {
        return Err(AssemblyError::UnresolvedReviewItems(pending.into_iter().collect()));
    }
    let mut entries = Vec::new();
    for item in relevant {
        let mut text = item.text.clone();
        let mut provenance = item.provenance.clone();
        match reviews.get(&item.record_id) {
            Some(ReviewOutcome::Pending) | Some(ReviewOutcome::Rejected) => continue,
            Some(ReviewOutcome::Accepted) => provenance = mark(&provenance, ProvenanceStep::ReviewAccepted),
            Some(ReviewOutcome::Edited(edited)) if item.kind == ItemKind::CaptionPair => {
                text = edited.clone();
                provenance = mark(&provenance, ProvenanceStep::HumanRefined);
            }
            Some(ReviewOutcome::Edited(_)) | None => {}
        }
        entries.push(ManifestEntry {
            record_id: item.record_id.clone(),
            image_path: item.image_path.clone(),
            text,
            provenance,
            taxon_id: item.taxon_id.clone().unwrap_or_default(),
            template_id: item.template_id,
            instruction: item.instruction.clone(),
            shard_index: 0,
            source: item.source.clone(),
            origin: item.origin.clone(),
            kind: Some(item.kind),
        });
    }
    entries.sort_by(|a, b| (&a.record_id, a.template_id, &a.text).cmp(&(&b.record_id, b.template_id, &b.text)));
    entries.dedup_by(|a, b| a.line() == b.line());
    Ok(entries)
}

pub fn build_fingerprint(config: &StageConfig, entries: &[ManifestEntry], seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(seed.to_le_bytes());
    for e in entries {
        h.update(e.line().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn write(path: &Path, contents: &str) -> Result<(), AssemblyError> {
    fs::write(path, contents).map_err(|e| AssemblyError::Io { path: path.to_path_buf(), message: e.to_string() })
}

pub fn manifest_file_name(stage: Stage) -> String {
    format!("manifest-{stage}.tsv")
}

pub fn shard_file_name(stage: Stage, index: usize) -> String {
    format!("shard-{stage}-{index:06}.tsv")
}

/// Builds and writes one stage. Output depends only on the arguments, so
/// rebuilding from identical inputs reproduces every file byte for byte.
pub fn assemble_stage(
    config: &StageConfig,
    items: &[AssemblyItem],
    reviews: &BTreeMap<String, ReviewOutcome>,
    exclude_pending: bool,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, AssemblyError> {
    if config.shard_size == 0 {
        return Err(AssemblyError::BadShardSize);
    }
    check_ratios(&config.split)?;
    let stage = config.stage;
    let mut entries = select_entries(stage, items, reviews, exclude_pending)?;
    for (i, e) in entries.iter_mut().enumerate() {
        e.shard_index = i / config.shard_size;
    }
    let stats = compute_stats(&entries);
    let fingerprint = build_fingerprint(config, &entries, seed);
    let split = split_records(&entries.iter().map(|e| e.record_id.as_str()).collect::<Vec<_>>(), &config.split, seed)?;

    fs::create_dir_all(out_dir)
        .map_err(|e| AssemblyError::Io { path: out_dir.to_path_buf(), message: e.to_string() })?;
    let prefix = format!("shard-{stage}-");
    if let Ok(dir) = fs::read_dir(out_dir) {
        for f in dir.flatten() {
            if f.file_name().to_string_lossy().starts_with(&prefix) {
                let _ = fs::remove_file(f.path());
            }
        }
    }

    let shard_count = entries.len().div_ceil(config.shard_size);
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# stage={stage}");
    let _ = writeln!(manifest, "# resize_target={}", config.resize_target);
    let _ = writeln!(manifest, "# entries={}", entries.len());
    let _ = writeln!(manifest, "# shards={shard_count}");
    let _ = writeln!(manifest, "# fingerprint={fingerprint}");
    let _ = writeln!(manifest, "# columns={}", MANIFEST_COLUMNS.join("\t"));
    let mut shards = vec![String::new(); shard_count];
    for e in &entries {
        let line = e.line();
        manifest.push_str(&line);
        manifest.push('\n');
        shards[e.shard_index].push_str(&line);
        shards[e.shard_index].push('\n');
    }

    let mut files = Vec::new();
    let manifest_path = out_dir.join(manifest_file_name(stage));
    write(&manifest_path, &manifest)?;
    files.push(manifest_path);
    for (i, shard) in shards.iter().enumerate() {
        let path = out_dir.join(shard_file_name(stage, i));
        write(&path, shard)?;
        files.push(path);
    }
    let stats_path = out_dir.join(format!("stats-{stage}.json"));
    write(&stats_path, &(serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n"))?;
    files.push(stats_path);
    let mut split_text = String::new();
    let mut assigned: Vec<(&str, &str)> = split.train.iter().map(|r| (r.as_str(), "train")).collect();
    assigned.extend(split.val.iter().map(|r| (r.as_str(), "val")));
    assigned.sort();
    for (r, s) in assigned {
        let _ = writeln!(split_text, "{r}\t{s}");
    }
    let split_path = out_dir.join(format!("split-{stage}.tsv"));
    write(&split_path, &split_text)?;
    files.push(split_path);

    Ok(DatasetManifest { stage: config.clone(), entries, stats, build_fingerprint: fingerprint, files })
}

/// Reads the `# key=value` header of a manifest file.
pub fn read_manifest_header(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').trim().split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(record: &str, taxon: &str, source: &str) -> AssemblyItem {
        AssemblyItem {
            kind: ItemKind::CaptionPair,
            record_id: record.into(),
            image_path: format!("images/{record}.png"),
            text: format!("A photo of {taxon} on the reef."),
            provenance: "ingested>template_expansion".into(),
            taxon_id: Some(taxon.into()),
            source: source.into(),
            origin: "template_expansion".into(),
            template_id: None,
            instruction: None,
            passed: true,
        }
    }

    fn six() -> Vec<AssemblyItem> {
        vec![
            pair("r6", "c", "video_plain"),
            pair("r1", "a", "web"),
            pair("r2", "a", "web"),
            pair("r3", "b", "web"),
            pair("r4", "b", "web"),
            pair("r5", "c", "video_plain"),
        ]
    }

    #[test]
    fn six_pairs_pretrain() {
        let dir = tempfile::tempdir().unwrap();
        let m =
            assemble_stage(&StageConfig::new(Stage::Pretrain), &six(), &BTreeMap::new(), false, 7, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.stage.resize_target, 224);
        let ids: Vec<_> = m.entries.iter().map(|e| e.record_id.as_str()).collect();
        assert_eq!(ids, ["r1", "r2", "r3", "r4", "r5", "r6"]);
        assert_eq!(m.stats.pair_count, 6);
        assert_eq!(m.stats.distinct_concepts, 3);
        assert_eq!(m.stats.per_source, BTreeMap::from([("video_plain".into(), 2), ("web".into(), 4)]));
        let text = fs::read_to_string(dir.path().join("manifest-pretrain.tsv")).unwrap();
        assert_eq!(read_manifest_header(&text)["resize_target"], "224");
        assert!(dir.path().join("shard-pretrain-000000.tsv").exists());
        assert_eq!(StageConfig::new(Stage::Finetune).resize_target, 384);
    }

    #[test]
    fn review_outcomes_apply() {
        let dir = tempfile::tempdir().unwrap();
        let reviews = BTreeMap::from([
            ("r2".to_string(), ReviewOutcome::Rejected),
            ("r3".to_string(), ReviewOutcome::Edited("Black-spotted pufferfish over coral rubble.".into())),
            ("r4".to_string(), ReviewOutcome::Accepted),
        ]);
        let m = assemble_stage(&StageConfig::new(Stage::Pretrain), &six(), &reviews, false, 7, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 5);
        assert!(m.entries.iter().all(|e| e.record_id != "r2"));
        let r3 = m.entries.iter().find(|e| e.record_id == "r3").unwrap();
        assert_eq!(r3.text, "Black-spotted pufferfish over coral rubble.");
        assert_eq!(r3.provenance, "ingested>template_expansion>human_refined");
        let r4 = m.entries.iter().find(|e| e.record_id == "r4").unwrap();
        assert!(r4.provenance.ends_with("review_accepted"));
    }

    #[test]
    fn pending_blocks_unless_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let reviews = BTreeMap::from([("r5".to_string(), ReviewOutcome::Pending)]);
        let cfg = StageConfig::new(Stage::Pretrain);
        assert_eq!(
            assemble_stage(&cfg, &six(), &reviews, false, 7, dir.path()).unwrap_err(),
            AssemblyError::UnresolvedReviewItems(vec!["r5".into()])
        );
        assert_eq!(assemble_stage(&cfg, &six(), &reviews, true, 7, dir.path()).unwrap().entries.len(), 5);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = StageConfig { shard_size: 4, ..StageConfig::new(Stage::Pretrain) };
        let mut items = six();
        let ma = assemble_stage(&cfg, &items, &BTreeMap::new(), false, 3, a.path()).unwrap();
        items.reverse();
        let mb = assemble_stage(&cfg, &items, &BTreeMap::new(), false, 3, b.path()).unwrap();
        assert_eq!(ma.build_fingerprint, mb.build_fingerprint);
        assert_eq!(ma.files.len(), 5);
        for (fa, fb) in ma.files.iter().zip(&mb.files) {
            assert_eq!(fa.file_name(), fb.file_name());
            assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
        }
        let other = assemble_stage(&cfg, &items, &BTreeMap::new(), false, 4, b.path()).unwrap();
        assert_ne!(other.build_fingerprint, ma.build_fingerprint);
    }

    #[test]
    fn stage_filter() {
        let mut items = six();
        items[0].passed = false;
        let mut sample = pair("r1", "a", "web");
        sample.kind = ItemKind::InstructionSample;
        sample.template_id = Some(3);
        sample.instruction = Some("please answer how this a interacts with other species in marine ecosystems.".into());
        sample.origin = "llm".into();
        items.push(sample.clone());
        sample.passed = false;
        sample.template_id = Some(4);
        items.push(sample);
        let pre = select_entries(Stage::Pretrain, &items, &BTreeMap::new(), false).unwrap();
        assert_eq!(pre.len(), 5);
        let fine = select_entries(Stage::Finetune, &items, &BTreeMap::new(), false).unwrap();
        assert_eq!(fine.len(), 1);
        assert_eq!(fine[0].template_id, Some(3));
        let stats = compute_stats(&fine);
        assert_eq!(stats.instruction_sample_count, 1);
        assert_eq!(stats.per_origin, BTreeMap::from([("llm".into(), 1)]));
    }

    #[test]
    fn empty_stats() {
        assert_eq!(compute_stats(&[]), StatsReport::default());
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..100).map(|i| format!("record-{i:03}")).collect();
        let a = split_records(&ids, &[0.95, 0.05], 42).unwrap();
        let b = split_records(&ids, &[0.95, 0.05], 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.val.len(), 100);
        assert!(matches!(split_records(&ids, &[0.5, 0.6], 42), Err(AssemblyError::BadRatios(_))));
        let dup = vec!["x".to_string(), "x".to_string()];
        let s = split_records(&dup, &[0.5, 0.5], 1).unwrap();
        assert_eq!(s.train.len() + s.val.len(), 1);
    }

    #[test]
    fn split_sizes_near_ratio() {
        // Binomial spread: with 100 ids the train count is only near 95 for
        // most seeds, not all. Seed 0 is the CLI default.
        let ids: Vec<String> = (0..100).map(|i| format!("record-{i:03}")).collect();
        let s = split_records(&ids, &[0.95, 0.05], 0).unwrap();
        assert!((93..=97).contains(&s.train.len()), "{}", s.train.len());
    }

    #[test]
    fn split_is_stable_under_growth() {
        let small: Vec<String> = (0..50).map(|i| format!("id{i}")).collect();
        let large: Vec<String> = (0..200).map(|i| format!("id{i}")).collect();
        let a = split_records(&small, &[0.8, 0.2], 9).unwrap();
        let b = split_records(&large, &[0.8, 0.2], 9).unwrap();
        assert!(a.train.iter().all(|id| b.train.contains(id)));
        assert!(a.val.iter().all(|id| b.val.contains(id)));
    }
}
