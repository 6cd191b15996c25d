//! TOML configuration. Every section and key is optional.
//!
//! ```toml
//! seed = 0
//!
//! [clients]
//! mode = "http"                 # or "mock" for offline runs
//! captioner_url = "http://localhost:9001"
//! embedder_url = "http://localhost:9002"
//! llm_url = "http://localhost:9003"
//! similarity = "embedder"       # or "tf_cosine"
//!
//! [thresholds]
//! similarity = 0.85
//! max_hamming = 8
//! caption_cap = 512
//!
//! [review]
//! band_low = 0.80
//! band_high = 0.90
//! audit_rate = 0.05
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::DEFAULT_SHARD_SIZE;
use crate::caption::{SelectionConfig, SelectionMode, DEFAULT_CAPTION_CAP, DEFAULT_THRESHOLD};
use crate::ingest::fetch::PolitenessConfig;
use crate::instruct::ValidationRules;
use crate::quality::{FilterRules, DEFAULT_MAX_HAMMING};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityChoice {
    /// Remote embedder in http mode, token cosine in mock mode.
    #[default]
    Auto,
    Embedder,
    TfCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientsConfig {
    pub mode: ClientMode,
    pub captioner_url: Option<String>,
    pub embedder_url: Option<String>,
    pub llm_url: Option<String>,
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub attempts: u32,
    pub similarity: SimilarityChoice,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            mode: ClientMode::Http,
            captioner_url: None,
            embedder_url: None,
            llm_url: None,
            token: None,
            timeout_ms: 60_000,
            attempts: 3,
            similarity: SimilarityChoice::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub similarity: f64,
    pub max_hamming: u32,
    pub caption_cap: usize,
    pub pairwise: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            similarity: DEFAULT_THRESHOLD,
            max_hamming: DEFAULT_MAX_HAMMING,
            caption_cap: DEFAULT_CAPTION_CAP,
            pairwise: false,
        }
    }
}

impl Thresholds {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            threshold: self.similarity,
            cap: self.caption_cap,
            mode: if self.pairwise { SelectionMode::Pairwise } else { SelectionMode::AgainstLongest },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub audit_rate: f64,
    pub lease_secs: u64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self { band_low: 0.80, band_high: 0.90, audit_rate: 0.05, lease_secs: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorChoice {
    #[default]
    Ffmpeg,
    /// JSON video descriptors rendered synthetically; for tests and demos.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramesConfig {
    pub extractor: ExtractorChoice,
    pub ffmpeg: String,
    pub ffprobe: String,
}

impl Default for FramesConfig {
    fn default() -> Self {
        Self { extractor: ExtractorChoice::Ffmpeg, ffmpeg: "ffmpeg".into(), ffprobe: "ffprobe".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub captions_per_image: usize,
    pub expand_k: usize,
    pub instructions_per_record: usize,
    pub instruct_attempts: u32,
    /// In-flight limit toward remote clients.
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { captions_per_image: 5, expand_k: 3, instructions_per_record: 2, instruct_attempts: 3, concurrency: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub shard_size: usize,
    pub split: [f64; 2],
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self { shard_size: DEFAULT_SHARD_SIZE, split: [0.95, 0.05] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatesConfig {
    pub instructions: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub filters: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Shared token required in `Authorization: Bearer` when set.
    pub token: Option<String>,
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { token: None, workers: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub clients: ClientsConfig,
    pub thresholds: Thresholds,
    pub politeness: PolitenessConfig,
    pub review: ReviewConfig,
    pub frames: FramesConfig,
    pub filters: FilterRules,
    pub validation: ValidationRules,
    pub pipeline: PipelineConfig,
    pub assembly: AssemblyConfig,
    pub templates: TemplatesConfig,
    pub service: ServiceConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file; relative template paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let t = &mut cfg.templates;
        for p in [&mut t.instructions, &mut t.prompts, &mut t.schema, &mut t.filters].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(0.0..=1.0).contains(&self.thresholds.similarity) {
            return bad("thresholds.similarity must be in [0, 1]");
        }
        if self.thresholds.max_hamming > 64 {
            return bad("thresholds.max_hamming must be at most 64");
        }
        let r = &self.review;
        if !(0.0..=1.0).contains(&r.audit_rate) || r.band_low > r.band_high {
            return bad("review bands must satisfy band_low <= band_high and 0 <= audit_rate <= 1");
        }
        if self.assembly.shard_size == 0 {
            return bad("assembly.shard_size must be at least 1");
        }
        if self.pipeline.expand_k == 0 || self.pipeline.captions_per_image == 0 {
            return bad("pipeline.expand_k and pipeline.captions_per_image must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.thresholds.similarity, 0.85);
        assert_eq!(c.thresholds.max_hamming, 8);
        assert_eq!(c.thresholds.caption_cap, 512);
        assert_eq!((c.review.band_low, c.review.band_high, c.review.audit_rate), (0.80, 0.90, 0.05));
        assert_eq!(c.politeness.min_spacing_ms, 1000);
        assert_eq!(c.clients.mode, ClientMode::Http);
    }

    #[test]
    fn sections_override() {
        let c = Config::parse(
            "seed = 9\n[clients]\nmode = \"mock\"\n[thresholds]\nsimilarity = 0.9\n[politeness]\nmin_spacing_ms = 5\n[filters]\nmin_dimension = 32\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.clients.mode, ClientMode::Mock);
        assert_eq!(c.thresholds.similarity, 0.9);
        assert_eq!(c.thresholds.max_hamming, 8);
        assert_eq!(c.politeness.min_spacing_ms, 5);
        assert_eq!(c.filters.min_dimension, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("[thresholds]\nsimilarity = 1.5").is_err());
        assert!(Config::parse("[review]\nband_low = 0.9\nband_high = 0.8").is_err());
        assert!(Config::parse("[clients]\nmode = \"carrier-pigeon\"").is_err());
    }

    #[test]
    fn relative_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tidepool.toml");
        fs::write(&path, "[templates]\ninstructions = \"my.tsv\"\n").unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.templates.instructions, Some(dir.path().join("my.tsv")));
    }
}
