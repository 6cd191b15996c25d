//! Near-duplicate detection and per-pair filter rules.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::Stage;
use crate::ingest::media::decode_image;
use crate::text::word_count;

pub const DEFAULT_MAX_HAMMING: u32 = 8;
const COLS: u64 = 9;
const ROWS: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QualityError {
    #[error("undecodable image: {0}")]
    UndecodableImage(String),
    #[error("filter config line {line}: {message}")]
    BadFilterConfig { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HashAlgo {
    #[serde(rename = "dhash-9x8")]
    Dhash9x8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageHash {
    pub bits: u64,
    pub algo: HashAlgo,
}

impl ImageHash {
    pub fn new(bits: u64) -> Self {
        Self { bits, algo: HashAlgo::Dhash9x8 }
    }

    pub fn distance(&self, other: &ImageHash) -> u32 {
        hamming(self.bits, other.bits)
    }
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

pub fn luma(r: u8, g: u8, b: u8) -> u32 {
    (299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000
}

/// Overlap of source index `i` with every output cell, in scaled units.
/// Source pixel `i` covers `[i*cells, (i+1)*cells)`; cell `c` covers
/// `[c*len, (c+1)*len)`.
fn overlaps(i: u64, len: u64, cells: u64) -> Vec<(usize, u64)> {
    let (lo, hi) = (i * cells, (i + 1) * cells);
    let mut out = Vec::with_capacity(2);
    let mut c = lo / len;
    while c < cells && c * len < hi {
        let start = lo.max(c * len);
        let end = hi.min((c + 1) * len);
        if end > start {
            out.push((c as usize, end - start));
        }
        c += 1;
    }
    out
}

/// Area-weighted box downscale of the luma plane to 9x8. Every cell has the
/// same total weight, so sums compare like averages without rounding.
pub fn box_sums(pixels: &RgbaImage) -> [[u64; COLS as usize]; ROWS as usize] {
    let (w, h) = (pixels.width() as u64, pixels.height() as u64);
    let col_w: Vec<Vec<(usize, u64)>> = (0..w).map(|x| overlaps(x, w, COLS)).collect();
    let mut sums = [[0u64; COLS as usize]; ROWS as usize];
    for y in 0..h {
        let row_w = overlaps(y, h, ROWS);
        let mut line = [0u64; COLS as usize];
        for x in 0..w {
            let p = pixels.get_pixel(x as u32, y as u32);
            let l = luma(p[0], p[1], p[2]) as u64;
            for &(c, wx) in &col_w[x as usize] {
                line[c] += l * wx;
            }
        }
        for &(r, wy) in &row_w {
            for c in 0..COLS as usize {
                sums[r][c] += line[c] * wy;
            }
        }
    }
    sums
}

/// dHash: bit set iff a cell is strictly brighter than its right neighbour;
/// rows top to bottom, first comparison is the most significant bit.
pub fn dhash(pixels: &RgbaImage) -> Result<ImageHash, QualityError> {
    if pixels.width() == 0 || pixels.height() == 0 {
        return Err(QualityError::UndecodableImage("empty image".into()));
    }
    let sums = box_sums(pixels);
    let mut bits = 0u64;
    for row in &sums {
        for c in 0..8 {
            bits = (bits << 1) | u64::from(row[c] > row[c + 1]);
        }
    }
    Ok(ImageHash::new(bits))
}

pub fn dhash_bytes(bytes: &[u8]) -> Result<ImageHash, QualityError> {
    let pixels = decode_image(bytes).map_err(|e| QualityError::UndecodableImage(e.to_string()))?;
    dhash(&pixels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub canonical: String,
    /// Sorted, canonical first.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    /// Sorted by canonical id; singletons included.
    pub clusters: Vec<Cluster>,
    pub dropped_count: usize,
}

impl DedupReport {
    pub fn dropped(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().flat_map(|c| c.members[1..].iter().map(String::as_str))
    }

    /// `canonical<TAB>member<TAB>distance` for every non-canonical member.
    pub fn export(&self, hashes: &BTreeMap<String, ImageHash>) -> String {
        let mut out = String::new();
        for c in &self.clusters {
            for m in &c.members[1..] {
                let d = hashes.get(&c.canonical).zip(hashes.get(m)).map(|(a, b)| a.distance(b)).unwrap_or(0);
                let _ = writeln!(out, "{}\t{}\t{}", c.canonical, m, d);
            }
        }
        out
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Transitive clustering of hashes within `max_hamming`. The canonical member
/// is the smallest record id, so the result does not depend on input order.
pub fn cluster_near_duplicates(hashes: &BTreeMap<String, ImageHash>, max_hamming: u32) -> DedupReport {
    let ids: Vec<&String> = hashes.keys().collect();
    let bits: Vec<u64> = hashes.values().map(|h| h.bits).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if hamming(bits[i], bits[j]) <= max_hamming {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    // Keep the smaller index as root; ids are sorted.
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push((*id).clone());
    }
    let clusters: Vec<Cluster> =
        groups.into_values().map(|members| Cluster { canonical: members[0].clone(), members }).collect();
    let dropped_count = clusters.iter().map(|c| c.members.len() - 1).sum();
    DedupReport { clusters, dropped_count }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub min_words_pretrain: usize,
    pub min_words_finetune: usize,
    pub min_dimension: u32,
    pub reject_url_only: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self { min_words_pretrain: 3, min_words_finetune: 8, min_dimension: 64, reject_url_only: true }
    }
}

impl FilterRules {
    /// Parses `rule value` lines (an `=` between them is allowed). Rules not
    /// mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self, QualityError> {
        let mut rules = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| QualityError::BadFilterConfig { line: i + 1, message };
            let mut parts = line.splitn(2, |c: char| c == '=' || c.is_whitespace());
            let name = parts.next().unwrap_or("").trim();
            let value = parts.next().unwrap_or("").trim().trim_start_matches('=').trim();
            let num = || value.parse::<u32>().map_err(|_| bad(format!("`{name}` needs an integer, got `{value}`")));
            match name {
                "min_words_pretrain" => rules.min_words_pretrain = num()? as usize,
                "min_words_finetune" => rules.min_words_finetune = num()? as usize,
                "min_dimension" => rules.min_dimension = num()?,
                "reject_url_only" => {
                    rules.reject_url_only = value.parse().map_err(|_| bad(format!("`{name}` needs true or false")))?
                }
                other => return Err(bad(format!("unknown rule `{other}`"))),
            }
        }
        Ok(rules)
    }

    pub fn min_words(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.min_words_pretrain,
            Stage::Finetune => self.min_words_finetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    CaptionTooShort,
    UrlOnly,
    ImageTooSmall,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub passed: bool,
    pub reasons: Vec<FilterReason>,
}

pub fn is_url_only(text: &str) -> bool {
    let mut tokens = text.split_whitespace().peekable();
    tokens.peek().is_some()
        && tokens.all(|t| {
            let t = t.to_ascii_lowercase();
            t.starts_with("http://") || t.starts_with("https://") || t.starts_with("www.")
        })
}

pub fn apply_filters(caption: &str, width: u32, height: u32, stage: Stage, rules: &FilterRules) -> FilterOutcome {
    let mut reasons = Vec::new();
    if word_count(caption) < rules.min_words(stage) {
        reasons.push(FilterReason::CaptionTooShort);
    }
    if rules.reject_url_only && is_url_only(caption) {
        reasons.push(FilterReason::UrlOnly);
    }
    if width.min(height) < rules.min_dimension {
        reasons.push(FilterReason::ImageTooSmall);
    }
    FilterOutcome { passed: reasons.is_empty(), reasons }
}
