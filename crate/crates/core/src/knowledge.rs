//! Taxa and attribute facts keyed by a hierarchical attribute schema.
//!
//! File formats (UTF-8, `#` comments and blank lines ignored):
//!
//! * schema: one key per line, segments joined by `>`, optional
//!   `\t display name`;
//! * taxa: `scientific_name \t common;names \t rank:name;rank:name`;
//! * facts: `taxon \t key_path \t text \t source`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{collapse_whitespace, normalize_taxon_id};

const DEFAULT_SCHEMA: &str = include_str!("../assets/attributes.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnowledgeError {
    #[error("duplicate attribute path `{path}` on line {line}")]
    DuplicateAttributePath { path: String, line: usize },
    #[error("cannot read {path}: {message}")]
    SchemaUnreadable { path: PathBuf, message: String },
    #[error("no attribute schema loaded")]
    SchemaNotLoaded,
    #[error("{path}:{line}: {message}")]
    BadLine { path: PathBuf, line: usize, message: String },
}

/// Hierarchical attribute key, e.g. `morphology > coloration`. Segments are
/// lowercased and whitespace-collapsed; ordering is segment-wise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct AttributePath(Vec<String>);

impl AttributePath {
    pub fn parse(s: &str) -> Option<Self> {
        let segments: Vec<String> = s.split('>').map(|seg| collapse_whitespace(&seg.to_lowercase())).collect();
        if segments.iter().any(String::is_empty) {
            return None;
        }
        Some(Self(segments))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn group(&self) -> &str {
        &self.0[0]
    }

    pub fn leaf(&self) -> &str {
        self.0.last().expect("paths are non-empty")
    }
}

impl fmt::Display for AttributePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(">"))
    }
}

impl From<AttributePath> for String {
    fn from(p: AttributePath) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for AttributePath {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s).ok_or_else(|| format!("invalid attribute path `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeKey {
    pub path: AttributePath,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<AttributeKey>", into = "Vec<AttributeKey>")]
pub struct AttributeSchema {
    keys: Vec<AttributeKey>,
    index: HashMap<AttributePath, usize>,
}

impl From<Vec<AttributeKey>> for AttributeSchema {
    fn from(keys: Vec<AttributeKey>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (k.path.clone(), i)).collect();
        Self { keys, index }
    }
}

impl From<AttributeSchema> for Vec<AttributeKey> {
    fn from(s: AttributeSchema) -> Self {
        s.keys
    }
}

impl AttributeSchema {
    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let mut keys = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (path_text, display) = match line.split_once('\t') {
                Some((p, d)) => (p, Some(d.trim())),
                None => (line, None),
            };
            let path = AttributePath::parse(path_text).ok_or_else(|| KnowledgeError::BadLine {
                path: PathBuf::from("<schema>"),
                line: i + 1,
                message: format!("empty segment in `{path_text}`"),
            })?;
            if index.contains_key(&path) {
                return Err(KnowledgeError::DuplicateAttributePath { path: path.to_string(), line: i + 1 });
            }
            let display_name = display.filter(|d| !d.is_empty()).unwrap_or(path.leaf()).to_string();
            index.insert(path.clone(), keys.len());
            keys.push(AttributeKey { path, display_name });
        }
        Ok(Self { keys, index })
    }

    /// The shipped 129-key schema.
    pub fn default_schema() -> Self {
        Self::parse(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[AttributeKey] {
        &self.keys
    }

    pub fn get(&self, path: &AttributePath) -> Option<&AttributeKey> {
        self.index.get(path).map(|&i| &self.keys[i])
    }

    pub fn contains(&self, path: &AttributePath) -> bool {
        self.index.contains_key(path)
    }

    /// Distinct first segments in file order.
    pub fn groups(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.keys.iter().map(|k| k.path.group()).filter(|g| seen.insert(*g)).collect()
    }
}

pub fn load_attribute_schema(path: &Path) -> Result<AttributeSchema, KnowledgeError> {
    let text = fs::read_to_string(path)
        .map_err(|e| KnowledgeError::SchemaUnreadable { path: path.to_path_buf(), message: e.to_string() })?;
    AttributeSchema::parse(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonRecord {
    pub taxon_id: String,
    pub scientific_name: String,
    pub common_names: Vec<String>,
    pub lineage: Vec<(String, String)>,
}

impl TaxonRecord {
    pub fn new(scientific_name: &str) -> Self {
        Self {
            taxon_id: normalize_taxon_id(scientific_name),
            scientific_name: collapse_whitespace(scientific_name),
            common_names: Vec::new(),
            lineage: Vec::new(),
        }
    }

    pub fn common_name(&self) -> Option<&str> {
        self.common_names.first().map(String::as_str)
    }

    /// Name used in rendered text: common name if known, else scientific.
    pub fn display_name(&self) -> &str {
        self.common_name().unwrap_or(&self.scientific_name)
    }

    pub fn all_names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.scientific_name.as_str()).chain(self.common_names.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeFact {
    pub taxon_id: String,
    pub key: AttributePath,
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownAttribute,
    EmptyText,
    EmptyTaxon,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Position of the fact in the submitted batch.
    pub position: usize,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub inserted: usize,
    pub duplicate: usize,
    pub rejected: Vec<Rejection>,
}

/// Single-writer store of taxa and facts. Callers share it behind a
/// read/write lock.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "KnowledgeData", into = "KnowledgeData")]
pub struct KnowledgeBase {
    schema: Option<AttributeSchema>,
    taxa: BTreeMap<String, TaxonRecord>,
    facts: Vec<AttributeFact>,
    seen: HashSet<(String, AttributePath, String)>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeData {
    schema: Option<AttributeSchema>,
    taxa: BTreeMap<String, TaxonRecord>,
    facts: Vec<AttributeFact>,
}

impl From<KnowledgeData> for KnowledgeBase {
    fn from(d: KnowledgeData) -> Self {
        let seen = d.facts.iter().map(|f| (f.taxon_id.clone(), f.key.clone(), f.text.clone())).collect();
        Self { schema: d.schema, taxa: d.taxa, facts: d.facts, seen }
    }
}

impl From<KnowledgeBase> for KnowledgeData {
    fn from(k: KnowledgeBase) -> Self {
        Self { schema: k.schema, taxa: k.taxa, facts: k.facts }
    }
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_schema(schema: AttributeSchema) -> Self {
        Self { schema: Some(schema), ..Self::default() }
    }

    pub fn set_schema(&mut self, schema: AttributeSchema) {
        self.schema = Some(schema);
    }

    pub fn schema(&self) -> Option<&AttributeSchema> {
        self.schema.as_ref()
    }

    pub fn upsert_taxon(&mut self, taxon: TaxonRecord) {
        self.taxa.insert(taxon.taxon_id.clone(), taxon);
    }

    pub fn taxon(&self, taxon_id: &str) -> Option<&TaxonRecord> {
        self.taxa.get(&normalize_taxon_id(taxon_id))
    }

    pub fn taxa(&self) -> impl Iterator<Item = &TaxonRecord> {
        self.taxa.values()
    }

    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    pub fn import_facts(&mut self, facts: Vec<AttributeFact>) -> Result<ImportReport, KnowledgeError> {
        let schema = self.schema.as_ref().ok_or(KnowledgeError::SchemaNotLoaded)?;
        let mut report = ImportReport::default();
        for (position, mut fact) in facts.into_iter().enumerate() {
            fact.taxon_id = normalize_taxon_id(&fact.taxon_id);
            fact.text = collapse_whitespace(&fact.text);
            let reject = |reason, detail: String| Rejection { position, reason, detail };
            if fact.taxon_id.is_empty() {
                report.rejected.push(reject(RejectReason::EmptyTaxon, String::new()));
                continue;
            }
            if fact.text.is_empty() {
                report.rejected.push(reject(RejectReason::EmptyText, fact.key.to_string()));
                continue;
            }
            if !schema.contains(&fact.key) {
                report.rejected.push(reject(RejectReason::UnknownAttribute, fact.key.to_string()));
                continue;
            }
            if !self.seen.insert((fact.taxon_id.clone(), fact.key.clone(), fact.text.clone())) {
                report.duplicate += 1;
                continue;
            }
            if !self.taxa.contains_key(&fact.taxon_id) {
                // Facts may precede taxon metadata; the fact's name spelling
                // stands in for the scientific name.
                let mut taxon = TaxonRecord::new(&fact.taxon_id);
                taxon.scientific_name = capitalize_genus(&taxon.scientific_name);
                self.taxa.insert(fact.taxon_id.clone(), taxon);
            }
            self.facts.push(fact);
            report.inserted += 1;
        }
        Ok(report)
    }

    /// Facts for a taxon in deterministic order: key path, then insertion.
    pub fn facts_for(&self, taxon_id: &str) -> Vec<&AttributeFact> {
        let id = normalize_taxon_id(taxon_id);
        let mut out: Vec<&AttributeFact> = self.facts.iter().filter(|f| f.taxon_id == id).collect();
        // Stable sort keeps insertion order within a key.
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    pub fn lookup_facts(&self, taxon_id: &str, keys: Option<&[AttributePath]>) -> BTreeMap<AttributePath, Vec<String>> {
        let mut out: BTreeMap<AttributePath, Vec<String>> = BTreeMap::new();
        for fact in self.facts_for(taxon_id) {
            if keys.is_some_and(|ks| !ks.contains(&fact.key)) {
                continue;
            }
            out.entry(fact.key.clone()).or_default().push(fact.text.clone());
        }
        out
    }
}

fn capitalize_genus(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>, KnowledgeError> {
    let text = fs::read_to_string(path)
        .map_err(|e| KnowledgeError::SchemaUnreadable { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect())
}

pub fn parse_taxa_file(path: &Path) -> Result<Vec<TaxonRecord>, KnowledgeError> {
    let mut out = Vec::new();
    for (line, text) in data_lines(path)? {
        let fields: Vec<&str> = text.split('\t').collect();
        let name = fields[0].trim();
        if name.is_empty() {
            return Err(KnowledgeError::BadLine { path: path.to_path_buf(), line, message: "missing name".into() });
        }
        let mut taxon = TaxonRecord::new(name);
        if let Some(common) = fields.get(1) {
            taxon.common_names = common.split(';').map(collapse_whitespace).filter(|c| !c.is_empty()).collect();
        }
        if let Some(lineage) = fields.get(2) {
            for part in lineage.split(';').filter(|p| !p.trim().is_empty()) {
                let (rank, name) = part.split_once(':').ok_or_else(|| KnowledgeError::BadLine {
                    path: path.to_path_buf(),
                    line,
                    message: format!("lineage entry `{part}` is not rank:name"),
                })?;
                taxon.lineage.push((collapse_whitespace(rank), collapse_whitespace(name)));
            }
        }
        out.push(taxon);
    }
    Ok(out)
}

/// Parses a facts file. Lines whose key path is syntactically invalid are
/// errors; unknown-but-valid keys are left for [`KnowledgeBase::import_facts`]
/// to reject.
pub fn parse_facts_file(path: &Path) -> Result<Vec<AttributeFact>, KnowledgeError> {
    let mut out = Vec::new();
    for (line, text) in data_lines(path)? {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() < 3 {
            return Err(KnowledgeError::BadLine {
                path: path.to_path_buf(),
                line,
                message: "expected taxon, key_path, text[, source]".into(),
            });
        }
        let key = AttributePath::parse(fields[1]).ok_or_else(|| KnowledgeError::BadLine {
            path: path.to_path_buf(),
            line,
            message: format!("bad key path `{}`", fields[1]),
        })?;
        out.push(AttributeFact {
            taxon_id: normalize_taxon_id(fields[0]),
            key,
            text: fields[2].trim().to_string(),
            source: fields.get(3).map(|s| s.trim().to_string()).unwrap_or_default(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(s: &str) -> AttributePath {
        AttributePath::parse(s).unwrap()
    }

    fn fact(taxon: &str, key: &str, text: &str) -> AttributeFact {
        AttributeFact { taxon_id: taxon.into(), key: path(key), text: text.into(), source: "test".into() }
    }

    #[test]
    fn default_schema_has_129_keys_and_named_groups() {
        let schema = AttributeSchema::default_schema();
        assert_eq!(schema.len(), 129);
        for name in ["size", "color", "shape", "feeding diet", "distribution", "habitat", "morphology", "reproduction"]
        {
            assert!(schema.contains(&path(name)), "missing {name}");
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let err = AttributeSchema::parse("size\ncolor\nSize\n").unwrap_err();
        assert_eq!(err, KnowledgeError::DuplicateAttributePath { path: "size".into(), line: 3 });
    }

    #[test]
    fn toy_schema() {
        let s = AttributeSchema::parse("habitat\nhabitat > depth range\tDepth\n# comment\n\ndistribution\n").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get(&path("habitat>depth range")).unwrap().display_name, "Depth");
        assert_eq!(s.groups(), ["habitat", "distribution"]);
    }

    #[test]
    fn import_requires_schema() {
        let mut kb = KnowledgeBase::new();
        assert_eq!(kb.import_facts(vec![]), Err(KnowledgeError::SchemaNotLoaded));
    }

    #[test]
    fn import_counts() {
        let mut kb = KnowledgeBase::with_schema(AttributeSchema::default_schema());
        let r = kb
            .import_facts(vec![
                fact("Zebrasoma flavescens", "distribution", "Found on Indo-Pacific reefs."),
                fact("zebrasoma  flavescens", "feeding diet", "Feeds on algae."),
            ])
            .unwrap();
        assert_eq!((r.inserted, r.duplicate, r.rejected.len()), (2, 0, 0));
        let r = kb
            .import_facts(vec![fact("Zebrasoma flavescens", "distribution", "Found on Indo-Pacific reefs.")])
            .unwrap();
        assert_eq!((r.inserted, r.duplicate), (0, 1));
        let r = kb.import_facts(vec![fact("Zebrasoma flavescens", "favourite colour", "Yellow.")]).unwrap();
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].reason, RejectReason::UnknownAttribute);
        assert_eq!(kb.fact_count(), 2);
        assert_eq!(kb.taxon("zebrasoma flavescens").unwrap().scientific_name, "Zebrasoma flavescens");
    }

    #[test]
    fn import_is_idempotent() {
        let batch = vec![
            fact("a b", "habitat", "Shallow lagoons."),
            fact("a b", "habitat", "Shallow lagoons."),
            fact("a b", "size", "Up to 20 cm."),
        ];
        let mut once = KnowledgeBase::with_schema(AttributeSchema::default_schema());
        once.import_facts(batch.clone()).unwrap();
        let mut twice = once.clone();
        twice.import_facts(batch).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn lookup_ordering_and_filter() {
        let mut kb = KnowledgeBase::with_schema(AttributeSchema::default_schema());
        kb.import_facts(vec![
            fact("t", "feeding diet", "Eats algae."),
            fact("t", "distribution", "Indo-Pacific."),
            fact("t", "distribution", "Red Sea."),
        ])
        .unwrap();
        let all = kb.lookup_facts("t", None);
        let keys: Vec<_> = all.keys().map(ToString::to_string).collect();
        assert_eq!(keys, ["distribution", "feeding diet"]);
        assert_eq!(all[&path("distribution")], ["Indo-Pacific.", "Red Sea."]);
        let only = kb.lookup_facts("t", Some(&[path("distribution")]));
        assert_eq!(only.len(), 1);
        assert!(kb.lookup_facts("nobody", None).is_empty());
        assert_eq!(kb.lookup_facts("t", None), all);
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let mut kb = KnowledgeBase::with_schema(AttributeSchema::default_schema());
        kb.import_facts(vec![fact("t", "habitat", "Reefs.")]).unwrap();
        let mut back: KnowledgeBase = serde_json::from_str(&serde_json::to_string(&kb).unwrap()).unwrap();
        assert_eq!(back, kb);
        assert_eq!(back.import_facts(vec![fact("t", "habitat", "Reefs.")]).unwrap().duplicate, 1);
    }
}
