//! Job runners. Each reads a snapshot of the state, does its work without
//! holding the store lock, and logs the results as events.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{enqueue_locked, Progress, ReviewState, Service};
use crate::assembly::{assemble_stage, split_position, AssemblyItem, ItemKind, ReviewOutcome, Stage, StageConfig};
use crate::caption::{
    expand_from_attributes, request_candidates, select_and_concat, CandidateOrigin, CaptionBundle, CaptionCandidate,
    ProvenanceStep, SamplerState,
};
use crate::ingest::{
    decode_image, extract_web_pairs, import_records, parse_subtitles, plan_keyframes, Fetcher, IngestedMedia, RawPair,
    Source, SubtitleFormat,
};
use crate::instruct::{
    generate_qa, template_fact_sample, Generator, InstructError, InstructionSample, QaContext, NAME_EXEMPT_TAG,
};
use crate::knowledge::{load_attribute_schema, parse_facts_file, parse_taxa_file, AttributeSchema, TaxonRecord};
use crate::quality::{apply_filters, cluster_near_duplicates, dhash_bytes, FilterRules};
use crate::store::{sample_key, Event, StoreState};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpInput {
    pub path: PathBuf,
    #[serde(default)]
    pub source: Option<Source>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoInput {
    pub path: PathBuf,
    /// `.srt` or `.vtt`, chosen by extension.
    #[serde(default)]
    pub subtitles: Option<PathBuf>,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageInput {
    pub url: String,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestParams {
    pub dumps: Vec<DumpInput>,
    pub videos: Vec<VideoInput>,
    pub pages: Vec<PageInput>,
    pub schema: Option<PathBuf>,
    pub taxa: Option<PathBuf>,
    pub facts: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandParams {
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversifyParams {
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorChoice {
    Llm,
    TemplateFact,
    #[default]
    Both,
}

impl GeneratorChoice {
    fn generators(self) -> &'static [Generator] {
        match self {
            Self::Llm => &[Generator::Llm],
            Self::TemplateFact => &[Generator::TemplateFact],
            Self::Both => &[Generator::Llm, Generator::TemplateFact],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructParams {
    pub per_record: Option<usize>,
    pub generator: GeneratorChoice,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupParams {
    pub max_hamming: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleParams {
    pub stage: Stage,
    #[serde(default)]
    pub exclude_pending: bool,
}

/// Facts handed to the instruction generator per record.
const MAX_FACTS_PER_PROMPT: usize = 12;

fn subtitle_format(path: &std::path::Path) -> Result<SubtitleFormat, String> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    ext.parse().map_err(|e| format!("{}: {e}", path.display()))
}

fn count_dump_lines(path: &std::path::Path) -> u64 {
    fs::read_to_string(path)
        .map(|t| t.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#')).count() as u64)
        .unwrap_or(0)
}

pub(crate) fn review_outcomes(state: &StoreState) -> BTreeMap<String, ReviewOutcome> {
    state
        .review_items
        .values()
        .map(|i| {
            let outcome = match i.state {
                ReviewState::Pending => ReviewOutcome::Pending,
                ReviewState::Accepted => ReviewOutcome::Accepted,
                ReviewState::Rejected => ReviewOutcome::Rejected,
                ReviewState::Edited => ReviewOutcome::Edited(i.edited_text.clone().unwrap_or_default()),
            };
            (i.record_id.clone(), outcome)
        })
        .collect()
}

/// Every caption pair and instruction sample that could enter a manifest.
/// Records dropped as near-duplicates are left out entirely.
pub fn build_items(state: &StoreState, filters: &FilterRules) -> Vec<AssemblyItem> {
    let dropped: std::collections::HashSet<&str> =
        state.dedup.as_ref().map(|d| d.dropped().collect()).unwrap_or_default();
    let mut items = Vec::new();
    for (id, bundle) in &state.bundles {
        let (Some(text), Some(record)) = (&bundle.final_text, state.records.get(id)) else { continue };
        if dropped.contains(id.as_str()) {
            continue;
        }
        items.push(AssemblyItem {
            kind: ItemKind::CaptionPair,
            record_id: id.clone(),
            image_path: format!("images/{id}.png"),
            text: text.clone(),
            provenance: bundle.provenance_string(),
            taxon_id: record.category_annotation.clone(),
            source: record.source.as_str().into(),
            origin: bundle.final_origin.map_or("unknown", |o| o.as_str()).into(),
            template_id: None,
            instruction: None,
            passed: apply_filters(text, record.width, record.height, Stage::Pretrain, filters).passed,
        });
    }
    for sample in state.samples.values() {
        let Some(record) = state.records.get(&sample.record_id) else { continue };
        if dropped.contains(sample.record_id.as_str()) {
            continue;
        }
        items.push(AssemblyItem {
            kind: ItemKind::InstructionSample,
            record_id: sample.record_id.clone(),
            image_path: format!("images/{}.png", sample.record_id),
            text: sample.response.clone(),
            provenance: format!("{}>instruction_{}", ProvenanceStep::Ingested.as_str(), sample.generator.as_str()),
            taxon_id: record.category_annotation.clone(),
            source: record.source.as_str().into(),
            origin: sample.generator.as_str().into(),
            template_id: Some(sample.template_id),
            instruction: Some(sample.instruction.clone()),
            passed: sample.validation.passed
                && apply_filters(&sample.response, record.width, record.height, Stage::Finetune, filters).passed,
        });
    }
    items
}

struct Tally<'a> {
    svc: &'a Service,
    job_id: &'a str,
    progress: Progress,
}

impl Tally<'_> {
    fn step(&mut self) {
        self.progress.done += 1;
        self.svc.set_progress(self.job_id, self.progress);
    }
}

impl Service {
    fn log(&self, event: Event) -> Result<(), String> {
        self.store().append(event).map_err(|e| e.to_string())
    }

    /// Stores the image and logs the record; false if it was already known.
    fn admit(&self, media: IngestedMedia, rule: Option<&str>) -> Result<bool, String> {
        let id = media.record.record_id.clone();
        let mut store = self.store();
        if store.state().records.contains_key(&id) {
            return Ok(false);
        }
        store.put_image(&id, &media.pixels).map_err(|e| e.to_string())?;
        let raw = match (&media.record.raw_text, rule) {
            (Some(text), Some(rule)) => {
                Some(RawPair { record_id: id.clone(), text: text.clone(), extraction_rule: rule.into() })
            }
            _ => None,
        };
        store.append(Event::RecordIngested { record: media.record, raw }).map_err(|e| e.to_string())?;
        Ok(true)
    }

    fn route_review(&self, bundle: &CaptionBundle) -> Result<Option<String>, String> {
        let Some(text) = &bundle.final_text else { return Ok(None) };
        let Some(reason) = self.review_reason(&bundle.record_id, bundle.provenance(), bundle.max_similarity) else {
            return Ok(None);
        };
        let mut store = self.store();
        enqueue_locked(&mut store, &bundle.record_id, text, reason).map(|i| Some(i.item_id)).map_err(|e| e.to_string())
    }

    pub(super) fn run_ingest(&self, job_id: &str, p: IngestParams) -> Result<serde_json::Value, String> {
        let total =
            p.dumps.iter().map(|d| count_dump_lines(&d.path)).sum::<u64>() + (p.videos.len() + p.pages.len()) as u64;
        let mut tally = Tally { svc: self, job_id, progress: Progress { done: 0, total } };
        self.set_progress(job_id, tally.progress);
        let mut ingested = 0usize;
        let mut duplicates = 0usize;
        let mut skipped: Vec<serde_json::Value> = Vec::new();
        let mut changed = false;

        // Knowledge first so annotations resolve in later stages.
        let mut facts_report = serde_json::Value::Null;
        if p.schema.is_some() || p.taxa.is_some() || p.facts.is_some() {
            let schema_path = p.schema.as_ref().or(self.config.templates.schema.as_ref());
            let state_has_schema = self.store().state().knowledge.schema().is_some();
            if p.schema.is_some() || !state_has_schema {
                let schema = match schema_path {
                    Some(path) => load_attribute_schema(path).map_err(|e| e.to_string())?,
                    None => AttributeSchema::default_schema(),
                };
                self.log(Event::SchemaSet(schema))?;
            }
            let taxa = match &p.taxa {
                Some(path) => parse_taxa_file(path).map_err(|e| e.to_string())?,
                None => Vec::new(),
            };
            let facts = match &p.facts {
                Some(path) => parse_facts_file(path).map_err(|e| e.to_string())?,
                None => Vec::new(),
            };
            let mut trial = self.store().state().knowledge.clone();
            for t in &taxa {
                trial.upsert_taxon(t.clone());
            }
            let report = trial.import_facts(facts.clone()).map_err(|e| e.to_string())?;
            facts_report = json!({
                "taxa": taxa.len(),
                "inserted": report.inserted,
                "duplicate": report.duplicate,
                "rejected": report.rejected.len(),
            });
            self.log(Event::KnowledgeImported { taxa, facts })?;
            changed = true;
        }

        for dump in &p.dumps {
            let import =
                import_records(&dump.path, dump.source.unwrap_or(Source::DatasetDump)).map_err(|e| e.to_string())?;
            for s in &import.skipped {
                skipped.push(json!({"input": dump.path, "line": s.line, "reason": s.reason}));
                tally.step();
            }
            for media in import.items {
                if self.admit(media, Some("dump"))? {
                    ingested += 1;
                } else {
                    duplicates += 1;
                }
                tally.step();
            }
        }

        for video in &p.videos {
            let cues = match &video.subtitles {
                Some(path) => {
                    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
                    Some(
                        parse_subtitles(&bytes, subtitle_format(path)?)
                            .map_err(|e| format!("{}: {e}", path.display()))?,
                    )
                }
                None => None,
            };
            let duration = self.clients.frames.duration(&video.path).map_err(|e| e.to_string())?;
            let plan = plan_keyframes(duration, cues.as_deref()).map_err(|e| e.to_string())?;
            let stamps: Vec<f64> = plan.iter().map(|k| k.timestamp).collect();
            let frames = self.clients.frames.extract(&video.path, &stamps).map_err(|e| e.to_string())?;
            let subtitled = cues.as_ref().is_some_and(|c| !c.is_empty());
            let source = if subtitled { Source::VideoSubtitled } else { Source::VideoPlain };
            for (spec, pixels) in plan.into_iter().zip(frames) {
                let uri = format!("{}#t={:.3}", video.path.display(), spec.timestamp);
                let rule = if spec.expected_text.is_some() { "subtitle" } else { "keyframe" };
                let media = IngestedMedia::new(pixels, source, uri, video.category.as_deref(), spec.expected_text);
                if self.admit(media, Some(rule))? {
                    ingested += 1;
                } else {
                    duplicates += 1;
                }
            }
            tally.step();
        }

        if !p.pages.is_empty() {
            let fetcher = Fetcher::new(self.config.politeness.clone()).map_err(|e| e.to_string())?;
            for page in &p.pages {
                match fetcher.fetch_resource(&page.url) {
                    Ok(html) => {
                        for cand in extract_web_pairs(&html.body, &page.url) {
                            let pixels = fetcher
                                .fetch_resource(&cand.image_uri)
                                .map_err(|e| e.to_string())
                                .and_then(|r| decode_image(&r.body).map_err(|e| e.to_string()));
                            match pixels {
                                Ok(px) => {
                                    let media = IngestedMedia::new(
                                        px,
                                        Source::Web,
                                        cand.image_uri.clone(),
                                        page.category.as_deref(),
                                        Some(cand.text),
                                    );
                                    if self.admit(media, Some(cand.extraction_rule.as_str()))? {
                                        ingested += 1;
                                    } else {
                                        duplicates += 1;
                                    }
                                }
                                Err(e) => skipped.push(json!({"input": cand.image_uri, "reason": e})),
                            }
                        }
                    }
                    Err(e) => skipped.push(json!({"input": page.url, "reason": e.to_string()})),
                }
                tally.step();
            }
        }

        changed |= ingested > 0;
        Ok(json!({
            "changed": changed,
            "ingested": ingested,
            "duplicates": duplicates,
            "skipped": skipped,
            "knowledge": facts_report,
        }))
    }

    pub(super) fn run_expand(&self, job_id: &str, p: ExpandParams) -> Result<serde_json::Value, String> {
        let k = p.k.unwrap_or(self.config.pipeline.expand_k);
        let state = self.snapshot_state();
        let todo: Vec<_> = state.records.values().filter(|r| !state.bundles.contains_key(&r.record_id)).collect();
        let mut tally = Tally { svc: self, job_id, progress: Progress { done: 0, total: todo.len() as u64 } };
        let mut cursors: BTreeMap<String, u64> = state.sampler_cursors.clone();
        let (mut subtitled, mut expanded, mut reviews) = (0usize, 0usize, 0usize);
        for record in todo {
            let mut bundle = CaptionBundle::new(&record.record_id);
            let aligned = state.raw_pairs.get(&record.record_id).filter(|r| r.extraction_rule == "subtitle");
            if let Some(raw) = aligned {
                let cand = CaptionCandidate::new(raw.text.clone(), CandidateOrigin::Subtitle);
                bundle.candidates = vec![cand];
                bundle.final_text = Some(raw.text.clone());
                bundle.final_origin = Some(CandidateOrigin::Subtitle);
                bundle.push_step(ProvenanceStep::SubtitleAligned);
                subtitled += 1;
            } else if let Some(taxon_id) = &record.category_annotation {
                if state.knowledge.facts_for(taxon_id).is_empty() {
                    tally.step();
                    continue;
                }
                let mut sampler = SamplerState::new(taxon_id);
                sampler.cursor = cursors.get(&sampler.taxon_id).copied().unwrap_or(0);
                let expansion = expand_from_attributes(&state.knowledge, k, &mut sampler).map_err(|e| e.to_string())?;
                bundle.finalize_expansion(&expansion);
                cursors.insert(sampler.taxon_id.clone(), sampler.cursor);
                self.log(Event::SamplerAdvanced { taxon_id: sampler.taxon_id, cursor: sampler.cursor })?;
                expanded += 1;
            } else {
                tally.step();
                continue;
            }
            self.log(Event::BundleSet(bundle.clone()))?;
            reviews += self.route_review(&bundle)?.is_some() as usize;
            tally.step();
        }
        Ok(json!({
            "changed": subtitled + expanded > 0,
            "subtitle_aligned": subtitled,
            "expanded": expanded,
            "review_enqueued": reviews,
        }))
    }

    pub(super) fn run_diversify(&self, job_id: &str, p: DiversifyParams) -> Result<serde_json::Value, String> {
        let n = p.n.unwrap_or(self.config.pipeline.captions_per_image);
        let state = self.snapshot_state();
        let todo: Vec<String> = state.records.keys().filter(|id| !state.bundles.contains_key(*id)).cloned().collect();
        let total = todo.len() as u64;
        self.set_progress(job_id, Progress { done: 0, total });
        let done = std::sync::atomic::AtomicU64::new(0);
        let selection = self.config.thresholds.selection();
        let attempts = self.config.clients.attempts;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.pipeline.concurrency.max(1))
            .build()
            .map_err(|e| e.to_string())?;
        let store_dir = self.store_dir();
        let results: Vec<(String, Result<CaptionBundle, String>)> = pool.install(|| {
            todo.par_iter()
                .map(|id| {
                    let run = || -> Result<CaptionBundle, String> {
                        let png =
                            fs::read(store_dir.join("images").join(format!("{id}.png"))).map_err(|e| e.to_string())?;
                        let image_ref =
                            format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png));
                        let mut cands =
                            request_candidates(self.clients.captioner.as_ref(), id, &image_ref, n, attempts)
                                .map_err(|e| e.to_string())?;
                        if let Some(raw) = state.raw_pairs.get(id) {
                            if !cands.iter().any(|c| c.text == raw.text) {
                                cands.push(CaptionCandidate::new(raw.text.clone(), CandidateOrigin::Raw));
                            }
                        }
                        let sel = select_and_concat(cands, &selection, self.clients.similarity.as_ref())
                            .map_err(|e| e.to_string())?;
                        let mut bundle = CaptionBundle::new(id);
                        bundle.finalize_selection(sel);
                        Ok(bundle)
                    };
                    let out = run();
                    let d = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                    self.set_progress(job_id, Progress { done: d, total });
                    (id.clone(), out)
                })
                .collect()
        });
        let (mut ok, mut reviews) = (0usize, 0usize);
        let mut errors = Vec::new();
        for (id, res) in results {
            match res {
                Ok(bundle) => {
                    self.log(Event::BundleSet(bundle.clone()))?;
                    reviews += self.route_review(&bundle)?.is_some() as usize;
                    ok += 1;
                }
                Err(e) => errors.push(format!("{id}: {e}")),
            }
        }
        if !errors.is_empty() {
            return Err(format!(
                "CaptionerUnavailable: {} of {} records failed; first: {}",
                errors.len(),
                total,
                errors[0]
            ));
        }
        Ok(json!({"changed": ok > 0, "diversified": ok, "review_enqueued": reviews}))
    }

    pub(super) fn run_instruct(&self, job_id: &str, p: InstructParams) -> Result<serde_json::Value, String> {
        let per_record = p.per_record.unwrap_or(self.config.pipeline.instructions_per_record);
        let state = self.snapshot_state();
        let templates = self.instructions.templates();
        if templates.is_empty() {
            return Err("no instruction templates loaded".into());
        }
        let n_tpl = templates.len();
        let mut work = Vec::new();
        for record in state.records.values() {
            let Some(taxon_id) = &record.category_annotation else { continue };
            let start = (split_position(&record.record_id, self.config.seed) * n_tpl as f64) as usize;
            for j in 0..per_record.min(n_tpl) {
                let tpl = &templates[(start + j) % n_tpl];
                for &generator in p.generator.generators() {
                    let probe = InstructionSample {
                        record_id: record.record_id.clone(),
                        instruction: String::new(),
                        response: String::new(),
                        generator,
                        template_id: tpl.template_id,
                        category_names: vec![],
                        name_exempt: false,
                        validation: Default::default(),
                    };
                    if !state.samples.contains_key(&sample_key(&probe)) {
                        work.push((record.record_id.clone(), taxon_id.clone(), tpl, generator));
                    }
                }
            }
        }
        let total = work.len() as u64;
        self.set_progress(job_id, Progress { done: 0, total });
        let done = std::sync::atomic::AtomicU64::new(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.pipeline.concurrency.max(1))
            .build()
            .map_err(|e| e.to_string())?;
        let rules = self.config.validation;
        let attempts = self.config.pipeline.instruct_attempts;
        let results: Vec<Result<InstructionSample, InstructError>> = pool.install(|| {
            work.par_iter()
                .map(|(record_id, taxon_id, tpl, generator)| {
                    let fallback = TaxonRecord::new(taxon_id);
                    let taxon = state.knowledge.taxon(taxon_id).unwrap_or(&fallback);
                    let mut facts = state.knowledge.facts_for(taxon_id);
                    // Facts matching the template's tags go first.
                    facts.sort_by_key(|f| !tpl.tags.iter().any(|t| t == f.key.group()));
                    facts.truncate(MAX_FACTS_PER_PROMPT);
                    let ctx = QaContext { record_id, taxon, facts: &facts };
                    let out = match generator {
                        Generator::Llm => generate_qa(ctx, tpl, self.clients.llm.as_ref(), &rules, attempts),
                        Generator::TemplateFact => template_fact_sample(ctx, tpl, &rules),
                    }
                    .map(|mut s| {
                        s.name_exempt |= tpl.has_tag(NAME_EXEMPT_TAG);
                        s
                    });
                    let d = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                    self.set_progress(job_id, Progress { done: d, total });
                    out
                })
                .collect()
        });
        let (mut stored, mut failed) = (0usize, 0usize);
        let mut unavailable = None;
        let mut errors = Vec::new();
        for res in results {
            match res {
                Ok(sample) => {
                    self.log(Event::SampleStored(sample))?;
                    stored += 1;
                }
                Err(InstructError::ValidationExhausted { sample, .. }) => {
                    self.log(Event::SampleFailed(*sample))?;
                    failed += 1;
                }
                Err(InstructError::LlmUnavailable(m)) => {
                    unavailable.get_or_insert(m);
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
        if let Some(m) = unavailable {
            return Err(format!("LlmUnavailable: {m} ({stored} samples stored before failure)"));
        }
        Ok(json!({
            "changed": stored + failed > 0,
            "stored": stored,
            "validation_failed": failed,
            "errors": errors,
        }))
    }

    pub(super) fn run_dedup(&self, job_id: &str, p: DedupParams) -> Result<serde_json::Value, String> {
        let max_hamming = p.max_hamming.unwrap_or(self.config.thresholds.max_hamming);
        let state = self.snapshot_state();
        let store_dir = self.store_dir();
        let todo: Vec<&String> = state.records.keys().filter(|id| !state.hashes.contains_key(*id)).collect();
        let total = todo.len() as u64;
        self.set_progress(job_id, Progress { done: 0, total });
        let fresh: Vec<(String, Result<_, String>)> = todo
            .par_iter()
            .map(|id| {
                let path = store_dir.join("images").join(format!("{id}.png"));
                let h =
                    fs::read(&path).map_err(|e| e.to_string()).and_then(|b| dhash_bytes(&b).map_err(|e| e.to_string()));
                ((*id).clone(), h)
            })
            .collect();
        let mut new_hashes = BTreeMap::new();
        for (id, h) in fresh {
            new_hashes.insert(id, h?);
        }
        self.set_progress(job_id, Progress { done: total, total });
        let mut hashes = state.hashes.clone();
        hashes.extend(new_hashes.clone());
        let report = cluster_near_duplicates(&hashes, max_hamming);
        let export = report.export(&hashes);
        if !new_hashes.is_empty() {
            self.log(Event::HashesSet(new_hashes))?;
        }
        let changed = state.dedup.as_ref() != Some(&report);
        if changed {
            self.log(Event::DedupSet(report.clone()))?;
        }
        let path = self.store().reports_dir().join("dedup.tsv");
        fs::write(&path, export).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(json!({
            "changed": changed,
            "hashed": total,
            "clusters": report.clusters.len(),
            "dropped": report.dropped_count,
            "report": "reports/dedup.tsv",
        }))
    }

    pub(super) fn run_assemble(&self, job_id: &str, p: AssembleParams) -> Result<serde_json::Value, String> {
        let state = self.snapshot_state();
        let items = build_items(&state, &self.filters);
        let reviews = review_outcomes(&state);
        self.set_progress(job_id, Progress { done: 0, total: 1 });
        let mut config = StageConfig::new(p.stage);
        config.shard_size = self.config.assembly.shard_size;
        config.split = self.config.assembly.split;
        let out_dir = self.store().manifests_dir();
        let manifest = assemble_stage(&config, &items, &reviews, p.exclude_pending, self.config.seed, &out_dir)
            .map_err(|e| match e {
                crate::assembly::AssemblyError::UnresolvedReviewItems(ids) => {
                    format!("UnresolvedReviewItems: {} records await review: {}", ids.len(), ids.join(","))
                }
                other => other.to_string(),
            })?;
        self.set_progress(job_id, Progress { done: 1, total: 1 });
        let root = self.store_dir();
        Ok(json!({
            "changed": false,
            "stage": p.stage,
            "entries": manifest.entries.len(),
            "resize_target": manifest.stage.resize_target,
            "build_fingerprint": manifest.build_fingerprint,
            "stats": manifest.stats,
            "files": manifest.files.iter().map(|f| f.strip_prefix(&root).unwrap_or(f).display().to_string()).collect::<Vec<_>>(),
        }))
    }
}
