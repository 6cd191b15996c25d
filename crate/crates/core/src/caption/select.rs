//! Length-ranked caption selection and concatenation.
//!
//! Candidates are ranked by character count (longest first, ties broken
//! lexicographically). The longest is the base; every other candidate whose
//! similarity to the base is strictly below the threshold is appended in rank
//! order, separated by single spaces. The joined text is then capped at a
//! sentence boundary, never cutting into the base.

use super::{CaptionCandidate, CaptionError, SimilarityBackend};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_CAPTION_CAP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionMode {
    /// Compare each candidate with the longest only.
    #[default]
    AgainstLongest,
    /// Additionally require dissimilarity to every candidate already appended.
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub cap: usize,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, cap: DEFAULT_CAPTION_CAP, mode: SelectionMode::AgainstLongest }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub final_text: String,
    /// Ranked candidates; all but the first carry `similarity_to_longest`.
    pub candidates: Vec<CaptionCandidate>,
    /// Highest similarity-to-longest among non-base candidates.
    pub max_similarity: Option<f64>,
}

pub fn rank_candidates(candidates: &mut [CaptionCandidate]) {
    candidates.sort_by(|a, b| b.length.cmp(&a.length).then_with(|| a.text.cmp(&b.text)));
}

pub fn select_and_concat(
    candidates: Vec<CaptionCandidate>,
    config: &SelectionConfig,
    backend: &dyn SimilarityBackend,
) -> Result<Selection, CaptionError> {
    if candidates.is_empty() {
        return Err(CaptionError::EmptyCandidateSet);
    }
    let mut ranked: Vec<CaptionCandidate> =
        candidates.into_iter().map(|c| CaptionCandidate::new(c.text, c.origin)).collect();
    rank_candidates(&mut ranked);

    let base = ranked[0].text.clone();
    let mut appended: Vec<String> = Vec::new();
    let mut max_similarity: Option<f64> = None;
    for cand in ranked.iter_mut().skip(1) {
        let sim = backend.similarity(&base, &cand.text)?;
        cand.similarity_to_longest = Some(sim);
        max_similarity = Some(max_similarity.map_or(sim, |m: f64| m.max(sim)));
        if sim >= config.threshold {
            continue;
        }
        if config.mode == SelectionMode::Pairwise {
            let mut distinct = true;
            for prev in &appended {
                if backend.similarity(prev, &cand.text)? >= config.threshold {
                    distinct = false;
                    break;
                }
            }
            if !distinct {
                continue;
            }
        }
        appended.push(cand.text.clone());
    }

    let mut full = base.clone();
    for text in &appended {
        full.push(' ');
        full.push_str(text);
    }
    let final_text = cap_at_sentence(&full, base.chars().count(), config.cap);
    Ok(Selection { final_text, candidates: ranked, max_similarity })
}

/// Cuts `text` to at most `cap` chars at the last sentence end (`.`, `!`,
/// `?` followed by whitespace or end of text) that is not inside the first
/// `keep` chars. Falls back to the first `keep` chars.
pub fn cap_at_sentence(text: &str, keep: usize, cap: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= cap {
        return text.to_string();
    }
    let mut cut = keep;
    for i in keep..chars.len().min(cap) {
        let terminal = matches!(chars[i], '.' | '!' | '?');
        let boundary = chars.get(i + 1).is_none_or(|c| c.is_whitespace());
        if terminal && boundary {
            cut = i + 1;
        }
    }
    chars[..cut.max(keep)].iter().collect::<String>().trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::super::{CandidateOrigin, SimilarityError, TfCosine};
    use super::*;
    use std::collections::HashMap;

    struct Table(HashMap<String, f64>);

    impl SimilarityBackend for Table {
        fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
            if a == b {
                return Ok(1.0);
            }
            let other = if a.len() >= b.len() { b } else { a };
            Ok(self.0[other])
        }
    }

    fn cand(len: usize, tag: char) -> CaptionCandidate {
        CaptionCandidate::new(std::iter::repeat_n(tag, len).collect(), CandidateOrigin::CaptionerSample)
    }

    #[test]
    fn threshold_rule_example() {
        let cands = vec![cand(20, 'd'), cand(50, 'a'), cand(10, 'e'), cand(40, 'b'), cand(30, 'c')];
        let sims: HashMap<String, f64> = [(40, 'b', 0.9), (30, 'c', 0.7), (20, 'd', 0.84), (10, 'e', 0.86)]
            .into_iter()
            .map(|(l, t, s)| (std::iter::repeat_n(t, l).collect(), s))
            .collect();
        let sel = select_and_concat(cands, &SelectionConfig::default(), &Table(sims)).unwrap();
        let expected = format!("{} {} {}", "a".repeat(50), "c".repeat(30), "d".repeat(20));
        assert_eq!(sel.final_text, expected);
        let lengths: Vec<_> = sel.candidates.iter().map(|c| c.length).collect();
        assert_eq!(lengths, [50, 40, 30, 20, 10]);
        assert_eq!(sel.candidates[0].similarity_to_longest, None);
        assert_eq!(sel.candidates[1].similarity_to_longest, Some(0.9));
        assert_eq!(sel.max_similarity, Some(0.9));
    }

    #[test]
    fn single_and_zero_threshold() {
        let one = vec![CaptionCandidate::new("A lone caption.".into(), CandidateOrigin::Raw)];
        assert_eq!(
            select_and_concat(one, &SelectionConfig::default(), &TfCosine).unwrap().final_text,
            "A lone caption."
        );
        let cands = vec![
            CaptionCandidate::new("a manta ray over sand".into(), CandidateOrigin::CaptionerSample),
            CaptionCandidate::new("green turtle".into(), CandidateOrigin::CaptionerSample),
        ];
        let cfg = SelectionConfig { threshold: 0.0, ..Default::default() };
        assert_eq!(select_and_concat(cands, &cfg, &TfCosine).unwrap().final_text, "a manta ray over sand");
        assert_eq!(
            select_and_concat(vec![], &SelectionConfig::default(), &TfCosine),
            Err(CaptionError::EmptyCandidateSet)
        );
    }

    #[test]
    fn ties_break_lexicographically() {
        let cands = vec![
            CaptionCandidate::new("bbb".into(), CandidateOrigin::CaptionerSample),
            CaptionCandidate::new("aaa".into(), CandidateOrigin::CaptionerSample),
        ];
        let sel = select_and_concat(cands, &SelectionConfig::default(), &TfCosine).unwrap();
        assert_eq!(sel.final_text, "aaa bbb");
    }

    #[test]
    fn cap_cuts_at_sentence_boundary() {
        assert_eq!(cap_at_sentence("Base one. Two two. Three three.", 9, 20), "Base one. Two two.");
        assert_eq!(cap_at_sentence("Base one. Two two three", 9, 15), "Base one.");
        // Base longer than the cap is kept whole.
        assert_eq!(cap_at_sentence("A very long base sentence. x.", 26, 10), "A very long base sentence.");
        assert_eq!(cap_at_sentence("short", 5, 512), "short");
        // "e.g" inside a word is not a boundary.
        assert_eq!(cap_at_sentence("Base. Fish e.g.tuna swim. More", 5, 28), "Base. Fish e.g.tuna swim.");
    }

    #[test]
    fn pairwise_mode_drops_near_copies() {
        let cands = vec![
            CaptionCandidate::new("a large grey reef shark swimming".into(), CandidateOrigin::CaptionerSample),
            CaptionCandidate::new("coral garden blue".into(), CandidateOrigin::CaptionerSample),
            CaptionCandidate::new("blue coral garden".into(), CandidateOrigin::CaptionerSample),
        ];
        let literal = select_and_concat(cands.clone(), &SelectionConfig::default(), &TfCosine).unwrap();
        assert_eq!(literal.final_text, "a large grey reef shark swimming blue coral garden coral garden blue");
        let cfg = SelectionConfig { mode: SelectionMode::Pairwise, ..Default::default() };
        let pairwise = select_and_concat(cands, &cfg, &TfCosine).unwrap();
        assert_eq!(pairwise.final_text, "a large grey reef shark swimming blue coral garden");
    }
}
