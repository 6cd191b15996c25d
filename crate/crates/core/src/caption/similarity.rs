use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("similarity backend unavailable: {0}")]
    BackendUnavailable(String),
}

/// Sentence similarity in `[0, 1]`. Implementations must be symmetric and
/// return 1 for identical non-empty strings.
pub trait SimilarityBackend: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError>;
}

/// Offline backend: cosine over term-frequency vectors of lowercased
/// alphanumeric word tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosine;

pub fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn term_frequencies(s: &str) -> BTreeMap<String, u64> {
    let mut tf = BTreeMap::new();
    for t in tokens(s) {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf
}

pub fn tf_cosine(a: &str, b: &str) -> f64 {
    if a == b && !a.is_empty() {
        return 1.0;
    }
    let ta = term_frequencies(a);
    let tb = term_frequencies(b);
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    // Integer sums keep the result exactly symmetric.
    let dot: u64 = ta.iter().filter_map(|(t, ca)| tb.get(t).map(|cb| ca * cb)).sum();
    let na: u64 = ta.values().map(|c| c * c).sum();
    let nb: u64 = tb.values().map(|c| c * c).sum();
    let score = dot as f64 / ((na as f64) * (nb as f64)).sqrt();
    score.clamp(0.0, 1.0)
}

impl SimilarityBackend for TfCosine {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(tf_cosine(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(tf_cosine("a reef shark", "a reef shark"), 1.0);
        assert_eq!(tf_cosine("a b c d", "a b x y"), 0.5);
        assert_eq!(tf_cosine("", "anything"), 0.0);
        assert_eq!(tf_cosine("", ""), 0.0);
        assert_eq!(tf_cosine("!!!", "!!!"), 1.0);
        assert_eq!(tf_cosine("Reef, shark!", "reef SHARK"), 1.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in "[a-d ]{0,20}", b in "[a-d ]{0,20}") {
            let ab = tf_cosine(&a, &b);
            prop_assert_eq!(ab, tf_cosine(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn identity(a in ".{1,40}") {
            prop_assert_eq!(tf_cosine(&a, &a), 1.0);
        }
    }
}
