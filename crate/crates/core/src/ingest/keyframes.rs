//! Keyframe planning for videos.
//!
//! Plain videos are sampled on a fixed 10 second cadence starting at t=0.
//! Subtitled videos get exactly one keyframe per cue, at the cue midpoint,
//! carrying the cue text as the expected caption.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::subtitles::SubtitleCue;

pub const KEYFRAME_INTERVAL_SECS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Alignment {
    FixedInterval { ordinal: u32 },
    Cue { index: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSpec {
    pub timestamp: f64,
    pub alignment: Alignment,
    pub expected_text: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("video duration must be positive and finite, got {0}")]
    InvalidDuration(f64),
    #[error("cue {index} ({start}s..{end}s) lies outside the video duration {duration}s")]
    CueOutOfRange { index: u32, start: f64, end: f64, duration: f64 },
}

/// Plans keyframe timestamps for a video of `duration` seconds.
///
/// `Some(&[])` is treated like `None`: a track without cues is a plain video.
pub fn plan_keyframes(duration: f64, cues: Option<&[SubtitleCue]>) -> Result<Vec<KeyframeSpec>, PlanError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(PlanError::InvalidDuration(duration));
    }
    match cues {
        Some(cues) if !cues.is_empty() => cues
            .iter()
            .map(|cue| {
                if cue.end() > duration {
                    return Err(PlanError::CueOutOfRange {
                        index: cue.index,
                        start: cue.start(),
                        end: cue.end(),
                        duration,
                    });
                }
                Ok(KeyframeSpec {
                    // One rounding step: the integer sum is exact.
                    timestamp: (cue.start_ms + cue.end_ms) as f64 / 2000.0,
                    alignment: Alignment::Cue { index: cue.index },
                    expected_text: Some(cue.text.clone()),
                })
            })
            .collect(),
        _ => {
            let count = (duration / f64::from(KEYFRAME_INTERVAL_SECS)).floor() as u32 + 1;
            Ok((0..count)
                .map(|ordinal| KeyframeSpec {
                    timestamp: f64::from(ordinal * KEYFRAME_INTERVAL_SECS),
                    alignment: Alignment::FixedInterval { ordinal },
                    expected_text: None,
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn timestamps(plan: &[KeyframeSpec]) -> Vec<f64> {
        plan.iter().map(|k| k.timestamp).collect()
    }

    #[test]
    fn fixed_cadence_examples() {
        assert_eq!(timestamps(&plan_keyframes(25.0, None).unwrap()), [0.0, 10.0, 20.0]);
        assert_eq!(timestamps(&plan_keyframes(9.5, None).unwrap()), [0.0]);
        assert_eq!(timestamps(&plan_keyframes(30.0, None).unwrap()), [0.0, 10.0, 20.0, 30.0]);
        assert_eq!(plan_keyframes(25.0, None).unwrap()[2].alignment, Alignment::FixedInterval { ordinal: 2 });
    }

    #[test]
    fn cue_midpoint() {
        let cue = SubtitleCue { index: 1, start_ms: 2000, end_ms: 6000, text: "text".into() };
        let plan = plan_keyframes(60.0, Some(&[cue])).unwrap();
        assert_eq!(
            plan,
            vec![KeyframeSpec {
                timestamp: 4.0,
                alignment: Alignment::Cue { index: 1 },
                expected_text: Some("text".into())
            }]
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(plan_keyframes(0.0, None), Err(PlanError::InvalidDuration(_))));
        assert!(matches!(plan_keyframes(f64::NAN, None), Err(PlanError::InvalidDuration(_))));
        let cue = SubtitleCue { index: 1, start_ms: 2000, end_ms: 61_000, text: "late".into() };
        assert!(matches!(plan_keyframes(60.0, Some(&[cue])), Err(PlanError::CueOutOfRange { .. })));
        assert_eq!(plan_keyframes(12.0, Some(&[])).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn fixed_count_formula(d in 0.001f64..5000.0) {
            let plan = plan_keyframes(d, None).unwrap();
            prop_assert_eq!(plan.len(), (d / 10.0).floor() as usize + 1);
        }
    }
}
