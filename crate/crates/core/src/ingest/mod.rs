//! Acquisition of raw image-text material: subtitle tracks and keyframe
//! plans for videos, caption extraction from web pages, polite fetching,
//! and dataset-dump import.

pub mod dump;
pub mod fetch;
pub mod keyframes;
pub mod media;
pub mod subtitles;
pub mod web;

pub use dump::{import_records, DumpError, DumpImport, SkippedLine};
pub use fetch::{FetchError, FetchedResource, Fetcher, PolitenessConfig};
pub use keyframes::{plan_keyframes, Alignment, KeyframeSpec, PlanError};
pub use media::{
    decode_image, record_id_for, DecodeError, FfmpegExtractor, FrameError, FrameExtractor, IngestedMedia, MediaRecord,
    RawPair, Source,
};
pub use subtitles::{parse_subtitles, serialize_subtitles, SubtitleCue, SubtitleError, SubtitleFormat};
pub use web::{extract_web_pairs, ExtractionRule, WebCandidate};
