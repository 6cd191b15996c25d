use std::path::Path;
use std::process::Command;

use chrono::{DateTime, Utc};
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::normalize_taxon_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Web,
    VideoSubtitled,
    VideoPlain,
    DatasetDump,
    PrivateSurvey,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Web => "web",
            Source::VideoSubtitled => "video_subtitled",
            Source::VideoPlain => "video_plain",
            Source::DatasetDump => "dataset_dump",
            Source::PrivateSurvey => "private_survey",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRecord {
    /// Hex SHA-256 over the decoded pixels, see [`record_id_for`].
    pub record_id: String,
    pub source: Source,
    pub origin_uri: String,
    /// Normalized taxon id.
    pub category_annotation: Option<String>,
    pub raw_text: Option<String>,
    pub width: u32,
    pub height: u32,
    pub created_at: DateTime<Utc>,
}

/// Text paired with an ingested record plus the rule that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub record_id: String,
    pub text: String,
    pub extraction_rule: String,
}

/// A decoded image together with its record.
#[derive(Debug, Clone)]
pub struct IngestedMedia {
    pub record: MediaRecord,
    pub pixels: RgbaImage,
}

impl IngestedMedia {
    pub fn new(
        pixels: RgbaImage,
        source: Source,
        origin_uri: impl Into<String>,
        category: Option<&str>,
        raw_text: Option<String>,
    ) -> Self {
        let record = MediaRecord {
            record_id: record_id_for(&pixels),
            source,
            origin_uri: origin_uri.into(),
            category_annotation: category.map(normalize_taxon_id).filter(|c| !c.is_empty()),
            raw_text: raw_text.filter(|t| !t.trim().is_empty()),
            width: pixels.width(),
            height: pixels.height(),
            created_at: Utc::now(),
        };
        Self { record, pixels }
    }
}

/// Content hash of decoded pixels: SHA-256 over width and height (u32 LE)
/// followed by the RGBA8 buffer. Re-encoding an image losslessly in any
/// container yields the same id.
pub fn record_id_for(pixels: &RgbaImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(pixels.width().to_le_bytes());
    hasher.update(pixels.height().to_le_bytes());
    hasher.update(pixels.as_raw());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Error)]
#[error("undecodable image: {0}")]
pub struct DecodeError(pub String);

pub fn decode_image(bytes: &[u8]) -> Result<RgbaImage, DecodeError> {
    let img = image::load_from_memory(bytes).map_err(|e| DecodeError(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(DecodeError("zero-sized image".into()));
    }
    Ok(img.to_rgba8())
}

/// Extracts still frames from a video file. Decoding video is delegated to
/// an external tool; implementations only have to honour the timestamps.
pub trait FrameExtractor: Send + Sync {
    fn duration(&self, video: &Path) -> Result<f64, FrameError>;
    fn extract(&self, video: &Path, timestamps: &[f64]) -> Result<Vec<RgbaImage>, FrameError>;
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame extractor failed for {path}: {message}")]
    Tool { path: String, message: String },
}

/// Runs `ffprobe` / `ffmpeg` (or the configured binaries).
#[derive(Debug, Clone)]
pub struct FfmpegExtractor {
    pub ffmpeg: String,
    pub ffprobe: String,
}

impl Default for FfmpegExtractor {
    fn default() -> Self {
        Self { ffmpeg: "ffmpeg".into(), ffprobe: "ffprobe".into() }
    }
}

impl FfmpegExtractor {
    fn fail(video: &Path, message: impl Into<String>) -> FrameError {
        FrameError::Tool { path: video.display().to_string(), message: message.into() }
    }
}

impl FrameExtractor for FfmpegExtractor {
    fn duration(&self, video: &Path) -> Result<f64, FrameError> {
        let out = Command::new(&self.ffprobe)
            .args(["-v", "error", "-show_entries", "format=duration", "-of", "default=nw=1:nk=1"])
            .arg(video)
            .output()
            .map_err(|e| Self::fail(video, e.to_string()))?;
        if !out.status.success() {
            return Err(Self::fail(video, String::from_utf8_lossy(&out.stderr)));
        }
        String::from_utf8_lossy(&out.stdout).trim().parse().map_err(|_| Self::fail(video, "unparseable duration"))
    }

    fn extract(&self, video: &Path, timestamps: &[f64]) -> Result<Vec<RgbaImage>, FrameError> {
        timestamps
            .iter()
            .map(|t| {
                let out = Command::new(&self.ffmpeg)
                    .args(["-v", "error", "-ss", &format!("{t:.3}"), "-i"])
                    .arg(video)
                    .args(["-frames:v", "1", "-f", "image2pipe", "-vcodec", "png", "-"])
                    .output()
                    .map_err(|e| Self::fail(video, e.to_string()))?;
                if !out.status.success() {
                    return Err(Self::fail(video, String::from_utf8_lossy(&out.stderr)));
                }
                decode_image(&out.stdout).map_err(|e| Self::fail(video, e.to_string()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{DynamicImage, ImageFormat, Rgba};
    use std::io::Cursor;

    fn sample() -> RgbaImage {
        RgbaImage::from_fn(17, 9, |x, y| Rgba([(x * 13) as u8, (y * 29) as u8, 200, 255]))
    }

    #[test]
    fn record_id_ignores_container() {
        let img = sample();
        let mut png = Vec::new();
        DynamicImage::ImageRgba8(img.clone()).write_to(&mut Cursor::new(&mut png), ImageFormat::Png).unwrap();
        let mut bmp_like = Vec::new();
        // Same pixels through an RGB PNG with a different compression path.
        DynamicImage::ImageRgba8(img.clone())
            .to_rgb8()
            .write_to(&mut Cursor::new(&mut bmp_like), ImageFormat::Png)
            .unwrap();
        let a = record_id_for(&decode_image(&png).unwrap());
        let b = record_id_for(&decode_image(&bmp_like).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, record_id_for(&img));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn record_id_depends_on_shape() {
        let flat = RgbaImage::from_pixel(4, 2, Rgba([1, 2, 3, 4]));
        let tall = RgbaImage::from_pixel(2, 4, Rgba([1, 2, 3, 4]));
        assert_ne!(record_id_for(&flat), record_id_for(&tall));
    }

    #[test]
    fn corrupt_bytes_fail_to_decode() {
        assert!(decode_image(b"\x89PNG\r\n\x1a\nnot really").is_err());
    }
}
