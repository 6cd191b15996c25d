//! SRT and WebVTT subtitle parsing and serialization.
//!
//! Parsing is lenient about layout (CRLF, a leading byte-order mark, missing
//! cue numbers, extra blank lines) but strict about timestamp syntax. Parsed
//! tracks are normalized: styling tags are removed, multi-line text is joined
//! with single spaces, cues are ordered by start time, overlaps are clipped
//! and cues are renumbered from 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtitleFormat {
    Srt,
    Vtt,
}

impl std::str::FromStr for SubtitleFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "srt" => Ok(Self::Srt),
            "vtt" | "webvtt" => Ok(Self::Vtt),
            other => Err(format!("unknown subtitle format `{other}`")),
        }
    }
}

/// One timed line of subtitle text. Times are whole milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtitleCue {
    pub index: u32,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

impl SubtitleCue {
    pub fn start(&self) -> f64 {
        self.start_ms as f64 / 1000.0
    }

    pub fn end(&self) -> f64 {
        self.end_ms as f64 / 1000.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubtitleError {
    #[error("malformed timestamp on line {line}: `{text}`")]
    MalformedTimestamp { line: usize, text: String },
    #[error("subtitle data is not valid UTF-8")]
    InvalidEncoding,
    #[error("missing WEBVTT header")]
    MissingHeader,
}

pub fn parse_subtitles(data: &[u8], format: SubtitleFormat) -> Result<Vec<SubtitleCue>, SubtitleError> {
    let text = std::str::from_utf8(data).map_err(|_| SubtitleError::InvalidEncoding)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let raw = match format {
        SubtitleFormat::Srt => parse_srt_blocks(&lines)?,
        SubtitleFormat::Vtt => parse_vtt_blocks(&lines)?,
    };
    Ok(normalize(raw))
}

pub fn serialize_subtitles(cues: &[SubtitleCue], format: SubtitleFormat) -> String {
    let mut out = String::new();
    match format {
        SubtitleFormat::Srt => {
            for (i, cue) in cues.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&format!(
                    "{}\n{} --> {}\n{}\n",
                    cue.index,
                    format_time(cue.start_ms, ','),
                    format_time(cue.end_ms, ','),
                    cue.text
                ));
            }
        }
        SubtitleFormat::Vtt => {
            out.push_str("WEBVTT\n");
            for cue in cues {
                out.push_str(&format!(
                    "\n{}\n{} --> {}\n{}\n",
                    cue.index,
                    format_time(cue.start_ms, '.'),
                    format_time(cue.end_ms, '.'),
                    escape_vtt(&cue.text)
                ));
            }
        }
    }
    out
}

struct RawCue {
    start_ms: u64,
    end_ms: u64,
    text: String,
}

fn parse_srt_blocks(lines: &[&str]) -> Result<Vec<RawCue>, SubtitleError> {
    let mut cues = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        // Optional numeric counter line before the timing line.
        if !lines[i].contains("-->") {
            if i + 1 < lines.len() && lines[i + 1].contains("-->") {
                i += 1;
            } else {
                // Stray text outside any cue.
                i += 1;
                continue;
            }
        }
        let (start_ms, end_ms) = parse_timing(lines[i], i + 1)?;
        i += 1;
        let mut body = Vec::new();
        while i < lines.len() && !lines[i].trim().is_empty() {
            body.push(lines[i]);
            i += 1;
        }
        cues.push(RawCue { start_ms, end_ms, text: clean_text(&body, false) });
    }
    Ok(cues)
}

fn parse_vtt_blocks(lines: &[&str]) -> Result<Vec<RawCue>, SubtitleError> {
    let Some(first) = lines.iter().position(|l| !l.trim().is_empty()) else {
        return Ok(Vec::new());
    };
    let header = lines[first].trim_start();
    if !(header == "WEBVTT" || header.starts_with("WEBVTT ") || header.starts_with("WEBVTT\t")) {
        return Err(SubtitleError::MissingHeader);
    }
    let mut i = first + 1;
    // Header block runs to the first blank line.
    while i < lines.len() && !lines[i].trim().is_empty() {
        i += 1;
    }
    let mut cues = Vec::new();
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let block_start = i;
        while i < lines.len() && !lines[i].trim().is_empty() {
            i += 1;
        }
        let block = &lines[block_start..i];
        let head = block[0].trim_start();
        if head.starts_with("NOTE") || head == "STYLE" || head == "REGION" {
            continue;
        }
        let Some(timing) = block.iter().position(|l| l.contains("-->")) else {
            continue;
        };
        if timing > 1 {
            // Only a single identifier line may precede the timing line.
            continue;
        }
        let (start_ms, end_ms) = parse_timing(block[timing], block_start + timing + 1)?;
        cues.push(RawCue { start_ms, end_ms, text: clean_text(&block[timing + 1..], true) });
    }
    Ok(cues)
}

fn parse_timing(line: &str, line_no: usize) -> Result<(u64, u64), SubtitleError> {
    let malformed = || SubtitleError::MalformedTimestamp { line: line_no, text: line.to_string() };
    let (left, right) = line.split_once("-->").ok_or_else(malformed)?;
    // Anything after the end time is cue settings (VTT) or coordinates (SRT).
    let right = right.split_whitespace().next().ok_or_else(malformed)?;
    let start = parse_time(left.trim()).ok_or_else(malformed)?;
    let end = parse_time(right).ok_or_else(malformed)?;
    Ok((start, end))
}

/// Accepts `[HH:]MM:SS(,|.)mmm`. Hours may have any number of digits.
fn parse_time(s: &str) -> Option<u64> {
    let (clock, frac) = s.rsplit_once([',', '.'])?;
    if frac.len() != 3 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let parts: Vec<&str> = clock.split(':').collect();
    let (h, m, sec) = match parts.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] => ("0", *m, *s),
        _ => return None,
    };
    let digits = |p: &str, exact: Option<usize>| -> Option<u64> {
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if let Some(n) = exact {
            if p.len() != n {
                return None;
            }
        }
        p.parse().ok()
    };
    let h = digits(h, None)?;
    let m = digits(m, Some(2))?;
    let sec = digits(sec, Some(2))?;
    if m > 59 || sec > 59 {
        return None;
    }
    let ms: u64 = frac.parse().ok()?;
    Some(((h * 60 + m) * 60 + sec) * 1000 + ms)
}

fn format_time(ms: u64, sep: char) -> String {
    let h = ms / 3_600_000;
    let m = (ms / 60_000) % 60;
    let s = (ms / 1000) % 60;
    format!("{h:02}:{m:02}:{s:02}{sep}{:03}", ms % 1000)
}

fn clean_text(lines: &[&str], vtt: bool) -> String {
    let joined = lines.join(" ");
    let stripped = strip_tags(&joined);
    let decoded = if vtt { decode_vtt_entities(&stripped) } else { stripped };
    decoded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Removes `<...>` markup and `{\...}` override blocks.
fn strip_tags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '<' => {
                let rest: String = chars.clone().collect();
                if let Some(close) = rest.find('>') {
                    for _ in 0..rest[..=close].chars().count() {
                        chars.next();
                    }
                } else {
                    out.push(c);
                }
            }
            '{' if chars.peek() == Some(&'\\') => {
                let rest: String = chars.clone().collect();
                if let Some(close) = rest.find('}') {
                    for _ in 0..rest[..=close].chars().count() {
                        chars.next();
                    }
                } else {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn decode_vtt_entities(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&nbsp;", " ")
        .replace("&lrm;", "")
        .replace("&rlm;", "")
        .replace("&amp;", "&")
}

fn escape_vtt(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn normalize(mut raw: Vec<RawCue>) -> Vec<SubtitleCue> {
    raw.retain(|c| !c.text.is_empty() && c.start_ms < c.end_ms);
    raw.sort_by_key(|c| (c.start_ms, c.end_ms));
    let mut out: Vec<SubtitleCue> = Vec::with_capacity(raw.len());
    for cue in raw {
        let mut start = cue.start_ms;
        if let Some(prev) = out.last() {
            start = start.max(prev.end_ms);
        }
        if start >= cue.end_ms {
            continue;
        }
        out.push(SubtitleCue { index: out.len() as u32 + 1, start_ms: start, end_ms: cue.end_ms, text: cue.text });
    }
    out
}
