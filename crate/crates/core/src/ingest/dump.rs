//! Dataset-dump manifests: one record per line, tab-separated
//! `image_path [\t category [\t text]]`, UTF-8. Relative image paths resolve
//! against the manifest's directory. Blank lines and `#` comments are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::media::{decode_image, IngestedMedia, Source};

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("cannot read dump manifest {path}: {message}")]
    ManifestUnreadable { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct DumpImport {
    pub items: Vec<IngestedMedia>,
    pub skipped: Vec<SkippedLine>,
}

pub fn import_records(manifest: &Path, source: Source) -> Result<DumpImport, DumpError> {
    let unreadable = |message: String| DumpError::ManifestUnreadable { path: manifest.to_path_buf(), message };
    let bytes = fs::read(manifest).map_err(|e| unreadable(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|_| unreadable("not valid UTF-8".into()))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let base = manifest.parent().unwrap_or(Path::new("."));

    let mut out = DumpImport::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let path = fields.next().unwrap_or("").trim();
        let category = fields.next().map(str::trim).filter(|s| !s.is_empty());
        let text = fields.next().map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
        if fields.next().is_some() {
            out.skipped.push(SkippedLine { line: line_no, reason: "more than 3 fields".into() });
            continue;
        }
        if path.is_empty() {
            out.skipped.push(SkippedLine { line: line_no, reason: "missing image path".into() });
            continue;
        }
        let full = base.join(path);
        let bytes = match fs::read(&full) {
            Ok(b) => b,
            Err(e) => {
                out.skipped.push(SkippedLine { line: line_no, reason: format!("{}: {e}", full.display()) });
                continue;
            }
        };
        match decode_image(&bytes) {
            Ok(pixels) => out.items.push(IngestedMedia::new(pixels, source, path, category, text)),
            Err(e) => out.skipped.push(SkippedLine { line: line_no, reason: e.to_string() }),
        }
    }
    Ok(out)
}
