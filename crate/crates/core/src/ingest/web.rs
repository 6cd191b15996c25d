//! Image/caption candidate extraction from HTML pages.
//!
//! The page is tokenized leniently (unclosed tags, stray `<`, and unknown
//! entities are tolerated). For each `<img>` the first rule that yields text
//! wins:
//!
//! 1. `figcaption`: the caption of the enclosing `<figure>`;
//! 2. `alt`: the image's alt attribute;
//! 3. `proximity`: the nearest text block whose source position lies within
//!    [`PROXIMITY_WINDOW`] characters of the image tag.
//!
//! Images with no usable text are skipped.

use serde::{Deserialize, Serialize};
use url::Url;

use crate::text::collapse_whitespace;

pub const PROXIMITY_WINDOW: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    Figcaption,
    Alt,
    Proximity,
}

impl ExtractionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Figcaption => "figcaption",
            Self::Alt => "alt",
            Self::Proximity => "proximity",
        }
    }
}

/// A candidate pair before the image has been fetched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebCandidate {
    pub image_uri: String,
    pub text: String,
    pub extraction_rule: ExtractionRule,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open { name: String, attrs: Vec<(String, String)>, self_closing: bool },
    Close { name: String },
    Text(String),
}

/// A token plus its char span in the source.
#[derive(Debug, Clone)]
struct Spanned {
    token: Token,
    start: usize,
    end: usize,
}

const RAW_TEXT: &[&str] = &["script", "style", "textarea", "title", "noscript"];

const BLOCK: &[&str] = &[
    "address",
    "article",
    "aside",
    "blockquote",
    "body",
    "br",
    "caption",
    "dd",
    "details",
    "div",
    "dl",
    "dt",
    "fieldset",
    "figcaption",
    "figure",
    "footer",
    "form",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "header",
    "hr",
    "html",
    "img",
    "li",
    "main",
    "nav",
    "ol",
    "p",
    "pre",
    "section",
    "summary",
    "table",
    "td",
    "th",
    "tr",
    "ul",
];

fn tokenize(src: &str) -> Vec<Spanned> {
    let chars: Vec<char> = src.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut i = 0;
    let mut text_start = 0;

    let flush = |out: &mut Vec<Spanned>, from: usize, to: usize| {
        if to > from {
            out.push(Spanned { token: Token::Text(chars[from..to].iter().collect()), start: from, end: to });
        }
    };

    while i < n {
        if chars[i] != '<' {
            i += 1;
            continue;
        }
        let rest = |k: usize| chars.get(i + k).copied();
        // Comment.
        if rest(1) == Some('!') && rest(2) == Some('-') && rest(3) == Some('-') {
            flush(&mut out, text_start, i);
            let end = find_seq(&chars, i + 4, &['-', '-', '>']).map(|p| p + 3).unwrap_or(n);
            i = end;
            text_start = i;
            continue;
        }
        // Doctype / processing instruction.
        if matches!(rest(1), Some('!') | Some('?')) {
            flush(&mut out, text_start, i);
            i = find_char(&chars, i, '>').map(|p| p + 1).unwrap_or(n);
            text_start = i;
            continue;
        }
        let closing = rest(1) == Some('/');
        let name_start = if closing { i + 2 } else { i + 1 };
        if !chars.get(name_start).is_some_and(|c| c.is_ascii_alphabetic()) {
            // Stray '<' is text.
            i += 1;
            continue;
        }
        flush(&mut out, text_start, i);
        let Some(tag_end) = find_tag_end(&chars, name_start) else {
            // Unterminated tag swallows the rest of the document.
            text_start = n;
            break;
        };
        let inner: String = chars[name_start..tag_end].iter().collect();
        let start = i;
        i = tag_end + 1;
        text_start = i;
        if closing {
            let name = inner.split(|c: char| c.is_whitespace() || c == '/').next().unwrap_or("").to_ascii_lowercase();
            out.push(Spanned { token: Token::Close { name }, start, end: i });
            continue;
        }
        let (name, attrs, self_closing) = parse_tag(&inner);
        let raw = RAW_TEXT.contains(&name.as_str());
        out.push(Spanned { token: Token::Open { name: name.clone(), attrs, self_closing }, start, end: i });
        if raw && !self_closing {
            let close: Vec<char> = format!("</{name}").chars().collect();
            let body_end = find_seq_ci(&chars, i, &close).unwrap_or(n);
            // Raw text contents are not page text.
            let after = find_char(&chars, body_end, '>').map(|p| p + 1).unwrap_or(n);
            if body_end < n {
                out.push(Spanned { token: Token::Close { name }, start: body_end, end: after });
            }
            i = after;
            text_start = i;
        }
    }
    flush(&mut out, text_start, n);
    out
}

fn find_char(chars: &[char], from: usize, c: char) -> Option<usize> {
    chars.get(from..)?.iter().position(|&x| x == c).map(|p| p + from)
}

fn find_seq(chars: &[char], from: usize, seq: &[char]) -> Option<usize> {
    if from >= chars.len() {
        return None;
    }
    chars[from..].windows(seq.len()).position(|w| w == seq).map(|p| p + from)
}

fn find_seq_ci(chars: &[char], from: usize, seq: &[char]) -> Option<usize> {
    if from >= chars.len() {
        return None;
    }
    chars[from..]
        .windows(seq.len())
        .position(|w| w.iter().zip(seq).all(|(a, b)| a.eq_ignore_ascii_case(b)))
        .map(|p| p + from)
}

/// Finds the closing '>' of a tag, skipping quoted attribute values.
fn find_tag_end(chars: &[char], from: usize) -> Option<usize> {
    let mut quote: Option<char> = None;
    for (k, &c) in chars.iter().enumerate().skip(from) {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == '>' => return Some(k),
            None => {}
        }
    }
    None
}

fn parse_tag(inner: &str) -> (String, Vec<(String, String)>, bool) {
    let trimmed = inner.trim_end();
    let self_closing = trimmed.ends_with('/');
    let body = trimmed.trim_end_matches('/');
    let name_len = body.find(|c: char| c.is_whitespace() || c == '/').unwrap_or(body.len());
    let name = body[..name_len].to_ascii_lowercase();
    let mut attrs = Vec::new();
    let rest: Vec<char> = body[name_len..].chars().collect();
    let mut k = 0;
    while k < rest.len() {
        while k < rest.len() && (rest[k].is_whitespace() || rest[k] == '/') {
            k += 1;
        }
        let ks = k;
        while k < rest.len() && !rest[k].is_whitespace() && rest[k] != '=' {
            k += 1;
        }
        if ks == k {
            k += 1;
            continue;
        }
        let key: String = rest[ks..k].iter().collect::<String>().to_ascii_lowercase();
        while k < rest.len() && rest[k].is_whitespace() {
            k += 1;
        }
        let mut value = String::new();
        if k < rest.len() && rest[k] == '=' {
            k += 1;
            while k < rest.len() && rest[k].is_whitespace() {
                k += 1;
            }
            if k < rest.len() && (rest[k] == '"' || rest[k] == '\'') {
                let q = rest[k];
                k += 1;
                let vs = k;
                while k < rest.len() && rest[k] != q {
                    k += 1;
                }
                value = rest[vs..k].iter().collect();
                k += 1;
            } else {
                let vs = k;
                while k < rest.len() && !rest[k].is_whitespace() {
                    k += 1;
                }
                value = rest[vs..k].iter().collect();
            }
        }
        attrs.push((key, decode_entities(&value)));
    }
    (name, attrs, self_closing)
}

pub(crate) fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let Some(semi) = rest[..rest.len().min(12)].find(';') else {
            out.push('&');
            rest = &rest[1..];
            continue;
        };
        let entity = &rest[1..semi];
        let decoded = match entity {
            "amp" => Some('&'),
            "lt" => Some('<'),
            "gt" => Some('>'),
            "quot" => Some('"'),
            "apos" => Some('\''),
            "nbsp" => Some(' '),
            e if e.starts_with("#x") || e.starts_with("#X") => {
                u32::from_str_radix(&e[2..], 16).ok().and_then(char::from_u32)
            }
            e if e.starts_with('#') => e[1..].parse().ok().and_then(char::from_u32),
            _ => None,
        };
        match decoded {
            Some(c) => {
                out.push(c);
                rest = &rest[semi + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn attr<'a>(attrs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn usable(text: &str) -> Option<String> {
    let t = collapse_whitespace(text);
    t.chars().any(char::is_alphanumeric).then_some(t)
}

struct TextBlock {
    start: usize,
    end: usize,
    text: String,
}

struct ImageSite {
    src: String,
    alt: Option<String>,
    figure: Option<usize>,
    start: usize,
    end: usize,
}

/// Extracts image/text candidates from `html`, resolving image URIs against
/// `base_uri`. Malformed markup never fails; unusable images are skipped.
pub fn extract_web_pairs(html: &[u8], base_uri: &str) -> Vec<WebCandidate> {
    let src = String::from_utf8_lossy(html);
    let tokens = tokenize(&src);
    let base = Url::parse(base_uri).ok();

    let mut blocks: Vec<TextBlock> = Vec::new();
    let mut images: Vec<ImageSite> = Vec::new();
    // Stack of open figure ids; captions collected per figure.
    let mut figures: Vec<usize> = Vec::new();
    let mut figure_count = 0;
    let mut captions: Vec<String> = Vec::new();
    let mut in_figcaption: Option<usize> = None;
    let mut current: Option<TextBlock> = None;

    let close_block = |current: &mut Option<TextBlock>, blocks: &mut Vec<TextBlock>| {
        if let Some(b) = current.take() {
            if let Some(text) = usable(&b.text) {
                blocks.push(TextBlock { text, ..b });
            }
        }
    };

    for Spanned { token, start, end } in tokens {
        match token {
            Token::Text(t) => {
                let decoded = decode_entities(&t);
                if let Some(fig) = in_figcaption {
                    captions[fig].push(' ');
                    captions[fig].push_str(&decoded);
                }
                if decoded.trim().is_empty() {
                    continue;
                }
                match current.as_mut() {
                    Some(b) => {
                        b.text.push(' ');
                        b.text.push_str(&decoded);
                        b.end = end;
                    }
                    None => current = Some(TextBlock { start, end, text: decoded }),
                }
            }
            Token::Open { name, attrs, self_closing } => {
                if BLOCK.contains(&name.as_str()) {
                    close_block(&mut current, &mut blocks);
                }
                match name.as_str() {
                    "figure" if !self_closing => {
                        figures.push(figure_count);
                        captions.push(String::new());
                        figure_count += 1;
                    }
                    "figcaption" if !self_closing => in_figcaption = figures.last().copied(),
                    "img" => {
                        let src = attr(&attrs, "src")
                            .filter(|s| !s.trim().is_empty())
                            .or_else(|| attr(&attrs, "data-src"))
                            .map(str::trim)
                            .unwrap_or("");
                        if !src.is_empty() {
                            images.push(ImageSite {
                                src: src.to_string(),
                                alt: attr(&attrs, "alt").and_then(usable),
                                figure: figures.last().copied(),
                                start,
                                end,
                            });
                        }
                    }
                    _ => {}
                }
            }
            Token::Close { name } => {
                if BLOCK.contains(&name.as_str()) {
                    close_block(&mut current, &mut blocks);
                }
                match name.as_str() {
                    "figcaption" => in_figcaption = None,
                    "figure" => {
                        figures.pop();
                        in_figcaption = None;
                    }
                    _ => {}
                }
            }
        }
    }
    close_block(&mut current, &mut blocks);

    images
        .into_iter()
        .filter_map(|img| {
            let image_uri = resolve(base.as_ref(), &img.src)?;
            let caption = img.figure.and_then(|f| usable(&captions[f]));
            let (text, extraction_rule) = if let Some(c) = caption {
                (c, ExtractionRule::Figcaption)
            } else if let Some(alt) = img.alt {
                (alt, ExtractionRule::Alt)
            } else {
                (nearest_block(&blocks, img.start, img.end)?, ExtractionRule::Proximity)
            };
            Some(WebCandidate { image_uri, text, extraction_rule })
        })
        .collect()
}

fn nearest_block(blocks: &[TextBlock], start: usize, end: usize) -> Option<String> {
    blocks
        .iter()
        .map(|b| {
            let distance = if b.end <= start { start - b.end } else { b.start.saturating_sub(end) };
            (distance, b)
        })
        .filter(|(d, _)| *d <= PROXIMITY_WINDOW)
        // Earlier block wins ties.
        .min_by_key(|(d, b)| (*d, b.start))
        .map(|(_, b)| b.text.clone())
}

fn resolve(base: Option<&Url>, src: &str) -> Option<String> {
    if src.starts_with("data:") {
        return None;
    }
    match base {
        Some(b) => b.join(src).ok().map(String::from),
        None => Url::parse(src).ok().map(String::from),
    }
}
