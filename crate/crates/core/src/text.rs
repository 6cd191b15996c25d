//! Small text helpers shared across modules.

/// Lowercases and collapses runs of whitespace, so `"Arothron  Nigropunctatus"`
/// and `"arothron nigropunctatus"` map to the same id.
pub fn normalize_taxon_id(name: &str) -> String {
    collapse_whitespace(&name.to_lowercase())
}

pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Escapes a value for a tab-separated field: backslash, tab, CR and LF.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn taxon_ids_unify() {
        assert_eq!(normalize_taxon_id("Arothron  Nigropunctatus"), "arothron nigropunctatus");
        assert_eq!(normalize_taxon_id(" arothron\tnigropunctatus\n"), "arothron nigropunctatus");
    }

    proptest! {
        #[test]
        fn field_escape_round_trips(s in ".*") {
            let escaped = escape_field(&s);
            prop_assert!(!escaped.contains(['\t', '\n', '\r']));
            prop_assert_eq!(unescape_field(&escaped), s);
        }
    }
}
