//! Shared text utilities: word splitting, citation-marker handling and the
//! answer normalization used by the evaluation metrics.

use std::sync::LazyLock;

use regex::Regex;

/// Matches a single bracketed citation marker such as `[12]`.
pub(crate) static CITATION_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[(\d+)\]").expect("valid regex"));

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Removes every `[n]` marker, leaving the surrounding text untouched.
pub fn strip_citation_markers(text: &str) -> String {
    CITATION_MARKER.replace_all(text, " ").into_owned()
}

/// Normalization for exact and substring answer matching: citation markers
/// removed, lowercased, whitespace collapsed and punctuation stripped from
/// both ends of every whitespace-delimited token.
pub fn normalize_answer(text: &str) -> String {
    let stripped = strip_citation_markers(text).to_lowercase();
    let mut out = String::with_capacity(stripped.len());
    for token in stripped.split_whitespace() {
        let token = token.trim_matches(|c: char| c.is_ascii_punctuation() || is_quote(c));
        if token.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

fn is_quote(c: char) -> bool {
    matches!(c, '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}')
}

const ABBREVIATIONS: [&str; 10] = ["mr", "mrs", "ms", "dr", "st", "jr", "sr", "vs", "mt", "etc"];

/// Whether a `.` closing `prefix` ends an initial ("D.") or a common
/// abbreviation ("Dr.", "U.S.") rather than a sentence.
pub(crate) fn ends_with_abbreviation(prefix: &str) -> bool {
    let word = prefix
        .rsplit(|c: char| c.is_whitespace() || c == '(' || c == '"')
        .next()
        .unwrap_or("");
    let mut chars = word.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => c.is_uppercase(),
        _ if word.contains('.') => word
            .split('.')
            .all(|part| part.chars().count() == 1 && part.chars().all(char::is_alphabetic)),
        _ => ABBREVIATIONS.contains(&word.to_lowercase().as_str()),
    }
}

/// Splits free text into sentences at `.`, `?` or `!` followed by whitespace
/// or end of input. Used for reading passages, not for parsing answers.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let at_boundary = chars.peek().is_none_or(|(_, next)| next.is_whitespace());
            if at_boundary && !(c == '.' && ends_with_abbreviation(&text[start..i])) {
                let end = i + c.len_utf8();
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    out.push(sentence);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}
