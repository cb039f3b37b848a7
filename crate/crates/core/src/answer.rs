//! Citation-bearing answers: parsing model output in the two answer styles,
//! rendering back to text, and extracting the cited evidence set.
//!
//! Long-form text is split into sentences at `.`, `?` or `!` followed by
//! whitespace or end of input. Citation markers `[n]` anywhere inside a
//! sentence belong to it, and markers immediately following the terminator
//! stay with the preceding sentence. Entity lists split on top-level commas.
//! Both parsers are total: the worst case is an answer with no statements.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{ends_with_abbreviation, CITATION_MARKER};

static LEADING_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\[\d+\]").expect("valid regex"));
static SPACE_BEFORE_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\s+([.,;:!?])").expect("valid regex"));

const ANSWER_HEADER: &str = "Answer:";
const TERMINATORS: [char; 3] = ['.', '?', '!'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStyle {
    LongForm,
    EntityList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub text: String,
    pub citations: Vec<u32>,
}

impl Statement {
    pub fn new(text: impl Into<String>, citations: impl IntoIterator<Item = u32>) -> Self {
        let mut seen = HashSet::new();
        Self {
            text: text.into(),
            citations: citations.into_iter().filter(|c| seen.insert(*c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    /// A marker referenced a document the producing model was not shown.
    OutOfRangeCitation { statement: usize, marker: String },
    /// An entity carried more than the single expected citation.
    MultipleCitations { statement: usize, count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub style: AnswerStyle,
    pub raw_text: String,
    pub statements: Vec<Statement>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<ParseWarning>,
}

impl GroundedAnswer {
    pub fn empty(style: AnswerStyle) -> Self {
        Self {
            style,
            raw_text: String::new(),
            statements: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Builds an answer from statements; `raw_text` is set to the rendering.
    pub fn from_statements(style: AnswerStyle, statements: Vec<Statement>) -> Self {
        let mut answer = Self {
            style,
            raw_text: String::new(),
            statements,
            warnings: Vec::new(),
        };
        answer.raw_text = render(&answer);
        answer
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn has_citations(&self) -> bool {
        self.statements.iter().any(|s| !s.citations.is_empty())
    }

    /// Distinct cited display indices in first-citation order.
    pub fn cited_indices(&self) -> Vec<u32> {
        let mut seen = HashSet::new();
        self.statements
            .iter()
            .flat_map(|s| s.citations.iter().copied())
            .filter(|c| seen.insert(*c))
            .collect()
    }

    pub fn has_warnings(&self) -> bool {
        !self.warnings.is_empty()
    }

    /// Statement text without markers, joined by single spaces.
    pub fn plain_text(&self) -> String {
        self.statements
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(match self.style {
                AnswerStyle::LongForm => " ",
                AnswerStyle::EntityList => ", ",
            })
    }
}

pub fn parse(style: AnswerStyle, text: &str, valid_ids: &BTreeSet<u32>) -> GroundedAnswer {
    match style {
        AnswerStyle::LongForm => parse_long_form(text, valid_ids),
        AnswerStyle::EntityList => parse_entity_list(text, valid_ids),
    }
}

/// Discards everything up to and including the last `Answer:` header, which
/// also covers `Final Answer:` and `Corrected Answer:`.
fn strip_preamble(text: &str) -> &str {
    match text.rfind(ANSWER_HEADER) {
        Some(pos) => &text[pos + ANSWER_HEADER.len()..],
        None => text,
    }
}

/// Pulls citation markers out of a span. Returns the cleaned text, accepted
/// citations (deduplicated, in order) and rejected marker strings.
fn extract_markers(span: &str, valid_ids: &BTreeSet<u32>) -> (String, Vec<u32>, Vec<String>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for cap in CITATION_MARKER.captures_iter(span) {
        match cap[1].parse::<u32>() {
            Ok(id) if valid_ids.contains(&id) => {
                if !accepted.contains(&id) {
                    accepted.push(id);
                }
            }
            _ => rejected.push(cap[0].to_string()),
        }
    }
    let without = CITATION_MARKER.replace_all(span, " ");
    let collapsed = without.split_whitespace().collect::<Vec<_>>().join(" ");
    let cleaned = SPACE_BEFORE_PUNCT.replace_all(&collapsed, "$1").trim().to_string();
    (cleaned, accepted, rejected)
}

fn has_content(text: &str) -> bool {
    text.chars().any(char::is_alphanumeric)
}

fn sentence_spans(body: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut iter = body.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if !TERMINATORS.contains(&c) {
            continue;
        }
        let at_boundary = iter.peek().is_none_or(|(_, next)| next.is_whitespace());
        if !at_boundary || (c == '.' && ends_with_abbreviation(&body[start..i])) {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(m) = LEADING_MARKER.find(&body[end..]) {
            end += m.end();
        }
        spans.push(&body[start..end]);
        start = end;
        while iter.peek().is_some_and(|(j, _)| *j < end) {
            iter.next();
        }
    }
    if start < body.len() {
        spans.push(&body[start..]);
    }
    spans
}

pub fn parse_long_form(text: &str, valid_ids: &BTreeSet<u32>) -> GroundedAnswer {
    let body = strip_preamble(text);
    let mut statements = Vec::new();
    let mut warnings = Vec::new();
    for span in sentence_spans(body) {
        let (clean, citations, rejected) = extract_markers(span, valid_ids);
        if !has_content(&clean) {
            continue;
        }
        let idx = statements.len();
        warnings.extend(rejected.into_iter().map(|marker| ParseWarning::OutOfRangeCitation {
            statement: idx,
            marker,
        }));
        statements.push(Statement { text: clean, citations });
    }
    GroundedAnswer {
        style: AnswerStyle::LongForm,
        raw_text: text.to_string(),
        statements,
        warnings,
    }
}

/// Splits on commas outside parentheses, brackets and double quotes.
fn top_level_items(body: &str) -> Vec<&str> {
    let mut items = Vec::new();
    let mut depth = 0i32;
    let mut in_quotes = false;
    let mut start = 0;
    for (i, c) in body.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '(' | '[' if !in_quotes => depth += 1,
            ')' | ']' if !in_quotes => depth = (depth - 1).max(0),
            ',' if !in_quotes && depth == 0 => {
                items.push(&body[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    items.push(&body[start..]);
    items
}

pub fn parse_entity_list(text: &str, valid_ids: &BTreeSet<u32>) -> GroundedAnswer {
    let body = strip_preamble(text);
    let mut statements = Vec::new();
    let mut warnings = Vec::new();
    for item in top_level_items(body) {
        let (clean, citations, rejected) = extract_markers(item, valid_ids);
        let entity = clean.trim_end_matches(|c: char| c == '.' || c.is_whitespace()).to_string();
        if !has_content(&entity) {
            continue;
        }
        let idx = statements.len();
        warnings.extend(rejected.into_iter().map(|marker| ParseWarning::OutOfRangeCitation {
            statement: idx,
            marker,
        }));
        if citations.len() > 1 {
            warnings.push(ParseWarning::MultipleCitations {
                statement: idx,
                count: citations.len(),
            });
        }
        statements.push(Statement { text: entity, citations });
    }
    GroundedAnswer {
        style: AnswerStyle::EntityList,
        raw_text: text.to_string(),
        statements,
        warnings,
    }
}

fn markers(citations: &[u32]) -> String {
    citations.iter().map(|c| format!("[{c}]")).collect()
}

/// Renders an answer so that parsing the result reproduces every statement's
/// text and citations.
pub fn render(answer: &GroundedAnswer) -> String {
    match answer.style {
        AnswerStyle::LongForm => answer
            .statements
            .iter()
            .map(|s| {
                if s.citations.is_empty() {
                    return s.text.clone();
                }
                let body = s.text.trim_end_matches(TERMINATORS);
                let punct = &s.text[body.len()..];
                format!("{} {}{}", body, markers(&s.citations), punct)
            })
            .collect::<Vec<_>>()
            .join(" "),
        AnswerStyle::EntityList => answer
            .statements
            .iter()
            .map(|s| {
                if s.citations.is_empty() {
                    s.text.clone()
                } else {
                    format!("{} {}", s.text, markers(&s.citations))
                }
            })
            .collect::<Vec<_>>()
            .join(", "),
    }
}

/// The deduplicated union of cited passages, in first-citation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub pids: Vec<String>,
    /// Display index to pid, restricted to the cited indices.
    pub display_index_map: BTreeMap<u32, String>,
}

impl EvidenceSet {
    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    /// Cited display indices in ascending order.
    pub fn indices(&self) -> Vec<u32> {
        self.display_index_map.keys().copied().collect()
    }
}

pub fn evidence_set(answer: &GroundedAnswer, display_map: &BTreeMap<u32, String>) -> Result<EvidenceSet> {
    let mut evidence = EvidenceSet::default();
    let mut seen = HashSet::new();
    for idx in answer.cited_indices() {
        let pid = display_map.get(&idx).ok_or_else(|| {
            Error::Integrity(format!("citation [{idx}] does not resolve to a shown document"))
        })?;
        evidence.display_index_map.insert(idx, pid.clone());
        if seen.insert(pid.clone()) {
            evidence.pids.push(pid.clone());
        }
    }
    Ok(evidence)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(range: std::ops::RangeInclusive<u32>) -> BTreeSet<u32> {
        range.collect()
    }

    fn structure(a: &GroundedAnswer) -> Vec<(String, Vec<u32>)> {
        a.statements
            .iter()
            .map(|s| (s.text.clone(), s.citations.clone()))
            .collect()
    }

    #[test]
    fn long_form_case_study_verifier_response() {
        let text = "Pam Tillis recorded the song \"Don't Tell Me What to Do\" [5]. \
                    This song was also written by Harlan Howard and Max D. Barnes [1][4].";
        let a = parse_long_form(text, &ids(1..=5));
        assert_eq!(a.statements.len(), 2);
        assert_eq!(a.statements[0].citations, vec![5]);
        assert_eq!(a.statements[1].citations, vec![1, 4]);
        assert_eq!(
            a.statements[0].text,
            "Pam Tillis recorded the song \"Don't Tell Me What to Do\"."
        );
        assert!(!a.has_warnings());
    }

    #[test]
    fn long_form_mid_sentence_markers_belong_to_sentence() {
        let text = "Pam Tillis recorded the song [5], which reached the Top 40 in 1991 [5]. \
                    Marty Stuart recorded a version [1][4].";
        let a = parse_long_form(text, &ids(1..=5));
        assert_eq!(structure(&a)[0].1, vec![5]);
        assert_eq!(a.statements[0].text, "Pam Tillis recorded the song, which reached the Top 40 in 1991.");
    }

    #[test]
    fn long_form_markers_after_terminator_attach_backwards() {
        let a = parse_long_form("First fact. [2] Second fact [3].", &ids(1..=5));
        assert_eq!(
            structure(&a),
            vec![("First fact.".into(), vec![2]), ("Second fact.".into(), vec![3])]
        );
    }

    #[test]
    fn long_form_empty_input() {
        assert!(parse_long_form("", &ids(1..=5)).statements.is_empty());
        assert!(parse_long_form("  [1]. ", &ids(1..=5)).statements.is_empty());
    }

    #[test]
    fn long_form_out_of_range_dropped_with_warning() {
        let a = parse_long_form("Fact [7].", &ids(1..=5));
        assert_eq!(a.statements.len(), 1);
        assert!(a.statements[0].citations.is_empty());
        assert_eq!(a.statements[0].text, "Fact.");
        assert!(a.has_warnings());
        let a = parse_long_form("Fact [0][99999999999].", &ids(1..=5));
        assert_eq!(a.warnings.len(), 2);
    }

    #[test]
    fn long_form_keeps_more_than_three_citations() {
        let a = parse_long_form("Busy claim [1][2][3][4].", &ids(1..=5));
        assert_eq!(a.statements[0].citations, vec![1, 2, 3, 4]);
    }

    #[test]
    fn long_form_strips_corrected_answer_preamble() {
        let text = "The draft misses a singer.\nCorrected Answer: Pam Tillis sang it [1].";
        let a = parse_long_form(text, &ids(1..=5));
        assert_eq!(structure(&a), vec![("Pam Tillis sang it.".into(), vec![1])]);
    }

    #[test]
    fn entity_list_case_study_round_one() {
        let a = parse_entity_list("Assault on Precinct 13 [2], Halloween [2], The Thing [4].", &ids(1..=5));
        assert_eq!(
            structure(&a),
            vec![
                ("Assault on Precinct 13".into(), vec![2]),
                ("Halloween".into(), vec![2]),
                ("The Thing".into(), vec![4]),
            ]
        );
    }

    #[test]
    fn entity_list_case_study_round_two() {
        let a = parse_entity_list("Halloween [6], Dark Star [6]", &ids(1..=8));
        assert_eq!(
            structure(&a),
            vec![("Halloween".into(), vec![6]), ("Dark Star".into(), vec![6])]
        );
    }

    #[test]
    fn entity_list_empty_and_final_answer_header() {
        assert!(parse_entity_list("", &ids(1..=5)).statements.is_empty());
        let text = "The draft cites the wrong page. Final Answer: Dark Star [6], They Live [6]";
        let a = parse_entity_list(text, &ids(1..=8));
        assert_eq!(a.statements.len(), 2);
        assert_eq!(a.statements[0].text, "Dark Star");
    }

    #[test]
    fn entity_list_flags_extra_citations_and_nested_commas() {
        let a = parse_entity_list("Vampires (1998, film) [1][2], \"Dark, Star\" [3]", &ids(1..=5));
        assert_eq!(a.statements.len(), 2);
        assert_eq!(a.statements[0].text, "Vampires (1998, film)");
        assert_eq!(a.statements[0].citations, vec![1, 2]);
        assert_eq!(a.statements[1].text, "\"Dark, Star\"");
        assert!(matches!(a.warnings[0], ParseWarning::MultipleCitations { statement: 0, count: 2 }));
    }

    #[test]
    fn evidence_first_citation_order() {
        let a = parse_long_form("A [5]. B [5]. C [1][4].", &ids(1..=5));
        let map: BTreeMap<u32, String> = (1..=5).map(|i| (i, format!("p{i}"))).collect();
        let ev = evidence_set(&a, &map).unwrap();
        assert_eq!(ev.pids, vec!["p5", "p1", "p4"]);
        assert_eq!(ev.indices(), vec![1, 4, 5]);
    }

    #[test]
    fn evidence_of_case_study_round_one_entities() {
        let a = parse_entity_list("Assault on Precinct 13 [2], Halloween [2], The Thing [4].", &ids(1..=5));
        let map: BTreeMap<u32, String> = (1..=5).map(|i| (i, format!("p{i}"))).collect();
        // set-union oracle over the citation sets {2},{2},{4}
        let mut oracle: Vec<String> = Vec::new();
        for s in &a.statements {
            for c in &s.citations {
                let pid = format!("p{c}");
                if !oracle.contains(&pid) {
                    oracle.push(pid);
                }
            }
        }
        assert_eq!(evidence_set(&a, &map).unwrap().pids, oracle);
        assert_eq!(oracle, vec!["p2", "p4"]);
    }

    #[test]
    fn evidence_empty_and_missing_index() {
        let map: BTreeMap<u32, String> = [(1, "p1".to_string())].into();
        let a = parse_long_form("No citations here.", &ids(1..=5));
        assert!(evidence_set(&a, &map).unwrap().is_empty());
        let a = parse_long_form("Cites two [2].", &ids(1..=5));
        assert!(matches!(evidence_set(&a, &map), Err(Error::Integrity(_))));
    }

    #[test]
    fn render_empty() {
        assert_eq!(render(&GroundedAnswer::empty(AnswerStyle::LongForm)), "");
        assert_eq!(render(&GroundedAnswer::empty(AnswerStyle::EntityList)), "");
    }

    #[test]
    fn render_long_form_places_markers_before_punctuation() {
        let a = GroundedAnswer::from_statements(
            AnswerStyle::LongForm,
            vec![Statement::new("It charted.", [1, 4]), Statement::new("Really?!", [2])],
        );
        assert_eq!(a.raw_text, "It charted [1][4]. Really [2]?!");
        assert_eq!(structure(&parse_long_form(&a.raw_text, &ids(1..=5))), structure(&a));
    }

    #[test]
    fn entity_roundtrip() {
        let a = parse_entity_list("Assault on Precinct 13 [2], Halloween [2], The Thing [4].", &ids(1..=5));
        let rendered = render(&a);
        assert_eq!(rendered, "Assault on Precinct 13 [2], Halloween [2], The Thing [4]");
        assert_eq!(structure(&parse_entity_list(&rendered, &ids(1..=5))), structure(&a));
    }

    #[test]
    fn long_form_two_statement_roundtrip() {
        let a = parse_long_form(
            "The song charted in 1990 [1][4][5]. Marty Stuart also recorded it in 1988 [1].",
            &ids(1..=7),
        );
        let again = parse_long_form(&render(&a), &ids(1..=7));
        assert_eq!(structure(&again), structure(&a));
        assert_eq!(again.statements.len(), 2);
    }
}
