//! ROUGE-2 scoring, the accept/reject gate between the candidate answer and
//! the verifier output, and statement-level intersection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::answer::{render, GroundedAnswer};
use crate::text::{strip_citation_markers, words};

/// Lowercased word tokens with citation markers removed first.
pub fn tokenize(text: &str) -> Vec<String> {
    words(&strip_citation_markers(text))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rouge2Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Rouge2Score {
    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |total: usize| {
            if total == 0 {
                0.0
            } else {
                overlap as f64 / total as f64
            }
        };
        let precision = ratio(candidate_total);
        let recall = ratio(reference_total);
        Self {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }

    pub fn get(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::F1 => self.f1,
            ScoreKind::Precision => self.precision,
            ScoreKind::Recall => self.recall,
        }
    }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Which component of the score drives the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    F1,
    Precision,
    Recall,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_overlap(candidate: &[String], reference: &[String], n: usize) -> Rouge2Score {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    Rouge2Score::from_counts(
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// Clipped bigram-multiset overlap. A side with fewer than two tokens has no
/// bigrams and its component is zero.
pub fn rouge2(candidate: &str, reference: &str) -> Rouge2Score {
    rouge2_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn rouge2_tokens(candidate: &[String], reference: &[String]) -> Rouge2Score {
    ngram_overlap(candidate, reference, 2)
}

/// Statement matching score: bigram F1, falling back to unigram F1 when
/// either side has fewer than two tokens.
pub fn statement_similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokenize(a), tokenize(b));
    if ta.len() < 2 || tb.len() < 2 {
        ngram_overlap(&ta, &tb, 1).f1
    } else {
        ngram_overlap(&ta, &tb, 2).f1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyDecision {
    pub score: Rouge2Score,
    pub kind: ScoreKind,
    pub threshold: f64,
    pub accepted: bool,
    /// Candidate statements kept by intersection; empty when accepted.
    pub retained_statement_indices: Vec<usize>,
}

impl ConsistencyDecision {
    /// A rejection with a zero score, used when verification could not run.
    pub fn rejected(kind: ScoreKind, threshold: f64) -> Self {
        Self {
            score: Rouge2Score::default(),
            kind,
            threshold,
            accepted: false,
            retained_statement_indices: Vec::new(),
        }
    }
}

/// Whole-answer gate: accepted iff the chosen score of
/// `rouge2(render(verifier), render(candidate))` reaches `threshold`.
pub fn is_consistent(
    verifier_answer: &GroundedAnswer,
    candidate: &GroundedAnswer,
    threshold: f64,
    kind: ScoreKind,
) -> ConsistencyDecision {
    let score = rouge2(&render(verifier_answer), &render(candidate));
    ConsistencyDecision {
        score,
        kind,
        threshold,
        accepted: score.get(kind) >= threshold,
        retained_statement_indices: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    /// Retained candidate statements, original order and citations.
    pub answer: GroundedAnswer,
    pub statement_indices: Vec<usize>,
    /// Display indices cited by the retained statements, first-citation order.
    pub evidence_indices: Vec<u32>,
}

/// Keeps each candidate statement whose best match among the verifier
/// statements reaches `threshold`. An empty verifier answer keeps nothing.
pub fn intersect(candidate: &GroundedAnswer, verifier: &GroundedAnswer, threshold: f64) -> Intersection {
    let statement_indices: Vec<usize> = candidate
        .statements
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            verifier
                .statements
                .iter()
                .map(|v| statement_similarity(&s.text, &v.text))
                .fold(None, |best: Option<f64>, x| Some(best.map_or(x, |b| b.max(x))))
                .is_some_and(|best| best >= threshold)
        })
        .map(|(i, _)| i)
        .collect();
    let statements = statement_indices
        .iter()
        .map(|&i| candidate.statements[i].clone())
        .collect();
    let answer = GroundedAnswer::from_statements(candidate.style, statements);
    let evidence_indices = answer.cited_indices();
    Intersection {
        answer,
        statement_indices,
        evidence_indices,
    }
}
