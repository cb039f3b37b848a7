//! Correctness and citation-quality metrics.
//!
//! Correctness depends on the task style: exact-match recall of required
//! short answers (ASQA), entity precision and recall-5 (QAMPARI), or
//! sub-claim recall under an entailment judge (ELI5). Citation recall and
//! precision are judged against the concatenated text of cited passages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::answer::GroundedAnswer;
use crate::error::{Error, Result};
use crate::io;
use crate::lm::TaskStyle;
use crate::pipeline::RunResult;
use crate::retrieval::Corpus;
use crate::text::normalize_answer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub qid: String,
    pub style: TaskStyle,
    /// ASQA: each inner list holds the acceptable forms of one answer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub short_answer_sets: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subclaims: Vec<String>,
}

impl GoldRecord {
    /// Exactly the fields belonging to the record's style must be populated.
    pub fn validate(&self) -> Result<()> {
        let populated = [
            (!self.short_answer_sets.is_empty(), TaskStyle::Asqa),
            (!self.gold_entities.is_empty(), TaskStyle::Qampari),
            (!self.subclaims.is_empty(), TaskStyle::Eli5),
        ];
        for (present, owner) in populated {
            if present != (owner == self.style) {
                return Err(Error::Evaluation(format!(
                    "gold record `{}` ({}) must populate only the {} fields",
                    self.qid,
                    self.style.as_str(),
                    self.style.as_str()
                )));
            }
        }
        Ok(())
    }
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldRecord>> {
    let records: Vec<GoldRecord> = io::read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub trait EntailmentJudge: Send + Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<bool>;
}

/// Entailed iff the normalized hypothesis occurs inside the normalized
/// premise. An empty premise entails nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubstringJudge;

impl EntailmentJudge for SubstringJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        let premise = normalize_answer(premise);
        if premise.is_empty() {
            return Ok(false);
        }
        Ok(premise.contains(&normalize_answer(hypothesis)))
    }
}

/// Remote classifier: POST `{premise, hypothesis}`, expecting either
/// `{"entailed": bool}` or `{"label": "entailment" | ...}`.
#[derive(Debug)]
pub struct HttpJudge {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Evaluation(format!("cannot build judge client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl EntailmentJudge for HttpJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(&json!({ "premise": premise, "hypothesis": hypothesis }))
            .send()
            .map_err(|e| Error::Evaluation(format!("judge request failed: {e}")))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| Error::Evaluation(format!("judge response unreadable: {e}")))?;
        if !status.is_success() {
            let excerpt: String = body.chars().take(200).collect();
            return Err(Error::Evaluation(format!("judge returned status {}: {excerpt}", status.as_u16())));
        }
        let value: Value = serde_json::from_str(&body)?;
        if let Some(b) = value["entailed"].as_bool() {
            return Ok(b);
        }
        match value["label"].as_str() {
            Some(label) => Ok(label.eq_ignore_ascii_case("entailment") || label.eq_ignore_ascii_case("entailed")),
            None => Err(Error::Evaluation(format!("judge response lacks a verdict: {body}"))),
        }
    }
}

/// Fraction of required short answers with at least one form appearing in
/// the normalized answer.
pub fn em_recall(answer_text: &str, gold: &[Vec<String>]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let answer = normalize_answer(answer_text);
    let hits = gold
        .iter()
        .filter(|forms| {
            forms.iter().any(|form| {
                let form = normalize_answer(form);
                !form.is_empty() && answer.contains(&form)
            })
        })
        .count();
    hits as f64 / gold.len() as f64
}

/// Exact match after normalization; repeated predictions count once.
/// Returns (precision, recall-5).
pub fn entity_precision_recall5(pred: &[String], gold: &[String]) -> (f64, f64) {
    let gold: HashSet<String> = gold.iter().map(|g| normalize_answer(g)).filter(|g| !g.is_empty()).collect();
    let mut seen = HashSet::new();
    let pred: Vec<String> = pred
        .iter()
        .map(|p| normalize_answer(p))
        .filter(|p| !p.is_empty() && seen.insert(p.clone()))
        .collect();
    if pred.is_empty() {
        return (0.0, 0.0);
    }
    let hits = pred.iter().filter(|p| gold.contains(*p)).count() as f64;
    let precision = hits / pred.len() as f64;
    let recall5 = if gold.is_empty() {
        0.0
    } else {
        (hits / gold.len().min(5) as f64).min(1.0)
    };
    (precision, recall5)
}

pub fn claim_recall(answer_text: &str, subclaims: &[String], judge: &dyn EntailmentJudge) -> Result<f64> {
    if subclaims.is_empty() {
        return Err(Error::Evaluation("no sub-claims to check".into()));
    }
    let mut hits = 0;
    for claim in subclaims {
        if judge.judge(answer_text, claim)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / subclaims.len() as f64)
}

/// Passage text by display index, in the form the judge reads.
#[derive(Debug, Clone, Default)]
pub struct CitedPassages {
    by_index: BTreeMap<u32, String>,
}

fn premise_text(title: &str, text: &str) -> String {
    format!("Title: {title}\n{text}")
}

impl CitedPassages {
    pub fn from_corpus(corpus: &Corpus, display_map: &BTreeMap<u32, String>) -> Result<Self> {
        let mut by_index = BTreeMap::new();
        for (&index, pid) in display_map {
            let p = corpus.resolve(pid)?;
            by_index.insert(index, premise_text(&p.title, &p.text));
        }
        Ok(Self { by_index })
    }

    pub fn from_run(result: &RunResult) -> Self {
        Self {
            by_index: result
                .documents
                .iter()
                .map(|d| (d.index, premise_text(&d.title, &d.text)))
                .collect(),
        }
    }

    /// Concatenated passages for the given indices; empty for no indices.
    pub fn premise(&self, indices: &[u32]) -> Result<String> {
        let parts = indices
            .iter()
            .map(|i| {
                self.by_index
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Integrity(format!("citation [{i}] does not resolve to a passage")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join("\n"))
    }
}

fn judge_premise(judge: &dyn EntailmentJudge, premise: &str, hypothesis: &str) -> Result<bool> {
    if premise.is_empty() {
        return Ok(false);
    }
    judge.judge(premise, hypothesis)
}

/// Mean over statements of whether the cited passages, together, entail
/// the statement. Uncited statements score 0; so does an empty answer.
pub fn citation_recall(answer: &GroundedAnswer, passages: &CitedPassages, judge: &dyn EntailmentJudge) -> Result<f64> {
    if answer.statements.is_empty() {
        return Ok(0.0);
    }
    let mut supported = 0;
    for s in &answer.statements {
        if !s.citations.is_empty() && judge_premise(judge, &passages.premise(&s.citations)?, &s.text)? {
            supported += 1;
        }
    }
    Ok(supported as f64 / answer.statements.len() as f64)
}

/// Fraction of citations that are not irrelevant. A citation is irrelevant
/// when it does not entail the statement alone and dropping it leaves the
/// verdict of the full citation set unchanged. Answers without citations
/// score 0.
pub fn citation_precision(
    answer: &GroundedAnswer,
    passages: &CitedPassages,
    judge: &dyn EntailmentJudge,
) -> Result<f64> {
    let mut total = 0usize;
    let mut relevant = 0usize;
    for s in &answer.statements {
        let mut full: Option<bool> = None;
        for &c in &s.citations {
            total += 1;
            if judge_premise(judge, &passages.premise(&[c])?, &s.text)? {
                relevant += 1;
                continue;
            }
            let full_verdict = match full {
                Some(v) => v,
                None => {
                    let v = judge_premise(judge, &passages.premise(&s.citations)?, &s.text)?;
                    full = Some(v);
                    v
                }
            };
            let rest: Vec<u32> = s.citations.iter().copied().filter(|&x| x != c).collect();
            let rest_verdict = judge_premise(judge, &passages.premise(&rest)?, &s.text)?;
            if rest_verdict != full_verdict {
                relevant += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { relevant as f64 / total as f64 })
}

/// One query's scores; columns outside the style stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_recall5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation_precision: Option<f64>,
}

const COLUMNS: [&str; 6] = [
    "em_recall",
    "entity_precision",
    "entity_recall5",
    "claim_recall",
    "citation_recall",
    "citation_precision",
];

impl MetricRow {
    fn values(&self) -> [Option<f64>; 6] {
        [
            self.em_recall,
            self.entity_precision,
            self.entity_recall5,
            self.claim_recall,
            self.citation_recall,
            self.citation_precision,
        ]
    }

    fn from_values(v: [Option<f64>; 6]) -> Self {
        Self {
            em_recall: v[0],
            entity_precision: v[1],
            entity_recall5: v[2],
            claim_recall: v[3],
            citation_recall: v[4],
            citation_precision: v[5],
        }
    }

    /// Mean of the populated columns.
    pub fn average(&self) -> Option<f64> {
        let present: Vec<f64> = self.values().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub qid: String,
    #[serde(flatten)]
    pub metrics: MetricRow,
    /// The run itself failed; its answer was scored as empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub run_failed: bool,
    /// Scoring failed; the row is left out of the means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub style: TaskStyle,
    pub queries: Vec<QueryMetrics>,
    pub mean: MetricRow,
    /// Mean of the style's reported columns. Fluency is not computed, so
    /// this is a partial average.
    pub partial_average: Option<f64>,
    /// Always absent: fluency scoring is not implemented.
    pub fluency: Option<f64>,
    /// No scored rows contributed to the means.
    pub empty: bool,
    pub failed_runs: usize,
    pub scoring_errors: usize,
}

pub fn aggregate(rows: Vec<QueryMetrics>, style: TaskStyle) -> MetricsReport {
    let scored: Vec<&QueryMetrics> = rows.iter().filter(|r| r.error.is_none()).collect();
    let mut means = [None; 6];
    for (col, mean) in means.iter_mut().enumerate() {
        let values: Vec<f64> = scored.iter().filter_map(|r| r.metrics.values()[col]).collect();
        if !values.is_empty() {
            *mean = Some(values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    let mean = MetricRow::from_values(means);
    MetricsReport {
        style,
        partial_average: mean.average(),
        fluency: None,
        empty: scored.is_empty(),
        failed_runs: rows.iter().filter(|r| r.run_failed).count(),
        scoring_errors: rows.len() - scored.len(),
        mean,
        queries: rows,
    }
}

/// Scores one answer against its gold record.
pub fn score_answer(
    answer: &GroundedAnswer,
    gold: &GoldRecord,
    passages: &CitedPassages,
    judge: &dyn EntailmentJudge,
) -> Result<MetricRow> {
    let mut row = MetricRow::default();
    match gold.style {
        TaskStyle::Asqa => row.em_recall = Some(em_recall(&answer.plain_text(), &gold.short_answer_sets)),
        TaskStyle::Qampari => {
            let pred: Vec<String> = answer.statements.iter().map(|s| s.text.clone()).collect();
            let (p, r) = entity_precision_recall5(&pred, &gold.gold_entities);
            row.entity_precision = Some(p);
            row.entity_recall5 = Some(r);
        }
        TaskStyle::Eli5 => row.claim_recall = Some(claim_recall(&answer.plain_text(), &gold.subclaims, judge)?),
    }
    row.citation_recall = Some(citation_recall(answer, passages, judge)?);
    row.citation_precision = Some(citation_precision(answer, passages, judge)?);
    Ok(row)
}

/// Scores every run of a trace. Every run needs a gold record of `style`.
pub fn evaluate_run(
    results: &[RunResult],
    gold: &[GoldRecord],
    style: TaskStyle,
    judge: &dyn EntailmentJudge,
) -> Result<MetricsReport> {
    let by_qid: HashMap<&str, &GoldRecord> = gold.iter().map(|g| (g.qid.as_str(), g)).collect();
    let mut rows = Vec::with_capacity(results.len());
    for result in results {
        let g = by_qid
            .get(result.query_id.as_str())
            .ok_or_else(|| Error::Evaluation(format!("no gold record for query `{}`", result.query_id)))?;
        if g.style != style {
            return Err(Error::Evaluation(format!(
                "gold record `{}` is {} but {} was requested",
                g.qid,
                g.style.as_str(),
                style.as_str()
            )));
        }
        let empty = GroundedAnswer::empty(style.answer_style());
        let answer = result.final_answer.as_ref().unwrap_or(&empty);
        let passages = CitedPassages::from_run(result);
        let (metrics, error) = match score_answer(answer, g, &passages, judge) {
            Ok(m) => (m, None),
            Err(e) => {
                tracing::warn!(qid = %result.query_id, "scoring failed: {e}");
                (MetricRow::default(), Some(e.to_string()))
            }
        };
        rows.push(QueryMetrics {
            qid: result.query_id.clone(),
            metrics,
            run_failed: result.is_failed(),
            error,
        });
    }
    Ok(aggregate(rows, style))
}

impl MetricsReport {
    /// Plain-text table of the means, in percent.
    pub fn to_table(&self, label: &str) -> String {
        let values = self.mean.values();
        let present: Vec<(&str, f64)> = COLUMNS
            .iter()
            .zip(values)
            .filter_map(|(name, v)| v.map(|v| (*name, v)))
            .collect();
        let mut header = format!("{:<12}", "run");
        let mut line = format!("{label:<12}");
        for (name, v) in &present {
            let width = name.len().max(7) + 2;
            let _ = write!(header, "{name:>width$}");
            let _ = write!(line, "{:>width$.2}", v * 100.0);
        }
        let _ = write!(header, "{:>17}{:>9}", "partial_average", "fluency");
        match self.partial_average {
            Some(a) => {
                let _ = write!(line, "{:>17.2}", a * 100.0);
            }
            None => {
                let _ = write!(line, "{:>17}", "-");
            }
        }
        let _ = write!(line, "{:>9}", "absent");
        format!("{header}\n{line}\n")
    }
}
