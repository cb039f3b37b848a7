//! How much a model's accuracy responds to the relevance of its input
//! documents.
//!
//! Document sets of five passages are assembled per query so that the mean
//! answer recall of the sets hits chosen targets. A model answers from each
//! set; its accuracy at the low, medium and high anchors gives the relative
//! improvements between anchors and the ratio of the second gain to the
//! first.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::parse;
use crate::error::{Error, Result};
use crate::evaluation::{em_recall, GoldRecord};
use crate::lm::{complete, render_generation_prompt, LmBackend, LmRequest, PromptTemplate, ShownDocument};
use crate::pipeline::QueryRecord;
use crate::retrieval::{Corpus, Passage};
use crate::text::normalize_answer;

pub const DOCS_PER_SET: usize = 5;
pub const TOLERANCE: f64 = 0.05;

/// `(to - from) / from`; undefined when `from` is not positive.
pub fn relative_improvement(p_from: f64, p_to: f64) -> Option<f64> {
    (p_from > 0.0).then(|| (p_to - p_from) / p_from)
}

/// `(high - med) / (med - low)`; undefined unless `med > low`.
pub fn second_order_gain(p_low: f64, p_med: f64, p_high: f64) -> Option<f64> {
    (p_med > p_low).then(|| (p_high - p_med) / (p_med - p_low))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLabel {
    Low,
    Med,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDocSet {
    pub qid: String,
    pub pids: Vec<String>,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPoint {
    /// Set when exactly three targets were requested.
    pub label: Option<AnchorLabel>,
    pub target_recall: f64,
    pub doc_sets: Vec<QueryDocSet>,
    pub measured_recall: f64,
}

/// Fraction of the gold answers found in at least one passage.
pub fn doc_set_recall(passages: &[&Passage], gold: &[Vec<String>]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let texts: Vec<String> = passages
        .iter()
        .map(|p| normalize_answer(&format!("{} {}", p.title, p.text)))
        .collect();
    let covered = gold
        .iter()
        .filter(|forms| {
            forms.iter().any(|f| {
                let f = normalize_answer(f);
                !f.is_empty() && texts.iter().any(|t| t.contains(&f))
            })
        })
        .count();
    covered as f64 / gold.len() as f64
}

/// Per-query ordering of answer-bearing passages (those adding coverage
/// first) and distractors, fixed once per seed so that anchors nest.
struct Ladder<'a> {
    qid: &'a str,
    bearing: Vec<&'a Passage>,
    distractors: Vec<&'a Passage>,
    /// recall[m] = recall of the first m bearing passages.
    recall: Vec<f64>,
}

fn ladder<'a>(corpus: &'a Corpus, gold: &'a GoldRecord, rng: &mut ChaCha8Rng) -> Result<Ladder<'a>> {
    let mut bearing = Vec::new();
    let mut distractors = Vec::new();
    for p in corpus.passages() {
        if doc_set_recall(&[p], &gold.short_answer_sets) > 0.0 {
            bearing.push(p);
        } else {
            distractors.push(p);
        }
    }
    bearing.shuffle(rng);
    distractors.shuffle(rng);
    if bearing.len() + distractors.len() < DOCS_PER_SET {
        return Err(Error::Evaluation(format!(
            "corpus has fewer than {DOCS_PER_SET} passages for query `{}`",
            gold.qid
        )));
    }

    // Greedy coverage order: each step takes the passage adding the most
    // uncovered answers.
    let mut ordered: Vec<&Passage> = Vec::new();
    let mut remaining = bearing;
    while !remaining.is_empty() {
        let current = {
            let chosen: Vec<&Passage> = ordered.clone();
            doc_set_recall(&chosen, &gold.short_answer_sets)
        };
        let (best, gain) = remaining
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut with: Vec<&Passage> = ordered.clone();
                with.push(p);
                (i, doc_set_recall(&with, &gold.short_answer_sets) - current)
            })
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        if gain <= 0.0 {
            break;
        }
        ordered.push(remaining.remove(best));
    }
    ordered.extend(remaining);

    let max_bearing = ordered.len().min(DOCS_PER_SET);
    let recall = (0..=max_bearing)
        .map(|m| doc_set_recall(&ordered[..m], &gold.short_answer_sets))
        .collect();
    Ok(Ladder {
        qid: &gold.qid,
        bearing: ordered,
        distractors,
        recall,
    })
}

impl Ladder<'_> {
    /// Lowest usable level: bearing passages are forced in when there are
    /// too few distractors to fill a set.
    fn min_level(&self) -> usize {
        DOCS_PER_SET.saturating_sub(self.distractors.len())
    }

    fn max_level(&self) -> usize {
        self.recall.len() - 1
    }

    fn doc_set(&self, level: usize, rng: &mut ChaCha8Rng) -> QueryDocSet {
        let mut set: Vec<&Passage> = self.bearing[..level].to_vec();
        if self.recall[level] >= 1.0 {
            // Saturated: further answer-bearing passages cannot change recall.
            set.extend(self.bearing[level..].iter().take(DOCS_PER_SET - set.len()));
        }
        let fill = DOCS_PER_SET - set.len();
        set.extend(self.distractors.iter().take(fill));
        set.shuffle(rng);
        QueryDocSet {
            qid: self.qid.to_string(),
            pids: set.iter().map(|p| p.pid.clone()).collect(),
            recall: self.recall[level],
        }
    }
}

/// Picks one ladder level per query so the mean recall approaches `target`,
/// raising one query at a time while that moves the mean closer.
fn choose_levels(ladders: &[Ladder<'_>], target: f64) -> Vec<usize> {
    let n = ladders.len() as f64;
    let mut levels: Vec<usize> = ladders.iter().map(Ladder::min_level).collect();
    let mut mean: f64 = ladders.iter().zip(&levels).map(|(l, &m)| l.recall[m]).sum::<f64>() / n;
    loop {
        let best = ladders
            .iter()
            .enumerate()
            .filter(|(q, l)| levels[*q] < l.max_level())
            .map(|(q, l)| {
                let step = (l.recall[levels[q] + 1] - l.recall[levels[q]]) / n;
                (q, mean + step)
            })
            .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()).then(a.0.cmp(&b.0)));
        match best {
            Some((q, next)) if (next - target).abs() < (mean - target).abs() => {
                levels[q] += 1;
                mean = next;
            }
            _ => return levels,
        }
    }
}

/// Builds one anchor per target. Gold records need short answers; a passage
/// bears an answer when it contains one after normalization.
pub fn build_anchor_sets(corpus: &Corpus, gold: &[GoldRecord], targets: &[f64], seed: u64) -> Result<Vec<AnchorPoint>> {
    if gold.is_empty() {
        return Err(Error::Evaluation("no queries to build anchor sets for".into()));
    }
    if let Some(g) = gold.iter().find(|g| g.short_answer_sets.is_empty()) {
        return Err(Error::Evaluation(format!("query `{}` has no short answers", g.qid)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ladders = gold
        .iter()
        .map(|g| ladder(corpus, g, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let n = ladders.len() as f64;
    let min = ladders.iter().map(|l| l.recall[l.min_level()]).sum::<f64>() / n;
    let max = ladders.iter().map(|l| l.recall[l.max_level()]).sum::<f64>() / n;

    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]));
    let mut anchors = Vec::with_capacity(targets.len());
    for (i, &target) in targets.iter().enumerate() {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Config(format!("anchor target {target} is outside [0, 1]")));
        }
        let levels = choose_levels(&ladders, target);
        let mut set_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + i as u64));
        let doc_sets: Vec<QueryDocSet> = ladders
            .iter()
            .zip(&levels)
            .map(|(l, &m)| l.doc_set(m, &mut set_rng))
            .collect();
        let measured = doc_sets.iter().map(|d| d.recall).sum::<f64>() / n;
        if (measured - target).abs() > TOLERANCE {
            return Err(Error::InfeasibleAnchor { target, min, max });
        }
        let label = (targets.len() == 3).then(|| {
            match order.iter().position(|&o| o == i) {
                Some(0) => AnchorLabel::Low,
                Some(1) => AnchorLabel::Med,
                _ => AnchorLabel::High,
            }
        });
        anchors.push(AnchorPoint {
            label,
            target_recall: target,
            doc_sets,
            measured_recall: measured,
        });
    }
    Ok(anchors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorAccuracy {
    pub label: Option<AnchorLabel>,
    pub target_recall: f64,
    pub measured_recall: f64,
    /// Mean exact-match recall over the queries that completed.
    pub accuracy: Option<f64>,
    pub failed_queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSensitivity {
    pub model: String,
    pub anchors: Vec<AnchorAccuracy>,
    pub p_low: Option<f64>,
    pub p_med: Option<f64>,
    pub p_high: Option<f64>,
    pub rel_improvement_low_to_med: Option<f64>,
    pub rel_improvement_med_to_high: Option<f64>,
    /// Absent when undefined (`p_med <= p_low`) or inputs are missing.
    pub second_order_ratio: Option<f64>,
    /// Some backend calls failed; affected queries are left out.
    pub partial: bool,
}

impl ModelSensitivity {
    fn at(&self, label: AnchorLabel) -> Option<f64> {
        self.anchors
            .iter()
            .find(|a| a.label == Some(label))
            .and_then(|a| a.accuracy)
    }
}

pub struct SensitivityInputs<'a> {
    pub corpus: &'a Corpus,
    pub queries: &'a [QueryRecord],
    pub gold: &'a [GoldRecord],
    pub template: &'a PromptTemplate,
    pub max_tokens: u32,
    pub jobs: usize,
}

fn answer_accuracy(
    backend: &dyn LmBackend,
    inputs: &SensitivityInputs<'_>,
    set: &QueryDocSet,
    question: &str,
    gold: &GoldRecord,
) -> Result<f64> {
    let passages = set
        .pids
        .iter()
        .map(|pid| inputs.corpus.resolve(pid))
        .collect::<Result<Vec<_>>>()?;
    let docs: Vec<ShownDocument<'_>> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| ShownDocument {
            index: i as u32 + 1,
            passage: p,
        })
        .collect();
    let prompt = render_generation_prompt(inputs.template, question, &docs)?;
    let response = complete(backend, &LmRequest::new(prompt, inputs.max_tokens))?;
    let valid = (1..=docs.len() as u32).collect();
    let answer = parse(inputs.template.task_style.answer_style(), &response.text, &valid);
    Ok(em_recall(&answer.plain_text(), &gold.short_answer_sets))
}

/// Accuracy of one model at every anchor, with the derived ratios.
pub fn run_sensitivity(
    backend: &dyn LmBackend,
    anchors: &[AnchorPoint],
    inputs: &SensitivityInputs<'_>,
) -> Result<ModelSensitivity> {
    let questions: BTreeMap<&str, &str> = inputs.queries.iter().map(|q| (q.qid.as_str(), q.question.as_str())).collect();
    let gold: BTreeMap<&str, &GoldRecord> = inputs.gold.iter().map(|g| (g.qid.as_str(), g)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(inputs.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let mut results = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut jobs = Vec::with_capacity(anchor.doc_sets.len());
        for set in &anchor.doc_sets {
            let question = questions
                .get(set.qid.as_str())
                .ok_or_else(|| Error::Evaluation(format!("no question for query `{}`", set.qid)))?;
            let g = gold
                .get(set.qid.as_str())
                .ok_or_else(|| Error::Evaluation(format!("no gold record for query `{}`", set.qid)))?;
            jobs.push((set, *question, *g));
        }
        let outcomes: Vec<(String, Result<f64>)> = pool.install(|| {
            jobs.par_iter()
                .map(|(set, q, g)| (set.qid.clone(), answer_accuracy(backend, inputs, set, q, g)))
                .collect()
        });
        let mut scores = Vec::new();
        let mut failed = Vec::new();
        for (qid, outcome) in outcomes {
            match outcome {
                Ok(s) => scores.push(s),
                Err(e) => {
                    tracing::warn!(model = backend.id(), %qid, "sensitivity query failed: {e}");
                    failed.push(qid);
                }
            }
        }
        results.push(AnchorAccuracy {
            label: anchor.label,
            target_recall: anchor.target_recall,
            measured_recall: anchor.measured_recall,
            accuracy: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            failed_queries: failed,
        });
    }

    let mut model = ModelSensitivity {
        model: backend.id().to_string(),
        partial: results.iter().any(|a| !a.failed_queries.is_empty()),
        anchors: results,
        p_low: None,
        p_med: None,
        p_high: None,
        rel_improvement_low_to_med: None,
        rel_improvement_med_to_high: None,
        second_order_ratio: None,
    };
    model.p_low = model.at(AnchorLabel::Low);
    model.p_med = model.at(AnchorLabel::Med);
    model.p_high = model.at(AnchorLabel::High);
    if let (Some(l), Some(m)) = (model.p_low, model.p_med) {
        model.rel_improvement_low_to_med = relative_improvement(l, m);
    }
    if let (Some(m), Some(h)) = (model.p_med, model.p_high) {
        model.rel_improvement_med_to_high = relative_improvement(m, h);
    }
    if let (Some(l), Some(m), Some(h)) = (model.p_low, model.p_med, model.p_high) {
        model.second_order_ratio = second_order_gain(l, m, h);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub model: String,
    /// Each anchor's accuracy divided by the reference model's accuracy at
    /// the same anchor.
    pub relative_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub seed: u64,
    pub anchors: Vec<AnchorPoint>,
    pub models: Vec<ModelSensitivity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_model: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub normalized: Vec<NormalizedRow>,
}

impl SensitivityReport {
    pub fn new(seed: u64, anchors: Vec<AnchorPoint>, models: Vec<ModelSensitivity>, reference: Option<&str>) -> Result<Self> {
        let mut normalized = Vec::new();
        if let Some(reference) = reference {
            let base = models
                .iter()
                .find(|m| m.model == reference)
                .ok_or_else(|| Error::Config(format!("reference model `{reference}` was not run")))?;
            for m in &models {
                let relative_accuracy = m
                    .anchors
                    .iter()
                    .zip(&base.anchors)
                    .map(|(a, b)| match (a.accuracy, b.accuracy) {
                        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                        _ => None,
                    })
                    .collect();
                normalized.push(NormalizedRow {
                    model: m.model.clone(),
                    relative_accuracy,
                });
            }
        }
        Ok(Self {
            seed,
            anchors,
            models,
            reference_model: reference.map(str::to_string),
            normalized,
        })
    }

    /// Tab-separated rows: model, anchor, recall, accuracy, improvement into
    /// this anchor, and the model's second-order ratio.
    pub fn plot_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let mut out = String::from("model\tanchor\ttarget_recall\tmeasured_recall\taccuracy\trel_improvement\tsecond_order_ratio\n");
        for m in &self.models {
            for a in &m.anchors {
                let improvement = match a.label {
                    Some(AnchorLabel::Med) => m.rel_improvement_low_to_med,
                    Some(AnchorLabel::High) => m.rel_improvement_med_to_high,
                    _ => None,
                };
                let label = match a.label {
                    Some(AnchorLabel::Low) => "low".to_string(),
                    Some(AnchorLabel::Med) => "med".to_string(),
                    Some(AnchorLabel::High) => "high".to_string(),
                    None => format!("{:.2}", a.target_recall),
                };
                out.push_str(&format!(
                    "{}\t{}\t{:.2}\t{:.4}\t{}\t{}\t{}\n",
                    m.model,
                    label,
                    a.target_recall,
                    a.measured_recall,
                    fmt(a.accuracy),
                    fmt(improvement),
                    fmt(m.second_order_ratio)
                ));
            }
        }
        out
    }
}

/// Gold records restricted to the given query ids, in query order.
pub fn gold_for<'a>(queries: &[QueryRecord], gold: &'a [GoldRecord]) -> Result<Vec<&'a GoldRecord>> {
    let wanted: HashSet<&str> = queries.iter().map(|q| q.qid.as_str()).collect();
    let found: Vec<&GoldRecord> = gold.iter().filter(|g| wanted.contains(g.qid.as_str())).collect();
    if found.len() != wanted.len() {
        return Err(Error::Evaluation("some queries lack gold records".into()));
    }
    Ok(found)
}
