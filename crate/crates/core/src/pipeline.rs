//! The contrast-and-correct loop and the single-pass baseline.
//!
//! Per query: retrieve a ranked pool once; each round shows the main model
//! the documents retained from the previous round plus fresh ones from the
//! pool, up to the reading budget; the verifier re-answers from only the
//! documents the candidate cites; the two answers are compared and, on
//! disagreement, the agreed statements and their sources seed the next
//! round's correction prompt.
//!
//! Display indices are global to a run: a passage keeps the index it was
//! first shown under, and new passages always receive larger ones.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::answer::{evidence_set, parse, EvidenceSet, GroundedAnswer};
use crate::consistency::{intersect, is_consistent, ConsistencyDecision, ScoreKind};
use crate::error::{Error, Result};
use crate::io;
use crate::lm::{
    complete, render_correction_prompt, render_generation_prompt, LmBackend, LmRequest, ShownDocument, TaskStyle,
    TemplateSet,
};
use crate::retrieval::{Corpus, Passage, RankedPool, Retriever};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Reading budget: documents shown to the main model per round.
    pub k: usize,
    /// Consistency threshold for accepting a candidate.
    pub theta: f64,
    pub max_iterations: usize,
    pub task_style: TaskStyle,
    pub pool_size: usize,
    /// Statement matching threshold for intersection; defaults to `theta`.
    pub theta_match: Option<f64>,
    pub score_kind: ScoreKind,
    /// Emit the last round's candidate without verifying it.
    pub skip_final_verification: bool,
    pub main_backend: String,
    pub verifier_backend: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn new(task_style: TaskStyle) -> Self {
        Self {
            k: 5,
            theta: task_style.default_threshold(),
            max_iterations: 4,
            task_style,
            pool_size: 100,
            theta_match: None,
            score_kind: ScoreKind::F1,
            skip_final_verification: true,
            main_backend: "main".into(),
            verifier_backend: "verifier".into(),
            max_tokens: 300,
            temperature: 0.0,
            seed: None,
        }
    }

    pub fn theta_match(&self) -> f64 {
        self.theta_match.unwrap_or(self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, message: &str| if ok { Ok(()) } else { Err(Error::Config(message.into())) };
        check(self.max_iterations >= 1, "max_iterations must be at least 1")?;
        check(self.k >= 1, "k must be at least 1")?;
        check(self.k <= self.pool_size, "k must not exceed pool_size")?;
        check((0.0..=1.0).contains(&self.theta), "theta must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.theta_match()), "theta_match must lie in [0, 1]")?;
        check(self.max_tokens >= 1, "max_tokens must be at least 1")?;
        check(self.temperature >= 0.0, "temperature must be non-negative")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Calm,
    #[serde(rename = "iclcite")]
    IclCite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationOutcome {
    /// The verifier answered and the answers were compared.
    Verified,
    /// The candidate cited nothing, so there was nothing to verify.
    NoCitations,
    /// Final round with final-round verification switched off.
    SkippedFinalRound,
    /// Baseline runs do not verify.
    NotRequested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Accepted,
    MaxIterations,
    /// No unseen passages were left to show.
    PoolExhausted,
    SinglePass,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownDoc {
    pub index: u32,
    pub pid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub round: usize,
    pub shown_docs: Vec<ShownDoc>,
    /// Retained documents carried into this round's correction prompt.
    pub verified_count: usize,
    pub main_prompt: String,
    pub main_raw: String,
    pub candidate: GroundedAnswer,
    pub evidence: EvidenceSet,
    pub verification: VerificationOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_answer: Option<GroundedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<ConsistencyDecision>,
    /// Statements kept by intersection; absent when the round accepted or
    /// was not verified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained: Option<GroundedAnswer>,
    /// Display indices cited by `retained`, ascending.
    #[serde(default)]
    pub retained_evidence: Vec<u32>,
}

impl IterationTrace {
    pub fn shown_indices(&self) -> Vec<u32> {
        self.shown_docs.iter().map(|d| d.index).collect()
    }
}

/// A passage shown at some point during a run, under its display index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub index: u32,
    pub pid: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub query_id: String,
    pub question: String,
    pub method: Method,
    pub task_style: TaskStyle,
    pub final_answer: Option<GroundedAnswer>,
    /// Whether the final answer passed verification; true by convention
    /// for the baseline.
    pub accepted: bool,
    pub stop_reason: StopReason,
    pub rounds_used: usize,
    pub main_calls: usize,
    pub verifier_calls: usize,
    pub traces: Vec<IterationTrace>,
    pub documents: Vec<TraceDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunResult {
    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }

    /// Display index to pid over every document shown during the run.
    pub fn display_map(&self) -> BTreeMap<u32, String> {
        self.documents.iter().map(|d| (d.index, d.pid.clone())).collect()
    }

    pub fn document(&self, index: u32) -> Option<&TraceDocument> {
        self.documents.iter().find(|d| d.index == index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Value>,
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    io::read_jsonl(path)
}

/// Everything a run reads; shared read-only across concurrent queries.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub config: &'a PipelineConfig,
    pub corpus: &'a Corpus,
    pub retriever: &'a dyn Retriever,
    pub main: &'a dyn LmBackend,
    pub verifier: &'a dyn LmBackend,
    pub templates: &'a TemplateSet,
}

/// Mutable per-run bookkeeping.
struct RunState<'a> {
    pool: RankedPool,
    next_index: u32,
    display: BTreeMap<u32, &'a Passage>,
    result: RunResult,
}

impl<'a> RunState<'a> {
    fn new(query: &QueryRecord, method: Method, style: TaskStyle, pool: RankedPool) -> Self {
        Self {
            pool,
            next_index: 1,
            display: BTreeMap::new(),
            result: RunResult {
                query_id: query.qid.clone(),
                question: query.question.clone(),
                method,
                task_style: style,
                final_answer: None,
                accepted: false,
                stop_reason: StopReason::Failed,
                rounds_used: 0,
                main_calls: 0,
                verifier_calls: 0,
                traces: Vec::new(),
                documents: Vec::new(),
                gold: query.gold.clone(),
                error: None,
            },
        }
    }

    /// Retained documents first, then fresh ones from the pool up to `k`.
    fn fill(&mut self, corpus: &'a Corpus, retained: &[u32], k: usize) -> Result<Vec<u32>> {
        let mut shown = retained.to_vec();
        let exclude: HashSet<String> = retained.iter().map(|i| self.display[i].pid.clone()).collect();
        for pid in self.pool.next_batch(k.saturating_sub(shown.len()), &exclude) {
            let passage = corpus.resolve(&pid)?;
            let index = self.next_index;
            self.next_index += 1;
            self.display.insert(index, passage);
            self.result.documents.push(TraceDocument {
                index,
                pid: passage.pid.clone(),
                title: passage.title.clone(),
                text: passage.text.clone(),
            });
            shown.push(index);
        }
        Ok(shown)
    }

    fn shown(&self, indices: &[u32]) -> Vec<ShownDocument<'a>> {
        indices
            .iter()
            .map(|&index| ShownDocument {
                index,
                passage: self.display[&index],
            })
            .collect()
    }

    fn display_map(&self) -> BTreeMap<u32, String> {
        self.display.iter().map(|(&i, p)| (i, p.pid.clone())).collect()
    }

    fn shown_docs(&self, indices: &[u32]) -> Vec<ShownDoc> {
        indices
            .iter()
            .map(|&index| ShownDoc {
                index,
                pid: self.display[&index].pid.clone(),
            })
            .collect()
    }
}

impl<'a> Pipeline<'a> {
    fn request(&self, prompt: String) -> LmRequest {
        LmRequest {
            prompt,
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
            stop: None,
            seed: self.config.seed,
        }
    }

    fn call(&self, backend: &dyn LmBackend, prompt: &str) -> Result<String> {
        Ok(complete(backend, &self.request(prompt.to_string()))?.text)
    }

    /// Runs the full loop for one query. Errors inside the run are recorded
    /// on the result rather than returned.
    pub fn run_query(&self, query: &QueryRecord) -> RunResult {
        self.guarded(query, Method::Calm, |state| self.calm_rounds(query, state))
    }

    /// One generation pass over the top-k documents, without verification.
    pub fn run_baseline(&self, query: &QueryRecord) -> RunResult {
        self.guarded(query, Method::IclCite, |state| self.single_pass(query, state))
    }

    fn guarded(
        &self,
        query: &QueryRecord,
        method: Method,
        body: impl FnOnce(&mut RunState<'a>) -> Result<()>,
    ) -> RunResult {
        let style = self.config.task_style;
        let pool = self
            .config
            .validate()
            .and_then(|()| self.retriever.retrieve(&query.qid, &query.question, self.config.pool_size));
        let mut state = match pool {
            Ok(pool) => RunState::new(query, method, style, pool),
            Err(e) => {
                let mut state = RunState::new(query, method, style, RankedPool::new(&query.qid, Vec::new()));
                state.result.error = Some(e.to_string());
                return state.result;
            }
        };
        if let Err(e) = body(&mut state) {
            tracing::warn!(qid = %query.qid, "run failed: {e}");
            state.result.error = Some(e.to_string());
            state.result.stop_reason = StopReason::Failed;
            state.result.final_answer = None;
            state.result.accepted = false;
        }
        state.result
    }

    fn single_pass(&self, query: &QueryRecord, state: &mut RunState<'a>) -> Result<()> {
        let shown = state.fill(self.corpus, &[], self.config.k)?;
        if shown.is_empty() {
            return Err(Error::Integrity(format!("no passages retrieved for query `{}`", query.qid)));
        }
        let prompt = render_generation_prompt(&self.templates.generate, &query.question, &state.shown(&shown))?;
        let raw = self.call(self.main, &prompt)?;
        state.result.main_calls += 1;
        let valid: BTreeSet<u32> = shown.iter().copied().collect();
        let candidate = parse(self.config.task_style.answer_style(), &raw, &valid);
        let evidence = evidence_set(&candidate, &state.display_map())?;
        state.result.traces.push(IterationTrace {
            round: 1,
            shown_docs: state.shown_docs(&shown),
            verified_count: 0,
            main_prompt: prompt,
            main_raw: raw,
            candidate: candidate.clone(),
            evidence,
            verification: VerificationOutcome::NotRequested,
            verifier_prompt: None,
            verifier_raw: None,
            verifier_answer: None,
            decision: None,
            retained: None,
            retained_evidence: Vec::new(),
        });
        state.result.rounds_used = 1;
        state.result.final_answer = Some(candidate);
        state.result.accepted = true;
        state.result.stop_reason = StopReason::SinglePass;
        Ok(())
    }

    fn calm_rounds(&self, query: &QueryRecord, state: &mut RunState<'a>) -> Result<()> {
        let config = self.config;
        let style = config.task_style.answer_style();
        let mut retained: Vec<u32> = Vec::new();
        let mut draft = GroundedAnswer::empty(style);

        for round in 1..=config.max_iterations {
            let shown = state.fill(self.corpus, &retained, config.k)?;
            if shown.is_empty() {
                if round == 1 {
                    return Err(Error::Integrity(format!("no passages retrieved for query `{}`", query.qid)));
                }
                state.result.stop_reason = StopReason::PoolExhausted;
                return Ok(());
            }

            let docs = state.shown(&shown);
            let prompt = if round == 1 {
                render_generation_prompt(&self.templates.generate, &query.question, &docs)?
            } else {
                render_correction_prompt(&self.templates.correct, &query.question, &docs, &draft, retained.len())?
            };
            let raw = self.call(self.main, &prompt)?;
            state.result.main_calls += 1;
            state.result.rounds_used = round;
            let valid: BTreeSet<u32> = shown.iter().copied().collect();
            let candidate = parse(style, &raw, &valid);
            let evidence = evidence_set(&candidate, &state.display_map())?;
            state.result.final_answer = Some(candidate.clone());

            let mut trace = IterationTrace {
                round,
                shown_docs: state.shown_docs(&shown),
                verified_count: if round == 1 { 0 } else { retained.len() },
                main_prompt: prompt,
                main_raw: raw,
                candidate: candidate.clone(),
                evidence,
                verification: VerificationOutcome::Verified,
                verifier_prompt: None,
                verifier_raw: None,
                verifier_answer: None,
                decision: None,
                retained: None,
                retained_evidence: Vec::new(),
            };

            let last = round == config.max_iterations;
            if last && config.skip_final_verification {
                trace.verification = VerificationOutcome::SkippedFinalRound;
                state.result.traces.push(trace);
                break;
            }

            if !candidate.has_citations() {
                trace.verification = VerificationOutcome::NoCitations;
                trace.decision = Some(ConsistencyDecision::rejected(config.score_kind, config.theta));
                trace.retained = Some(GroundedAnswer::empty(style));
                state.result.traces.push(trace);
                retained.clear();
                draft = GroundedAnswer::empty(style);
                continue;
            }

            let cited = trace.evidence.indices();
            let verifier_prompt =
                render_generation_prompt(&self.templates.generate, &query.question, &state.shown(&cited))?;
            let verifier_raw = self.call(self.verifier, &verifier_prompt)?;
            state.result.verifier_calls += 1;
            let verifier_answer = parse(style, &verifier_raw, &cited.iter().copied().collect());
            let mut decision = is_consistent(&verifier_answer, &candidate, config.theta, config.score_kind);
            trace.verifier_prompt = Some(verifier_prompt);
            trace.verifier_raw = Some(verifier_raw);

            if decision.accepted {
                trace.verifier_answer = Some(verifier_answer);
                trace.decision = Some(decision);
                state.result.traces.push(trace);
                state.result.accepted = true;
                state.result.stop_reason = StopReason::Accepted;
                return Ok(());
            }

            let kept = intersect(&candidate, &verifier_answer, config.theta_match());
            decision.retained_statement_indices = kept.statement_indices.clone();
            let mut kept_docs = kept.evidence_indices.clone();
            kept_docs.sort_unstable();
            trace.verifier_answer = Some(verifier_answer);
            trace.decision = Some(decision);
            trace.retained = Some(kept.answer.clone());
            trace.retained_evidence = kept_docs.clone();
            state.result.traces.push(trace);
            retained = kept_docs;
            draft = kept.answer;
        }
        state.result.stop_reason = StopReason::MaxIterations;
        Ok(())
    }
}

/// Runs every query, `jobs` at a time, and returns results ordered by query id.
pub fn run_batch(pipeline: &Pipeline<'_>, queries: &[QueryRecord], method: Method, jobs: usize) -> Result<Vec<RunResult>> {
    let mut seen = HashSet::new();
    if let Some(dup) = queries.iter().find(|q| !seen.insert(q.qid.as_str())) {
        return Err(Error::Integrity(format!("duplicate query id `{}`", dup.qid)));
    }
    let run = |q: &QueryRecord| match method {
        Method::Calm => pipeline.run_query(q),
        Method::IclCite => pipeline.run_baseline(q),
    };
    let mut results: Vec<RunResult> = if jobs <= 1 {
        queries.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?
            .install(|| queries.par_iter().map(run).collect())
    };
    results.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(results)
}

pub fn write_trace(path: &Path, results: &[RunResult]) -> Result<()> {
    io::write_atomic(path, io::to_jsonl(results)?.as_bytes())
}

pub fn load_trace(path: &Path) -> Result<Vec<RunResult>> {
    io::read_jsonl(path)
}

fn index_list(indices: &[u32]) -> String {
    indices.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// Human-readable account of a run, round by round.
pub fn replay_text(result: &RunResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Query {}: {}", result.query_id, result.question);
    let _ = writeln!(
        out,
        "Method: {}, rounds used: {}, accepted: {}",
        match result.method {
            Method::Calm => "calm",
            Method::IclCite => "iclcite",
        },
        result.rounds_used,
        result.accepted
    );
    for trace in &result.traces {
        let _ = writeln!(out, "\nRound {}", trace.round);
        let _ = writeln!(out, "Access to: Document {}", index_list(&trace.shown_indices()));
        for doc in &trace.shown_docs {
            if let Some(d) = result.document(doc.index) {
                let _ = writeln!(out, "  [{}] {} ({})", d.index, d.title, d.pid);
            }
        }
        let _ = writeln!(out, "Response: {}", trace.main_raw.trim());
        match trace.verification {
            VerificationOutcome::Verified => {
                let _ = writeln!(out, "Verifier access to: Document {}", index_list(&trace.evidence.indices()));
                if let Some(raw) = &trace.verifier_raw {
                    let _ = writeln!(out, "Verifier response: {}", raw.trim());
                }
            }
            VerificationOutcome::NoCitations => {
                let _ = writeln!(out, "Verification: skipped, the response cites nothing");
            }
            VerificationOutcome::SkippedFinalRound => {
                let _ = writeln!(out, "Verification: skipped on the final round");
            }
            VerificationOutcome::NotRequested => {}
        }
        if let Some(d) = &trace.decision {
            let _ = writeln!(
                out,
                "ROUGE-2 {:?}: {:.3} (threshold {:.2}): {}",
                d.kind,
                d.score.get(d.kind),
                d.threshold,
                if d.accepted { "accepted" } else { "rejected" }
            );
        }
        if trace.retained.is_some() {
            let _ = writeln!(out, "Retained: Document {}", index_list(&trace.retained_evidence));
        }
    }
    if let Some(error) = &result.error {
        let _ = writeln!(out, "\nFailed: {error}");
    } else if let Some(answer) = &result.final_answer {
        let _ = writeln!(out, "\nFinal answer: {}", crate::answer::render(answer));
    }
    out
}
