mod common;

use calm_core::evaluation::{evaluate_run, SubstringJudge};
use calm_core::lm::{Matcher, Reply, Rule, ScriptedBackend, TaskStyle, TemplateSet};
use calm_core::pipeline::{load_trace, run_batch, write_trace, Method, Pipeline, PipelineConfig, StopReason};

use common::{fixture, reader};

#[test]
fn failing_query_is_recorded_and_the_batch_continues() {
    let fx = fixture("bench");
    let queries = fx.queries[..3].to_vec();
    // only answers questions about the first query's subject
    let subject = queries[0].question.trim_start_matches("What is ").trim_end_matches(" known for?").to_string();
    let main = ScriptedBackend::new(
        "main",
        vec![Rule::new(
            Matcher::QuestionContains { text: subject },
            Reply::ReadSentences { subject_pattern: Some(common::SUBJECT_PATTERN.into()), noise: None },
        )],
    )
    .unwrap();
    let verifier = reader("verifier", None);
    let config = PipelineConfig::new(TaskStyle::Asqa);
    let templates = TemplateSet::builtin(TaskStyle::Asqa);
    let pipeline = Pipeline {
        config: &config,
        corpus: &fx.corpus,
        retriever: &fx.index,
        main: &main,
        verifier: &*verifier,
        templates: &templates,
    };
    let results = run_batch(&pipeline, &queries, Method::Calm, 2).unwrap();
    assert_eq!(results.len(), 3);
    let failed: Vec<_> = results.iter().filter(|r| r.is_failed()).collect();
    assert_eq!(failed.len(), 2);
    for r in &failed {
        assert_eq!(r.stop_reason, StopReason::Failed);
        assert!(r.final_answer.is_none());
        assert!(r.error.is_some());
    }
    let report = evaluate_run(&results, &fx.gold, TaskStyle::Asqa, &SubstringJudge).unwrap();
    assert_eq!(report.failed_runs, 2);
}

#[test]
fn reruns_write_identical_traces() {
    let fx = fixture("bench");
    let dir = tempfile::tempdir().unwrap();
    let main = reader("main", Some((0.5, 3)));
    let verifier = reader("verifier", None);
    let mut config = PipelineConfig::new(TaskStyle::Asqa);
    config.theta = 0.95;
    let templates = TemplateSet::builtin(TaskStyle::Asqa);
    let pipeline = Pipeline {
        config: &config,
        corpus: &fx.corpus,
        retriever: &fx.index,
        main: &*main,
        verifier: &*verifier,
        templates: &templates,
    };
    let mut bytes = Vec::new();
    for (i, jobs) in [1, 4].into_iter().enumerate() {
        let results = run_batch(&pipeline, &fx.queries, Method::Calm, jobs).unwrap();
        let path = dir.path().join(format!("trace{i}.jsonl"));
        write_trace(&path, &results).unwrap();
        assert_eq!(load_trace(&path).unwrap(), results);
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn empty_query_list_gives_empty_trace() {
    let fx = fixture("bench");
    let main = reader("main", None);
    let config = PipelineConfig::new(TaskStyle::Asqa);
    let templates = TemplateSet::builtin(TaskStyle::Asqa);
    let pipeline = Pipeline {
        config: &config,
        corpus: &fx.corpus,
        retriever: &fx.index,
        main: &*main,
        verifier: &*main,
        templates: &templates,
    };
    assert!(run_batch(&pipeline, &[], Method::Calm, 1).unwrap().is_empty());
}
