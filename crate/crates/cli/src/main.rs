mod config;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use calm_core::evaluation::{evaluate_run, load_gold, EntailmentJudge, HttpJudge, SubstringJudge};
use calm_core::io::{write_atomic, write_json_atomic};
use calm_core::lm::{BackendRegistry, PromptMode, PromptTemplate, TaskStyle, TemplateSet};
use calm_core::pipeline::{load_queries, load_trace, replay_text, run_batch, write_trace, Method, Pipeline, RunResult};
use calm_core::retrieval::{build_index, load_corpus, Bm25Params, Index, PrecomputedRankings, Retriever};
use calm_core::sensitivity::{build_anchor_sets, gold_for, run_sensitivity, SensitivityInputs, SensitivityReport};

use config::{FileConfig, PipelineSection};

#[derive(Parser)]
#[command(name = "calm", version, about = "Retrieve, answer with citations, verify and correct")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index over a corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Answer queries with verification and correction.
    Run(RunArgs),
    /// Answer queries in a single pass without verification.
    Baseline(RunArgs),
    /// Score a trace against gold annotations.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Defaults to the style recorded in the trace.
        #[arg(long)]
        style: Option<TaskStyle>,
        /// `substring` or `http:<url>`.
        #[arg(long, default_value = "substring")]
        judge: String,
        #[arg(long)]
        out: PathBuf,
        /// Print a summary table to stdout.
        #[arg(long)]
        table: bool,
    },
    /// Measure accuracy against evidence recall at fixed anchors.
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated recall targets.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a tab-separated plot table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Print a readable account of one query's rounds.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        qid: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to the queries file named in the config.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    theta_match: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
}

const DEFAULT_TARGETS: [f64; 3] = [0.27, 0.56, 0.78];

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Index { corpus, out, k1, b } => {
            let corpus = load_corpus(&corpus)?;
            let index = build_index(&corpus, Bm25Params { k1, b })?;
            index.save(&out)?;
            tracing::info!(passages = index.len(), "wrote {}", out.display());
            Ok(())
        }
        Command::Run(args) => run(args, Method::Calm),
        Command::Baseline(args) => run(args, Method::IclCite),
        Command::Eval {
            trace,
            gold,
            style,
            judge,
            out,
            table,
        } => eval(&trace, &gold, style, &judge, &out, table),
        Command::Sensitivity {
            config,
            targets,
            seed,
            out,
            table,
        } => sensitivity(&config, targets, seed, &out, table.as_deref()),
        Command::Replay { trace, qid } => {
            let results = load_trace(&trace)?;
            let Some(result) = results.iter().find(|r| r.query_id == qid) else {
                bail!("no query `{qid}` in {}", trace.display());
            };
            print!("{}", replay_text(result));
            Ok(())
        }
    }
}

fn retriever(config: &FileConfig) -> anyhow::Result<Box<dyn Retriever>> {
    if let Some(path) = &config.rankings {
        return Ok(Box::new(PrecomputedRankings::load(path)?));
    }
    if let Some(path) = &config.index {
        return Ok(Box::new(Index::load(path)?));
    }
    let corpus = load_corpus(config.corpus()?)?;
    Ok(Box::new(build_index(&corpus, Bm25Params::default())?))
}

fn run(args: RunArgs, method: Method) -> anyhow::Result<()> {
    let file = FileConfig::load(&args.config)?;
    let mut pipeline_config = file.pipeline_config();
    PipelineSection {
        k: args.k,
        theta: args.theta,
        theta_match: args.theta_match,
        max_iterations: args.max_iterations,
        pool_size: args.pool_size,
        ..Default::default()
    }
    .apply(&mut pipeline_config);
    pipeline_config.validate()?;

    let queries_path = match args.queries.as_ref().or(file.queries.as_ref()) {
        Some(p) => p.clone(),
        None => bail!("no queries file given and none named in the config"),
    };
    let queries = load_queries(&queries_path)?;
    let corpus = load_corpus(file.corpus()?)?;
    let retriever = retriever(&file)?;
    let templates = match &file.templates {
        Some(dir) => TemplateSet::from_dir(dir, file.task_style)?,
        None => TemplateSet::builtin(file.task_style),
    };
    let registry = BackendRegistry::from_specs(&file.backends)?;
    let main = registry.get(&pipeline_config.main_backend)?;
    // the baseline never calls the verifier, so it need not be configured
    let verifier = match method {
        Method::Calm => registry.get(&pipeline_config.verifier_backend)?,
        Method::IclCite => registry.get(&pipeline_config.verifier_backend).unwrap_or_else(|_| main.clone()),
    };
    let pipeline = Pipeline {
        config: &pipeline_config,
        corpus: &corpus,
        retriever: retriever.as_ref(),
        main: main.as_ref(),
        verifier: verifier.as_ref(),
        templates: &templates,
    };
    let jobs = args.jobs.or(file.jobs).unwrap_or(1);
    let results = run_batch(&pipeline, &queries, method, jobs)?;
    write_trace(&args.out, &results)?;
    summarize(&results);
    tracing::info!("wrote {}", args.out.display());
    Ok(())
}

fn summarize(results: &[RunResult]) {
    let failed = results.iter().filter(|r| r.is_failed()).count();
    let accepted = results.iter().filter(|r| r.accepted).count();
    let rounds: usize = results.iter().map(|r| r.rounds_used).sum();
    tracing::info!(queries = results.len(), accepted, failed, rounds, "run finished");
    for r in results.iter().filter(|r| r.is_failed()) {
        tracing::warn!(qid = %r.query_id, "failed: {}", r.error.as_deref().unwrap_or("unknown error"));
    }
}

fn judge(spec: &str) -> anyhow::Result<Box<dyn EntailmentJudge>> {
    if spec == "substring" {
        return Ok(Box::new(SubstringJudge));
    }
    match spec.strip_prefix("http:") {
        Some(url) => Ok(Box::new(HttpJudge::new(url, Duration::from_secs(60))?)),
        None => bail!("unknown judge `{spec}`; expected `substring` or `http:<url>`"),
    }
}

fn eval(trace: &Path, gold: &Path, style: Option<TaskStyle>, judge_spec: &str, out: &Path, table: bool) -> anyhow::Result<()> {
    let results = load_trace(trace)?;
    let gold = load_gold(gold)?;
    let style = match style.or_else(|| results.first().map(|r| r.task_style)) {
        Some(s) => s,
        None => bail!("the trace is empty; pass --style"),
    };
    let judge = judge(judge_spec)?;
    let report = evaluate_run(&results, &gold, style, judge.as_ref())?;
    write_json_atomic(out, &report)?;
    if table {
        let label = match results.first().map(|r| r.method) {
            Some(Method::IclCite) => "iclcite",
            _ => "calm",
        };
        print!("{}", report.to_table(label));
    }
    if report.scoring_errors > 0 {
        tracing::warn!(count = report.scoring_errors, "some queries could not be scored");
    }
    tracing::info!("wrote {}", out.display());
    Ok(())
}

fn sensitivity(
    config_path: &Path,
    targets: Option<Vec<f64>>,
    seed: Option<u64>,
    out: &Path,
    table: Option<&Path>,
) -> anyhow::Result<()> {
    let file = FileConfig::load(config_path)?;
    let Some(section) = &file.sensitivity else {
        bail!("the config has no [sensitivity] section");
    };
    let targets = targets
        .or_else(|| section.targets.clone())
        .unwrap_or_else(|| DEFAULT_TARGETS.to_vec());
    let seed = seed.or(section.seed).unwrap_or(0);
    let corpus = load_corpus(&section.corpus)?;
    let queries = load_queries(&section.queries)?;
    let all_gold = load_gold(&section.gold)?;
    let gold: Vec<_> = gold_for(&queries, &all_gold)?.into_iter().cloned().collect();
    let anchors = build_anchor_sets(&corpus, &gold, &targets, seed)?;
    let template = match &file.templates {
        Some(dir) => PromptTemplate::from_dir(dir, file.task_style, PromptMode::Generate)?,
        None => PromptTemplate::builtin(file.task_style, PromptMode::Generate),
    };
    let inputs = SensitivityInputs {
        corpus: &corpus,
        queries: &queries,
        gold: &gold,
        template: &template,
        max_tokens: section.max_tokens.unwrap_or(300),
        jobs: file.jobs.unwrap_or(1),
    };
    let registry = BackendRegistry::from_specs(&file.backends)?;
    let models = section
        .models
        .iter()
        .map(|id| {
            let backend: Arc<_> = registry.get(id)?;
            run_sensitivity(backend.as_ref(), &anchors, &inputs).with_context(|| format!("model `{id}`"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = SensitivityReport::new(seed, anchors, models, section.reference_model.as_deref())?;
    write_json_atomic(out, &report)?;
    if let Some(path) = table {
        write_atomic(path, report.plot_table().as_bytes())?;
    }
    for m in &report.models {
        tracing::info!(model = %m.model, ratio = ?m.second_order_ratio, partial = m.partial, "sensitivity");
    }
    tracing::info!("wrote {}", out.display());
    Ok(())
}
