//! TOML run configuration. Relative paths resolve against the directory
//! holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use calm_core::consistency::ScoreKind;
use calm_core::lm::{BackendSpec, TaskStyle};
use calm_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task_style: TaskStyle,
    pub corpus: Option<PathBuf>,
    /// Prebuilt BM25 index; built from the corpus when absent.
    pub index: Option<PathBuf>,
    /// Precomputed rankings take priority over BM25.
    pub rankings: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    pub sensitivity: Option<SensitivitySection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub k: Option<usize>,
    pub theta: Option<f64>,
    pub theta_match: Option<f64>,
    pub max_iterations: Option<usize>,
    pub pool_size: Option<usize>,
    pub score_kind: Option<ScoreKind>,
    pub skip_final_verification: Option<bool>,
    pub main_backend: Option<String>,
    pub verifier_backend: Option<String>,
    pub max_tokens: Option<u32>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySection {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub gold: PathBuf,
    pub models: Vec<String>,
    pub reference_model: Option<String>,
    pub targets: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: Self = toml::from_str(&raw).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.corpus);
        resolve(&mut config.index);
        resolve(&mut config.rankings);
        resolve(&mut config.queries);
        resolve(&mut config.templates);
        if let Some(s) = &mut config.sensitivity {
            s.corpus = base.join(&s.corpus);
            s.queries = base.join(&s.queries);
            s.gold = base.join(&s.gold);
        }
        Ok(config)
    }

    pub fn corpus(&self) -> anyhow::Result<&Path> {
        match &self.corpus {
            Some(p) => Ok(p),
            None => bail!("the config does not name a corpus"),
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut c = PipelineConfig::new(self.task_style);
        let p = &self.pipeline;
        self.pipeline.apply(&mut c);
        if let Some(v) = &p.main_backend {
            c.main_backend = v.clone();
        }
        if let Some(v) = &p.verifier_backend {
            c.verifier_backend = v.clone();
        }
        if let Some(v) = p.score_kind {
            c.score_kind = v;
        }
        if let Some(v) = p.skip_final_verification {
            c.skip_final_verification = v;
        }
        if let Some(v) = p.max_tokens {
            c.max_tokens = v;
        }
        if let Some(v) = p.temperature {
            c.temperature = v;
        }
        if p.seed.is_some() {
            c.seed = p.seed;
        }
        c
    }
}

impl PipelineSection {
    /// Overlays the numeric loop settings that can also come from flags.
    pub fn apply(&self, c: &mut PipelineConfig) {
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.theta {
            c.theta = v;
        }
        if self.theta_match.is_some() {
            c.theta_match = self.theta_match;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.pool_size {
            c.pool_size = v;
        }
    }
}
