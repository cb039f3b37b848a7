//! Language-model backends behind one completion contract, and the prompt
//! templates used to drive them.

pub mod http;
pub mod scripted;
pub mod template;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{Matcher, Noise, Reply, ReplyFn, Rule, ScriptedBackend};
pub use template::{
    render_correction_prompt, render_generation_prompt, PromptMode, PromptTemplate, PromptView, Shot, ShownDocument,
    TaskStyle, TemplateSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl LmRequest {
    /// A greedy (temperature 0) request.
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            stop: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
    pub latency_ms: u64,
}

pub trait LmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &LmRequest) -> Result<LmResponse>;
}

pub fn complete(backend: &dyn LmBackend, request: &LmRequest) -> Result<LmResponse> {
    if request.max_tokens == 0 {
        return Err(Error::Config("max_tokens must be positive".into()));
    }
    if !(request.temperature >= 0.0) {
        return Err(Error::Config("temperature must be non-negative".into()));
    }
    backend.complete(request)
}

/// Backend definition as it appears in a configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendSpec {
    Http(HttpBackendConfig),
    Scripted { rules: Vec<Rule> },
}

pub fn build_backend(id: &str, spec: &BackendSpec) -> Result<Arc<dyn LmBackend>> {
    Ok(match spec {
        BackendSpec::Http(config) => Arc::new(HttpBackend::new(id, config.clone())?),
        BackendSpec::Scripted { rules } => Arc::new(ScriptedBackend::new(id, rules.clone())?),
    })
}

/// Named backends shared by every run in a batch.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn LmBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &BTreeMap<String, BackendSpec>) -> Result<Self> {
        let mut registry = Self::new();
        for (id, spec) in specs {
            registry.insert(build_backend(id, spec)?);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, backend: Arc<dyn LmBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn LmBackend>> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no backend named `{id}`")))
    }
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}
