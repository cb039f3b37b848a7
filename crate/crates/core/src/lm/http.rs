//! Remote completion service client.
//!
//! Sends `{model, prompt, max_tokens, temperature, stop, seed}` as JSON and
//! accepts `{text}`, `{choices: [{text}]}` or `{choices: [{message: {content}}]}`.
//! Connection failures, timeouts, 429 and 5xx responses are retried with
//! exponential backoff; other statuses fail immediately.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{LmBackend, LmRequest, LmResponse, Usage};
use crate::error::{Error, Result};

const BODY_EXCERPT: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    500
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: None,
        }
    }
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
    gate: Option<Gate>,
}

enum Attempt {
    Done(LmResponse),
    Retry(String),
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: HttpBackendConfig) -> Result<Self> {
        let id = id.into();
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("backend `{id}`: environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::Backend {
                backend: id.clone(),
                message: e.to_string(),
            })?;
        let gate = config.max_in_flight.map(|limit| Gate {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        });
        Ok(Self {
            id,
            config,
            client,
            token,
            gate,
        })
    }

    fn body(&self, request: &LmRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value, started: Instant) -> Result<Attempt> {
        let mut builder = self.client.post(&self.config.endpoint).json(body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) if e.is_connect() || e.is_timeout() => return Ok(Attempt::Retry(e.to_string())),
            Err(e) => return Err(self.error(e.to_string())),
        };
        let status = response.status();
        let text = response.text().map_err(|e| self.error(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(Attempt::Retry(format!("status {}: {}", status.as_u16(), excerpt(&text))));
        }
        if !status.is_success() {
            return Err(Error::BackendStatus {
                backend: self.id.clone(),
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| self.error(format!("response is not JSON ({e}): {}", excerpt(&text))))?;
        let completion = extract_text(&value)
            .ok_or_else(|| self.error(format!("response has no completion text: {}", excerpt(&text))))?;
        let usage = Usage {
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(Attempt::Done(LmResponse {
            text: completion.to_string(),
            usage,
            backend_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
        }))
    }

    fn error(&self, message: String) -> Error {
        Error::Backend {
            backend: self.id.clone(),
            message,
        }
    }
}

fn extract_text(value: &Value) -> Option<&str> {
    value["text"]
        .as_str()
        .or_else(|| value["choices"][0]["text"].as_str())
        .or_else(|| value["choices"][0]["message"]["content"].as_str())
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

impl LmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &LmRequest) -> Result<LmResponse> {
        let _permit = self.gate.as_ref().map(Gate::acquire);
        let body = self.body(request);
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                tracing::debug!(backend = %self.id, attempt, delay_ms = delay, "retrying: {last}");
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&body, started)? {
                Attempt::Done(response) => return Ok(response),
                Attempt::Retry(reason) => last = reason,
            }
        }
        Err(self.error(format!(
            "gave up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;

    /// Serves canned responses in order, one per connection, and records
    /// each request body.
    fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut request_body = vec![0; length];
                let _ = reader.read_exact(&mut request_body);
                b.lock().unwrap().push(String::from_utf8_lossy(&request_body).into_owned());
                h.fetch_add(1, Ordering::SeqCst);
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (format!("http://{addr}/complete"), hits, bodies)
    }

    fn backend(endpoint: String, retries: u32) -> HttpBackend {
        let mut config = HttpBackendConfig::new(endpoint, "test-model");
        config.max_retries = retries;
        config.backoff_base_ms = 1;
        config.timeout_secs = 5;
        HttpBackend::new("remote", config).unwrap()
    }

    #[test]
    fn returns_text_and_sends_structured_body() {
        let (url, _, bodies) = serve(vec![(200, r#"{"text": "hello [1]."}"#)]);
        let mut request = LmRequest::new("prompt", 16);
        request.stop = Some(vec!["\n\n".into()]);
        let response = backend(url, 0).complete(&request).unwrap();
        assert_eq!(response.text, "hello [1].");
        assert_eq!(response.backend_id, "remote");
        let sent: Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["prompt"], "prompt");
        assert_eq!(sent["max_tokens"], 16);
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["stop"][0], "\n\n");
    }

    #[test]
    fn accepts_choice_shapes() {
        let (url, _, _) = serve(vec![
            (200, r#"{"choices": [{"text": "a"}]}"#),
            (200, r#"{"choices": [{"message": {"content": "b"}}]}"#),
        ]);
        let b = backend(url, 0);
        assert_eq!(b.complete(&LmRequest::new("p", 4)).unwrap().text, "a");
        assert_eq!(b.complete(&LmRequest::new("p", 4)).unwrap().text, "b");
    }

    #[test]
    fn three_server_errors_exhaust_a_budget_of_two() {
        let (url, hits, _) = serve(vec![(500, "boom"), (500, "boom"), (500, "boom"), (200, r#"{"text":"late"}"#)]);
        let err = backend(url, 2).complete(&LmRequest::new("p", 4)).unwrap_err();
        assert!(matches!(err, Error::Backend { .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn transient_failure_then_success() {
        let (url, hits, _) = serve(vec![(503, "busy"), (200, r#"{"text":"ok"}"#)]);
        assert_eq!(backend(url, 2).complete(&LmRequest::new("p", 4)).unwrap().text, "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, hits, _) = serve(vec![(400, r#"{"error":"bad request"}"#), (200, r#"{"text":"x"}"#)]);
        match backend(url, 3).complete(&LmRequest::new("p", 4)).unwrap_err() {
            Error::BackendStatus { status, body, .. } => {
                assert_eq!(status, 400);
                assert!(body.contains("bad request"));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn refused_connection_is_a_backend_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = backend(format!("http://127.0.0.1:{port}/"), 1)
            .complete(&LmRequest::new("p", 4))
            .unwrap_err();
        assert!(matches!(err, Error::Backend { .. }));
    }

    #[test]
    fn missing_credential_variable_is_a_config_error() {
        let mut config = HttpBackendConfig::new("http://127.0.0.1:1/", "m");
        config.api_key_env = Some("CALM_TEST_UNSET_VARIABLE_4471".into());
        assert!(matches!(HttpBackend::new("r", config), Err(Error::Config(_))));
    }
}
