//! Chat-completion style HTTP backend.
//!
//! Completions go to `{base_url}/chat/completions` (message list in, choice
//! list out). Token scoring uses `{base_url}/completions` with `echo` and
//! `logprobs`, and is only attempted when the endpoint is declared to support
//! it. Embeddings go to `{base_url}/embeddings`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    CompletionRequest, EmbeddingVector, GatewayError, ModelBackend, ScoredText, TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    pub model_name: String,
    pub embed_model_name: Option<String>,
    /// Declared embedding dimension; responses of another length are rejected.
    pub embed_dimension: Option<usize>,
    /// Name of the environment variable holding the API credential.
    pub api_key_env: String,
    pub max_parallel: usize,
    /// Total attempts per request, including the first.
    pub retry_count: u32,
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
    pub supports_scoring: bool,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            embed_model_name: None,
            embed_dimension: None,
            api_key_env: "MINDRISK_API_KEY".into(),
            max_parallel: 4,
            retry_count: 3,
            backoff_base_ms: 1000,
            timeout_secs: 120,
            supports_scoring: false,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Retryable(String),
    Fatal(GatewayError),
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl std::fmt::Debug for LiveBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveBackend")
            .field("config", &self.config)
            .field("has_key", &self.api_key.is_some())
            .finish()
    }
}

impl LiveBackend {
    /// Reads the credential from the configured environment variable.
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: LiveConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                detail: format!("client setup: {e}"),
            })?;
        let permits = Permits::new(config.max_parallel);
        Ok(Self {
            config,
            api_key,
            client,
            permits,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if matches!(status.as_u16(), 408 | 429) || status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| Failure::Retryable(e.to_string()))?;
        if !status.is_success() {
            return Err(Failure::Fatal(GatewayError::Malformed(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            ))));
        }
        serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(GatewayError::Malformed(format!("response body: {e}"))))
    }

    /// POSTs `body`, retrying transport failures with exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(path);
        let attempts = self.config.retry_count.max(1);
        let _permit = self.permits.acquire();
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&url, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(detail)) => {
                    tracing::warn!(%url, attempt = attempt + 1, %detail, "transient failure");
                    last = detail;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            detail: last,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn malformed(what: &str) -> GatewayError {
    GatewayError::Malformed(format!("missing {what}"))
}

impl ModelBackend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if !request.stop_markers.is_empty() {
            body["stop"] = json!(request.stop_markers);
        }
        let resp = self.post("chat/completions", &body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed("choices[0].message.content"))
    }

    fn score_text(&self, text: &str) -> Result<ScoredText, GatewayError> {
        if !self.config.supports_scoring {
            return Err(GatewayError::UnsupportedCapability("token scoring"));
        }
        let body = json!({
            "model": self.config.model_name,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = self.post("completions", &body)?;
        let lp = &resp["choices"][0]["logprobs"];
        let tokens = lp["tokens"].as_array().ok_or_else(|| malformed("logprobs.tokens"))?;
        let values = lp["token_logprobs"]
            .as_array()
            .ok_or_else(|| malformed("logprobs.token_logprobs"))?;
        if tokens.len() != values.len() {
            return Err(GatewayError::Malformed("token/logprob length mismatch".into()));
        }
        // Tokens without a conditional logprob (the first one, typically) are
        // folded into the following token so the texts still concatenate.
        let mut out: Vec<TokenLogprob> = Vec::with_capacity(tokens.len());
        let mut pending = String::new();
        for (tok, val) in tokens.iter().zip(values) {
            let tok = tok.as_str().ok_or_else(|| malformed("token text"))?;
            match val.as_f64() {
                Some(logprob) => {
                    let token = std::mem::take(&mut pending) + tok;
                    out.push(TokenLogprob { token, logprob });
                }
                None => pending.push_str(tok),
            }
        }
        if !pending.is_empty() {
            match out.last_mut() {
                Some(last) => last.token.push_str(&pending),
                None => return Err(GatewayError::Malformed("no scored tokens".into())),
            }
        }
        Ok(ScoredText {
            text: text.to_string(),
            token_logprobs: out,
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let model = self
            .config
            .embed_model_name
            .as_deref()
            .ok_or(GatewayError::UnsupportedCapability("embeddings"))?;
        let resp = self.post("embeddings", &json!({"model": model, "input": text}))?;
        let values = resp["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| malformed("data[0].embedding"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| malformed("numeric embedding value")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EmbeddingVector::new(values))
    }

    fn embedding_dimension(&self) -> Option<usize> {
        self.config.embed_model_name.as_ref()?;
        self.config.embed_dimension
    }
}
