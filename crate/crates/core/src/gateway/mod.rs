//! Uniform access to language-model capabilities.
//!
//! A [`Gateway`] wraps one [`ModelBackend`] and adds what every backend
//! shares: request validation, response invariants (non-positive logprobs,
//! token concatenation, embedding dimension), a per-run request budget, and
//! optional session logging from which a replay tape can be captured with
//! [`record_tape`].

mod live;
mod scripted;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use live::{LiveBackend, LiveConfig};
pub use scripted::ScriptedBackend;
pub use tape::{record_tape, SessionLog, SessionLogRow, Tape, TapeBackend, TapeEntry};

/// Request tag used for every `score_text` call.
pub const SCORE_TAG: &str = "score_text";
/// Request tag used for every `embed` call.
pub const EMBED_TAG: &str = "embed";

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("tape has no entry for request {tag:?} (key {key})")]
    TapeMiss { key: String, tag: String },
    #[error("request budget of {0} exhausted")]
    BudgetExceeded(u64),
    #[error("backend does not support {0}")]
    UnsupportedCapability(&'static str),
    #[error("embedding has {got} values, backend declares {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("corrupt session log: {0}")]
    CorruptLog(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// True for failures that the live backend gave up on after retrying.
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub stop_markers: Vec<String>,
    pub request_tag: String,
}

impl CompletionRequest {
    /// Request with the pipeline's decoding defaults (temperature 0, 1024 tokens).
    pub fn new(prompt_text: impl Into<String>, request_tag: impl Into<String>) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: 0.0,
            stop_markers: Vec::new(),
            request_tag: request_tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt_text.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt_text".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        request_key(&self.prompt_text, &self.request_tag)
    }
}

/// Tape key: content hash of the request tag and prompt text.
pub fn request_key(prompt_text: &str, request_tag: &str) -> String {
    let mut buf = Vec::with_capacity(prompt_text.len() + request_tag.len() + 1);
    buf.extend_from_slice(request_tag.as_bytes());
    buf.push(0x1f);
    buf.extend_from_slice(prompt_text.as_bytes());
    crate::digest::sha256_hex(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub token_logprobs: Vec<TokenLogprob>,
}

impl ScoredText {
    pub fn logprobs(&self) -> Vec<f64> {
        self.token_logprobs.iter().map(|t| t.logprob).collect()
    }

    /// Checks that every logprob is finite and `<= 0` and that the tokens
    /// spell out `text`.
    pub fn validate(&self) -> Result<(), GatewayError> {
        if let Some(bad) = self
            .token_logprobs
            .iter()
            .find(|t| t.logprob > 0.0 || !t.logprob.is_finite())
        {
            return Err(GatewayError::Malformed(format!(
                "token {:?} has logprob {}",
                bad.token, bad.logprob
            )));
        }
        let joined: String = self.token_logprobs.iter().map(|t| t.token.as_str()).collect();
        if joined != self.text {
            return Err(GatewayError::Malformed(
                "scored tokens do not concatenate to the scored text".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// A source of completions, token scores and embeddings.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;

    fn score_text(&self, text: &str) -> Result<ScoredText, GatewayError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;

    /// Declared embedding dimension, if the backend embeds at all.
    fn embedding_dimension(&self) -> Option<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Complete,
    Score,
    Embed,
}

pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    budget: Option<u64>,
    issued: AtomicU64,
    log: Option<Mutex<Vec<SessionLogRow>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("budget", &self.budget)
            .field("issued", &self.issued.load(Ordering::Relaxed))
            .field("logging", &self.log.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            backend,
            budget: None,
            issued: AtomicU64::new(0),
            log: None,
        }
    }

    pub fn from_backend(backend: impl ModelBackend + 'static) -> Self {
        Self::new(Arc::new(backend))
    }

    /// Caps the number of backend requests for this gateway's lifetime.
    pub fn with_budget(mut self, budget: Option<u64>) -> Self {
        self.budget = budget;
        self
    }

    /// Keeps every successful request/response pair in memory.
    pub fn with_logging(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn requests_issued(&self) -> u64 {
        self.issued.load(Ordering::SeqCst)
    }

    fn charge(&self) -> Result<(), GatewayError> {
        let n = self.issued.fetch_add(1, Ordering::SeqCst) + 1;
        match self.budget {
            Some(budget) if n > budget => Err(GatewayError::BudgetExceeded(budget)),
            _ => Ok(()),
        }
    }

    fn record(&self, row: SessionLogRow) {
        if let Some(log) = &self.log {
            log.lock().expect("session log poisoned").push(row);
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        self.charge()?;
        let text = self.backend.complete(request)?;
        tracing::debug!(tag = %request.request_tag, chars = text.len(), "completion");
        self.record(SessionLogRow {
            key: request.key(),
            request_tag: request.request_tag.clone(),
            kind: RequestKind::Complete,
            prompt: request.prompt_text.clone(),
            text: text.clone(),
            logprobs: None,
            embedding: None,
        });
        Ok(text)
    }

    /// Convenience for a default-parameter completion.
    pub fn ask(&self, prompt: &str, tag: &str) -> Result<String, GatewayError> {
        self.complete(&CompletionRequest::new(prompt, tag))
    }

    /// Per-token logprobs of `text`. The empty string scores to an empty
    /// token list without contacting the backend.
    pub fn score_text(&self, text: &str) -> Result<ScoredText, GatewayError> {
        if text.is_empty() {
            return Ok(ScoredText {
                text: String::new(),
                token_logprobs: Vec::new(),
            });
        }
        self.charge()?;
        let scored = self.backend.score_text(text)?;
        if scored.text != text {
            return Err(GatewayError::Malformed("backend scored a different text".into()));
        }
        scored.validate()?;
        self.record(SessionLogRow {
            key: request_key(text, SCORE_TAG),
            request_tag: SCORE_TAG.into(),
            kind: RequestKind::Score,
            prompt: text.to_string(),
            text: text.to_string(),
            logprobs: Some(scored.token_logprobs.clone()),
            embedding: None,
        });
        Ok(scored)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let expected = self
            .backend
            .embedding_dimension()
            .ok_or(GatewayError::UnsupportedCapability("embeddings"))?;
        self.charge()?;
        let vector = self.backend.embed(text)?;
        if vector.dimension() != expected {
            return Err(GatewayError::DimensionMismatch {
                expected,
                got: vector.dimension(),
            });
        }
        if vector.values().iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::Malformed("non-finite embedding value".into()));
        }
        self.record(SessionLogRow {
            key: request_key(text, EMBED_TAG),
            request_tag: EMBED_TAG.into(),
            kind: RequestKind::Embed,
            prompt: text.to_string(),
            text: text.to_string(),
            logprobs: None,
            embedding: Some(vector.values().to_vec()),
        });
        Ok(vector)
    }

    /// Snapshot of the session log sorted by key, or `None` when logging is off.
    pub fn session_log(&self) -> Option<SessionLog> {
        let log = self.log.as_ref()?;
        let mut rows = log.lock().expect("session log poisoned").clone();
        rows.sort_by(|a, b| a.key.cmp(&b.key).then_with(|| a.text.cmp(&b.text)));
        Some(SessionLog { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed {
        logprob: f64,
        dim: usize,
        returned_dim: usize,
    }

    impl ModelBackend for Fixed {
        fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
            Ok(format!("echo:{}", request.prompt_text))
        }
        fn score_text(&self, text: &str) -> Result<ScoredText, GatewayError> {
            Ok(ScoredText {
                text: text.into(),
                token_logprobs: vec![TokenLogprob {
                    token: text.into(),
                    logprob: self.logprob,
                }],
            })
        }
        fn embed(&self, _text: &str) -> Result<EmbeddingVector, GatewayError> {
            Ok(EmbeddingVector::new(vec![0.5; self.returned_dim]))
        }
        fn embedding_dimension(&self) -> Option<usize> {
            Some(self.dim)
        }
    }

    fn fixed(logprob: f64, dim: usize, returned_dim: usize) -> Gateway {
        Gateway::from_backend(Fixed {
            logprob,
            dim,
            returned_dim,
        })
    }

    #[test]
    fn rejects_invalid_requests() {
        let gw = fixed(-1.0, 2, 2);
        let mut req = CompletionRequest::new("", "t");
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        req.prompt_text = "x".into();
        req.max_output_tokens = 0;
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        assert_eq!(gw.requests_issued(), 0);
    }

    #[test]
    fn positive_logprob_is_malformed() {
        let gw = fixed(0.1, 2, 2);
        assert!(matches!(gw.score_text("ab"), Err(GatewayError::Malformed(_))));
        let gw = fixed(0.0, 2, 2);
        assert_eq!(gw.score_text("ab").unwrap().logprobs(), vec![0.0]);
    }

    #[test]
    fn empty_text_scores_to_empty_list() {
        let gw = fixed(-1.0, 2, 2);
        let scored = gw.score_text("").unwrap();
        assert!(scored.token_logprobs.is_empty());
        assert_eq!(gw.requests_issued(), 0);
    }

    #[test]
    fn embedding_dimension_is_enforced() {
        assert_eq!(fixed(-1.0, 2, 2).embed("hello").unwrap().dimension(), 2);
        assert!(matches!(
            fixed(-1.0, 2, 3).embed("hello"),
            Err(GatewayError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn budget_caps_requests() {
        let gw = fixed(-1.0, 2, 2).with_budget(Some(2));
        gw.ask("a", "t").unwrap();
        gw.ask("b", "t").unwrap();
        assert!(matches!(gw.ask("c", "t"), Err(GatewayError::BudgetExceeded(2))));
    }

    #[test]
    fn logging_keeps_tags_verbatim() {
        let gw = fixed(-1.0, 2, 2).with_logging();
        gw.ask("prompt one", "case-7/combine").unwrap();
        let log = gw.session_log().unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].request_tag, "case-7/combine");
        assert_eq!(log.rows[0].prompt, "prompt one");
    }

    #[test]
    fn key_depends_on_tag_and_prompt() {
        assert_eq!(request_key("p", "t"), request_key("p", "t"));
        assert_ne!(request_key("p", "t"), request_key("p", "u"));
        assert_ne!(request_key("p", "t"), request_key("q", "t"));
        assert_ne!(request_key("ab", "c"), request_key("b", "ca"));
    }
}
