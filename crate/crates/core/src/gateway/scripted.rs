use super::{CompletionRequest, EmbeddingVector, GatewayError, ModelBackend, ScoredText};

type Responder = dyn Fn(&CompletionRequest) -> Option<String> + Send + Sync;

/// Completions from a closure; scoring and embedding are unsupported.
/// A `None` from the closure surfaces as a tape miss.
pub struct ScriptedBackend {
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new(responder: impl Fn(&CompletionRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(responder),
        }
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (self.responder)(request).ok_or_else(|| GatewayError::TapeMiss {
            key: request.key(),
            tag: request.request_tag.clone(),
        })
    }

    fn score_text(&self, _text: &str) -> Result<ScoredText, GatewayError> {
        Err(GatewayError::UnsupportedCapability("scoring"))
    }

    fn embed(&self, _text: &str) -> Result<EmbeddingVector, GatewayError> {
        Err(GatewayError::UnsupportedCapability("embeddings"))
    }

    fn embedding_dimension(&self) -> Option<usize> {
        None
    }
}
