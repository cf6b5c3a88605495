//! Backend abstraction: send a prompt (and maybe an image), get text back.

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

/// One completion request. `timeout` is advisory; backends that do real
/// network IO enforce it themselves.
#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub meme_id: String,
    pub prompt_text: String,
    pub image_ref: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("request rejected: {0}")]
    Rejected(String),
}

impl BackendError {
    /// Transport faults and timeouts are worth retrying; rejections are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout(_))
    }
}

/// A reasoning model endpoint. Implementations must be safe to call from
/// multiple threads at once.
pub trait ReasoningBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError>;
}

/// Deterministic test backend: fixed responses keyed by meme id.
pub struct ScriptedBackend {
    id: String,
    responses: BTreeMap<String, String>,
}

impl ScriptedBackend {
    pub fn new<'a>(id: &str, responses: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        ScriptedBackend {
            id: id.to_string(),
            responses: responses
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl ReasoningBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        self.responses
            .get(&request.meme_id)
            .cloned()
            .ok_or_else(|| {
                BackendError::Rejected(format!("no scripted response for {}", request.meme_id))
            })
    }
}
