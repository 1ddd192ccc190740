//! Model capabilities behind one trait: chat completion, continuation
//! scoring, and embeddings.
//!
//! Everything that talks to a model goes through [`ChatBackend`]. The
//! engine never builds wire payloads itself; [`HttpBackend`] owns the
//! OpenAI-compatible protocol and [`StubBackend`] answers from fixtures and
//! deterministic policies.

mod fingerprint;
mod http;
mod record;
mod stub;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use fingerprint::{fingerprint, Capability};
pub use http::{HttpBackend, HttpConfig};
pub use record::RecordingBackend;
pub use stub::{Branch, ConfidencePolicy, FixtureResponse, StubBackend, StubScript};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl Decoding {
    pub fn sampled(temperature: f64, seed: u64) -> Self {
        Decoding {
            temperature,
            seed: Some(seed),
            ..Decoding::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFormat {
    #[default]
    Text,
    Json,
}

/// Which engine step issued a request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Recognize,
    ConstructSchema,
    GenerateTable,
    Finalize,
    SimulateUser,
    Extract,
    JudgeOption,
}

/// Structured copy of what a prompt asks for.
///
/// Real endpoints ignore it. The stub's policies read it instead of parsing
/// prompt prose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHint {
    pub kind: TaskKind,
    pub payload: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub decoding: Decoding,
    pub response_format: ResponseFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskHint>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
    pub usage: Usage,
}

impl ChatResponse {
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        ChatResponse {
            usage: Usage {
                prompt_tokens: 0,
                completion_tokens: tokens.len() as u64,
            },
            tokens,
            token_probs: None,
            text,
        }
    }
}

/// Per-token probabilities of a given continuation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
}

impl ScoredContinuation {
    /// Boundary check applied to every scoring result, stub or real.
    pub fn validate(self) -> Result<Self, BackendError> {
        if self.tokens.len() != self.probs.len() {
            return Err(BackendError::InvalidResponse(format!(
                "{} tokens but {} probabilities",
                self.tokens.len(),
                self.probs.len()
            )));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(BackendError::InvalidResponse(format!(
                "token probability {p} outside [0, 1]"
            )));
        }
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub chat: bool,
    pub scoring: bool,
    pub embedding: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("no stub fixture for {capability} request {fingerprint}{}", .task.map(|t| format!(" (task {t:?})")).unwrap_or_default())]
    FixtureMiss {
        capability: Capability,
        fingerprint: String,
        task: Option<TaskKind>,
    },
    #[error("backend does not support {0}")]
    Capability(&'static str),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    /// Identity recorded alongside anything this backend produced.
    fn id(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Probabilities `P(y_i | context, y_<i)` for the tokens of
    /// `continuation`.
    fn score_continuation(
        &self,
        context: &[ChatMessage],
        continuation: &str,
    ) -> Result<ScoredContinuation, BackendError>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat_complete(request)
    }
    fn score_continuation(
        &self,
        context: &[ChatMessage],
        continuation: &str,
    ) -> Result<ScoredContinuation, BackendError> {
        (**self).score_continuation(context, continuation)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed(texts)
    }
}

/// How a process picks its backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Stub {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixtures: Option<PathBuf>,
    },
    Http(HttpConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Stub { fixtures: None }
    }
}

impl BackendConfig {
    /// `PRISM_BACKEND_URL` selects the HTTP adapter; otherwise the lenient
    /// stub.
    pub fn from_env() -> Self {
        match HttpConfig::from_env() {
            Some(cfg) => BackendConfig::Http(cfg),
            None => BackendConfig::default(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        Ok(match self {
            BackendConfig::Stub { fixtures: None } => Arc::new(StubBackend::lenient()),
            BackendConfig::Stub {
                fixtures: Some(path),
            } => Arc::new(StubBackend::new(StubScript::load(path)?)?),
            BackendConfig::Http(cfg) => Arc::new(HttpBackend::new(cfg.clone())?),
        })
    }
}
