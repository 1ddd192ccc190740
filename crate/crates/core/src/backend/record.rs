use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;

use super::{
    fingerprint, BackendError, Capabilities, Capability, ChatBackend, ChatMessage, ChatRequest,
    ChatResponse, FixtureResponse, ScoredContinuation, StubScript,
};

/// Pass-through backend that remembers every answer by fingerprint so a run
/// can later be replayed offline by a strict [`super::StubBackend`].
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    recorded: Mutex<BTreeMap<String, FixtureResponse>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        RecordingBackend {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn script(&self) -> StubScript {
        StubScript {
            id: self.inner.id(),
            strict: true,
            capabilities: self.inner.capabilities(),
            fixtures: self.recorded.lock().clone(),
            ..StubScript::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let mut bytes = serde_json::to_vec_pretty(&self.script()).expect("script serializes");
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    fn remember(&self, fp: String, f: FixtureResponse) {
        self.recorded.lock().insert(fp, f);
    }
}

impl ChatBackend for RecordingBackend {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.inner.chat_complete(request)?;
        let fp = fingerprint(Capability::Chat, &request.messages, Some(&request.decoding));
        self.remember(fp, FixtureResponse::text(resp.text.clone()));
        Ok(resp)
    }

    fn score_continuation(
        &self,
        context: &[ChatMessage],
        continuation: &str,
    ) -> Result<ScoredContinuation, BackendError> {
        let scored = self.inner.score_continuation(context, continuation)?;
        let mut messages = context.to_vec();
        messages.push(ChatMessage::assistant(continuation));
        self.remember(
            fingerprint(Capability::Score, &messages, None),
            FixtureResponse::Scores {
                tokens: scored.tokens.clone(),
                probs: scored.probs.clone(),
            },
        );
        Ok(scored)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let vectors = self.inner.embed(texts)?;
        if !texts.is_empty() {
            let messages: Vec<_> = texts.iter().map(ChatMessage::user).collect();
            self.remember(
                fingerprint(Capability::Embed, &messages, None),
                FixtureResponse::Vectors {
                    vectors: vectors.clone(),
                },
            );
        }
        Ok(vectors)
    }
}
