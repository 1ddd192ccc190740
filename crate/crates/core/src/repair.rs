//! Ask a model for structured output, validating and re-asking with the
//! validator's complaints until it complies or the retry budget runs out.

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, Decoding, ResponseFormat, TaskHint};
use crate::prompts::PromptTemplates;

#[derive(Debug)]
pub(crate) enum AskError {
    Backend(BackendError),
    /// Every attempt was rejected; carries the last rejection.
    Exhausted { attempts: usize, errors: Vec<String> },
}

impl From<BackendError> for AskError {
    fn from(e: BackendError) -> Self {
        AskError::Backend(e)
    }
}

pub(crate) struct Asked<T> {
    pub value: T,
    pub retries: usize,
}

pub(crate) struct Ask<'a> {
    pub backend: &'a dyn ChatBackend,
    pub templates: &'a PromptTemplates,
    pub decoding: Decoding,
    pub max_repairs: usize,
}

impl Ask<'_> {
    pub fn run<T>(
        &self,
        prompt: String,
        hint: TaskHint,
        mut validate: impl FnMut(&str) -> Result<T, Vec<String>>,
    ) -> Result<Asked<T>, AskError> {
        let mut messages = vec![ChatMessage::user(prompt)];
        let mut last = Vec::new();
        for attempt in 0..=self.max_repairs {
            let request = ChatRequest {
                messages: messages.clone(),
                decoding: self.decoding.clone(),
                response_format: ResponseFormat::Json,
                task: Some(hint.clone()),
            };
            let reply = self.backend.chat_complete(&request)?;
            match validate(&reply.text) {
                Ok(value) => {
                    return Ok(Asked {
                        value,
                        retries: attempt,
                    })
                }
                Err(errors) => {
                    log::debug!("attempt {attempt} rejected: {errors:?}");
                    let listing = errors.iter().map(|e| format!("- {e}")).collect::<Vec<_>>().join("\n");
                    messages.push(ChatMessage::assistant(reply.text));
                    messages.push(ChatMessage::user(self.templates.render("repair", &[("errors", &listing)])));
                    last = errors;
                }
            }
        }
        Err(AskError::Exhausted {
            attempts: self.max_repairs + 1,
            errors: last,
        })
    }
}
