//! Layer-by-layer clarification sessions.
//!
//! A session asks one table per non-vacuous layer, in layer order, so an
//! element is only ever asked once all of its prerequisites have been
//! answered or explicitly skipped. [`check_conflicts`] replays any
//! trajectory, engine-driven or imported, and reports questions that broke
//! that order.

mod conflicts;
mod record;
mod session;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Decoding};
use crate::cid::{CidError, ElementId};
use crate::prompts::PromptTemplates;

pub use conflicts::{check_conflicts, ConflictRecord, ReplayError};
pub use record::{
    QuestionRecord, ResponseRecord, SchemaRef, TableRecord, TrajectoryRecord, TurnRecord,
};
pub use session::{
    abort, apply_user_response, apply_user_response_with, draft_table, final_context,
    finalize_output, generate_table, install_table, SessionState, SessionStatus,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInstruction {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl UserInstruction {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ClarifierError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ClarifierError::EmptyInstruction);
        }
        Ok(UserInstruction {
            id: id.into(),
            text,
            metadata: BTreeMap::new(),
        })
    }
}

/// A user's answer to one question. Serialized as `{kind, value}` with
/// `value: null` for skips.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "AnswerDoc", try_from = "AnswerDoc")]
pub enum Answer {
    Option(String),
    FreeText(String),
    Skipped,
}

impl Answer {
    pub fn value(&self) -> Option<&str> {
        match self {
            Answer::Option(v) | Answer::FreeText(v) => Some(v),
            Answer::Skipped => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AnswerDoc {
    kind: String,
    #[serde(default)]
    value: Option<String>,
}

impl From<Answer> for AnswerDoc {
    fn from(a: Answer) -> Self {
        match a {
            Answer::Option(v) => AnswerDoc {
                kind: "option".into(),
                value: Some(v),
            },
            Answer::FreeText(v) => AnswerDoc {
                kind: "free_text".into(),
                value: Some(v),
            },
            Answer::Skipped => AnswerDoc {
                kind: "skipped".into(),
                value: None,
            },
        }
    }
}

impl TryFrom<AnswerDoc> for Answer {
    type Error = String;

    fn try_from(d: AnswerDoc) -> Result<Self, String> {
        match (d.kind.as_str(), d.value) {
            ("option", Some(v)) => Ok(Answer::Option(v)),
            ("free_text", Some(v)) => Ok(Answer::FreeText(v)),
            ("skipped", _) => Ok(Answer::Skipped),
            (k @ ("option" | "free_text"), None) => Err(format!("answer kind {k} requires a value")),
            (k, _) => Err(format!("unknown answer kind {k:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub element_id: ElementId,
    pub question_text: String,
    pub options: Vec<String>,
    pub allow_free_text: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationTable {
    pub turn_index: usize,
    pub layer_index: usize,
    pub questions: Vec<ClarificationQuestion>,
}

impl ClarificationTable {
    pub fn question(&self, id: &ElementId) -> Option<&ClarificationQuestion> {
        self.questions.iter().find(|q| &q.element_id == id)
    }

    pub fn element_ids(&self) -> BTreeSet<ElementId> {
        self.questions.iter().map(|q| q.element_id.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserResponse {
    pub turn_index: usize,
    pub answers: BTreeMap<ElementId, Answer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub table: ClarificationTable,
    pub response: UserResponse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction: UserInstruction,
    pub turns: Vec<Turn>,
    pub final_output: Option<String>,
    pub resolved: BTreeMap<ElementId, String>,
    /// Elements the user skipped.
    #[serde(default)]
    pub no_preference: BTreeSet<ElementId>,
    /// Answers that changed an already-resolved element.
    #[serde(default)]
    pub contradictions: Vec<String>,
}

impl Trajectory {
    pub fn new(instruction: UserInstruction) -> Self {
        Trajectory {
            instruction,
            turns: Vec::new(),
            final_output: None,
            resolved: BTreeMap::new(),
            no_preference: BTreeSet::new(),
            contradictions: Vec::new(),
        }
    }

    /// Turn count `K`.
    pub fn turn_count(&self) -> usize {
        self.turns.len()
    }

    pub fn question_count(&self) -> usize {
        self.turns.iter().map(|t| t.table.questions.len()).sum()
    }

    pub fn asked_elements(&self) -> BTreeSet<ElementId> {
        self.turns.iter().flat_map(|t| t.table.element_ids()).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ClarifierConfig {
    /// Upper bound on suggested options per question.
    pub max_options: usize,
    pub max_repairs: usize,
    pub grace_turns: usize,
    /// Let free-text answers settle elements of later layers, via the
    /// backend.
    pub cross_layer_extraction: bool,
    /// Pull unresolved later-layer elements whose prerequisites are all
    /// settled into the current table.
    pub merge_independent_layers: bool,
    pub decoding: Decoding,
    #[serde(skip)]
    pub templates: Arc<PromptTemplates>,
}

impl Default for ClarifierConfig {
    fn default() -> Self {
        ClarifierConfig {
            max_options: 5,
            max_repairs: 2,
            grace_turns: 0,
            cross_layer_extraction: false,
            merge_independent_layers: false,
            decoding: Decoding::default(),
            templates: Arc::new(PromptTemplates::default()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClarifierError {
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("illegal state: {0}")]
    IllegalState(String),
    #[error("response is for turn {got}, but the current turn is {expected}")]
    TurnMismatch { expected: usize, got: usize },
    #[error("element {0} is not part of the current table")]
    UnknownElement(ElementId),
    #[error("invalid answer for {element}: {reason}")]
    InvalidAnswer { element: ElementId, reason: String },
    #[error("table generation failed after {attempts} attempts: {}", .errors.join("; "))]
    Generation { attempts: usize, errors: Vec<String> },
    #[error(transparent)]
    Schema(#[from] CidError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}
