//! Structured payloads attached to model requests and the JSON shapes the
//! engine expects back.
//!
//! Prompts carry the same information as prose; these types are the
//! machine-checkable half. The engine parses every model answer into one of
//! the `*Draft`/`*Answer` types and validates it before use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cid::{ElementDef, ElementId};
use crate::clarifier::Answer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizePayload {
    pub instruction: String,
    pub domains: Vec<String>,
    pub intents: Vec<String>,
    /// `(domain, intent)` pairs that already have a schema.
    pub pairs: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizeAnswer {
    pub domain: String,
    pub intent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarDoc {
    pub domain: String,
    pub intent: String,
    pub elements: Vec<ElementDef>,
    pub prerequisites: BTreeMap<ElementId, Vec<ElementId>>,
    pub layers: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructPayload {
    pub instruction: String,
    pub domain: String,
    pub intent: String,
    pub exemplars: Vec<ExemplarDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaDraft {
    pub elements: Vec<ElementDef>,
    pub prerequisites: BTreeMap<ElementId, Vec<ElementId>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementBrief {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl From<&ElementDef> for ElementBrief {
    fn from(e: &ElementDef) -> Self {
        ElementBrief {
            id: e.id.0.clone(),
            name: e.name.clone(),
            description: e.description.clone(),
        }
    }
}

/// One settled element. `value: None` means the user expressed no
/// preference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettledEntry {
    pub id: String,
    pub name: String,
    pub value: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TablePayload {
    pub instruction: String,
    pub layer: usize,
    pub elements: Vec<ElementBrief>,
    pub settled: Vec<SettledEntry>,
    pub max_options: usize,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionDraft {
    pub element_id: String,
    pub text: String,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default = "default_true")]
    pub allow_free_text: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDraft {
    pub questions: Vec<QuestionDraft>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalizePayload {
    pub instruction: String,
    pub domain: String,
    pub intent: String,
    pub settled: Vec<SettledEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimQuestion {
    pub element_id: String,
    pub name: String,
    pub text: String,
    pub options: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatePayload {
    pub persona: String,
    pub questions: Vec<SimQuestion>,
    pub ground_truth: BTreeMap<String, String>,
    pub skip_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSetDraft {
    pub answers: BTreeMap<String, Answer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractPayload {
    pub text: String,
    pub elements: Vec<ElementBrief>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgePayload {
    pub question: String,
    pub option: String,
}

/// Pull the first JSON value out of model text, tolerating a fenced code
/// block or prose around it.
pub fn extract_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, String> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    let start = trimmed
        .find(['{', '['])
        .ok_or_else(|| "response contains no JSON value".to_owned())?;
    let mut de = serde_json::Deserializer::from_str(&trimmed[start..]).into_iter::<T>();
    match de.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(format!("malformed JSON: {e}")),
        None => Err("response contains no JSON value".to_owned()),
    }
}
