//! Complex-intent decomposition (CID) schemas.
//!
//! A schema names the elements of one intent and, for each element, the
//! elements that must be settled before it can be asked about. From those
//! prerequisites we induce layers: every element lands in the earliest layer
//! after all of its prerequisites, and each layer becomes one clarification
//! turn.

mod format;
mod layers;
mod store;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::text::canonical_label;

pub use format::{canonicalize_json, export_dataset, import_dataset, seed_dataset, FORMAT_VERSION};
pub use layers::{induce_layers, LayeredElements};
pub use store::{lookup, CidStore};
pub use validate::{validate_dataset, validate_schema, ValidationReport, Violation, Warning};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub String);

impl ElementId {
    pub fn new(id: impl Into<String>) -> Self {
        ElementId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ElementId {
    fn from(s: &str) -> Self {
        ElementId(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementDef {
    pub id: ElementId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ElementDef {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        ElementDef {
            id: ElementId::new(id),
            name: name.into(),
            description: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceKind {
    Curated,
    Constructed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Provenance {
    pub fn curated() -> Self {
        Provenance {
            kind: ProvenanceKind::Curated,
            source: None,
        }
    }

    pub fn constructed(source: impl Into<String>) -> Self {
        Provenance {
            kind: ProvenanceKind::Constructed,
            source: Some(source.into()),
        }
    }
}

/// One intent with its elements and prerequisite map.
///
/// The prerequisite lists keep the order they were written in so that a
/// dataset round-trips without reordering. Elements with no entry in the map
/// have no prerequisites.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSchema {
    pub domain: String,
    pub intent: String,
    pub elements: Vec<ElementDef>,
    pub prerequisites: BTreeMap<ElementId, Vec<ElementId>>,
    pub provenance: Provenance,
}

impl IntentSchema {
    pub fn element(&self, id: &ElementId) -> Option<&ElementDef> {
        self.elements.iter().find(|e| &e.id == id)
    }

    pub fn position(&self, id: &ElementId) -> Option<usize> {
        self.elements.iter().position(|e| &e.id == id)
    }

    pub fn element_ids(&self) -> BTreeSet<ElementId> {
        self.elements.iter().map(|e| e.id.clone()).collect()
    }

    /// Prerequisites of `id`, empty when the element has no entry.
    pub fn prerequisites_of(&self, id: &ElementId) -> &[ElementId] {
        self.prerequisites.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `"domain / intent"` in canonical form; used as a schema reference.
    pub fn key(&self) -> String {
        schema_key(&self.domain, &self.intent)
    }

    /// Resolve an element by id or by canonical name.
    pub fn resolve_element(&self, key: &str) -> Option<&ElementDef> {
        let id = ElementId::new(key);
        self.element(&id).or_else(|| {
            let wanted = canonical_label(key);
            self.elements
                .iter()
                .find(|e| canonical_label(&e.name) == wanted)
        })
    }
}

pub fn schema_key(domain: &str, intent: &str) -> String {
    format!("{} / {}", canonical_label(domain), canonical_label(intent))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CidDataset {
    pub domains: Vec<String>,
    pub intents: Vec<String>,
    pub schemas: Vec<IntentSchema>,
}

impl CidDataset {
    /// Registry label equal to `label` under canonical comparison.
    pub fn canonical_domain(&self, label: &str) -> Option<&str> {
        let c = canonical_label(label);
        self.domains
            .iter()
            .find(|d| canonical_label(d) == c)
            .map(String::as_str)
    }

    pub fn canonical_intent(&self, label: &str) -> Option<&str> {
        let c = canonical_label(label);
        self.intents
            .iter()
            .find(|z| canonical_label(z) == c)
            .map(String::as_str)
    }

    /// Add a schema, registering its labels. Fails on a duplicate pair.
    pub fn insert(&mut self, schema: IntentSchema) -> Result<(), CidError> {
        if lookup(self, &schema.domain, &schema.intent).is_some() {
            return Err(CidError::Duplicate {
                domain: schema.domain,
                intent: schema.intent,
            });
        }
        if self.canonical_domain(&schema.domain).is_none() {
            self.domains.push(schema.domain.clone());
        }
        if self.canonical_intent(&schema.intent).is_none() {
            self.intents.push(schema.intent.clone());
        }
        self.schemas.push(schema);
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CidError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema {schema}: {message}")]
    SchemaParse { schema: String, message: String },
    #[error("unsupported CID format version {found} (supported: {supported})")]
    SchemaVersion { found: u64, supported: u64 },
    #[error("duplicate schema for ({domain}, {intent})")]
    Duplicate { domain: String, intent: String },
    #[error("schema {schema}: label {label:?} is not in the {registry} registry")]
    Registry {
        schema: String,
        registry: &'static str,
        label: String,
    },
    #[error("cycle among prerequisites: {}", format_path(.witness))]
    Cycle { witness: Vec<ElementId> },
    #[error("schema is invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn format_path(path: &[ElementId]) -> String {
    path.iter()
        .map(ElementId::as_str)
        .collect::<Vec<_>>()
        .join("→")
}
