//! The versioned JSON file format for CID datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{lookup, CidDataset, CidError, ElementDef, ElementId, IntentSchema, Provenance};
use crate::text::canonical_label;

pub const FORMAT_VERSION: u64 = 1;

const SEED: &str = include_str!("../../data/cid_seed.json");

#[derive(Serialize)]
struct FileOut<'a> {
    version: u64,
    domains: &'a [String],
    intents: &'a [String],
    schemas: &'a [IntentSchema],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDoc {
    domain: String,
    intent: String,
    elements: Vec<ElementDef>,
    prerequisites: BTreeMap<ElementId, Vec<ElementId>>,
    provenance: Provenance,
}

/// The curated seed dataset shipped with the crate.
pub fn seed_dataset() -> CidDataset {
    import_dataset(SEED.as_bytes()).expect("embedded seed dataset is valid")
}

pub fn import_dataset(bytes: &[u8]) -> Result<CidDataset, CidError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| CidError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let top = root.as_object().ok_or_else(|| CidError::Parse {
        line: 1,
        column: 1,
        message: "top level must be an object".into(),
    })?;

    let version = top
        .get("version")
        .ok_or_else(|| top_error("missing key \"version\""))?
        .as_u64()
        .ok_or_else(|| top_error("\"version\" must be a non-negative integer"))?;
    if version != FORMAT_VERSION {
        return Err(CidError::SchemaVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let labels = |key: &str| -> Result<Vec<String>, CidError> {
        let v = top
            .get(key)
            .ok_or_else(|| top_error(&format!("missing key {key:?}")))?;
        serde_json::from_value::<Vec<String>>(v.clone())
            .map_err(|e| top_error(&format!("{key:?}: {e}")))
    };
    let mut dataset = CidDataset {
        domains: dedup_labels(labels("domains")?),
        intents: dedup_labels(labels("intents")?),
        schemas: Vec::new(),
    };

    let schemas = top
        .get("schemas")
        .ok_or_else(|| top_error("missing key \"schemas\""))?
        .as_array()
        .ok_or_else(|| top_error("\"schemas\" must be an array"))?;
    for (i, raw) in schemas.iter().enumerate() {
        let name = schema_name(i, raw);
        let doc: SchemaDoc =
            serde_json::from_value(raw.clone()).map_err(|e| CidError::SchemaParse {
                schema: name.clone(),
                message: e.to_string(),
            })?;
        for (registry, label, known) in [
            ("domain", &doc.domain, dataset.canonical_domain(&doc.domain).is_some()),
            ("intent", &doc.intent, dataset.canonical_intent(&doc.intent).is_some()),
        ] {
            if !known {
                return Err(CidError::Registry {
                    schema: name,
                    registry,
                    label: label.clone(),
                });
            }
        }
        if lookup(&dataset, &doc.domain, &doc.intent).is_some() {
            return Err(CidError::Duplicate {
                domain: doc.domain,
                intent: doc.intent,
            });
        }
        dataset.schemas.push(IntentSchema {
            domain: doc.domain,
            intent: doc.intent,
            elements: doc.elements,
            prerequisites: doc.prerequisites,
            provenance: doc.provenance,
        });
    }
    Ok(dataset)
}

pub fn export_dataset(dataset: &CidDataset) -> Vec<u8> {
    let out = FileOut {
        version: FORMAT_VERSION,
        domains: &dataset.domains,
        intents: &dataset.intents,
        schemas: &dataset.schemas,
    };
    let mut bytes = serde_json::to_vec_pretty(&out).expect("dataset serializes");
    bytes.push(b'\n');
    bytes
}

/// Key-sorted compact rendering used to compare documents for equality.
pub fn canonicalize_json(bytes: &[u8]) -> Result<String, serde_json::Error> {
    let v: Value = serde_json::from_slice(bytes)?;
    serde_json::to_string(&v)
}

fn top_error(message: &str) -> CidError {
    CidError::Parse {
        line: 1,
        column: 1,
        message: message.to_owned(),
    }
}

fn schema_name(index: usize, raw: &Value) -> String {
    let field = |k: &str| raw.get(k).and_then(Value::as_str).unwrap_or("?").to_owned();
    format!("#{index} ({} / {})", field("domain"), field("intent"))
}

fn dedup_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    labels
        .into_iter()
        .filter(|l| seen.insert(canonical_label(l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cid::{induce_layers, validate_schema, ProvenanceKind};

    #[test]
    fn seed_round_trips() {
        let ds = seed_dataset();
        assert!(ds.schemas.len() >= 10);
        let exported = export_dataset(&ds);
        assert_eq!(
            canonicalize_json(&exported).unwrap(),
            canonicalize_json(SEED.as_bytes()).unwrap()
        );
    }

    #[test]
    fn seed_schemas_all_validate_and_layer() {
        for s in &seed_dataset().schemas {
            let (report, sanitized) = validate_schema(s);
            assert!(report.is_valid(), "{}: {:?}", s.key(), report.errors);
            induce_layers(&sanitized).unwrap();
            assert_eq!(s.provenance.kind, ProvenanceKind::Curated);
        }
    }

    #[test]
    fn missing_prerequisites_names_schema() {
        let doc = r#"{"version":1,"domains":["Travel"],"intents":["Plan a trip"],
            "schemas":[{"domain":"Travel","intent":"Plan a trip",
              "elements":[{"id":"e1","name":"Destination"}],
              "provenance":{"kind":"curated"}}]}"#;
        match import_dataset(doc.as_bytes()) {
            Err(CidError::SchemaParse { schema, message }) => {
                assert!(schema.contains("Plan a trip"));
                assert!(message.contains("prerequisites"));
            }
            other => panic!("expected SchemaParse, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_pair_is_rejected() {
        let schema = r#"{"domain":"Travel","intent":"Plan a trip","elements":[],
            "prerequisites":{},"provenance":{"kind":"curated"}}"#;
        let doc = format!(
            r#"{{"version":1,"domains":["Travel"],"intents":["Plan a trip"],"schemas":[{schema},{schema}]}}"#
        );
        assert!(matches!(
            import_dataset(doc.as_bytes()),
            Err(CidError::Duplicate { .. })
        ));
    }

    #[test]
    fn unknown_version_and_syntax_errors() {
        let doc = r#"{"version":2,"domains":[],"intents":[],"schemas":[]}"#;
        assert!(matches!(
            import_dataset(doc.as_bytes()),
            Err(CidError::SchemaVersion { found: 2, .. })
        ));
        match import_dataset(b"{\n  \"version\": 1,\n  oops") {
            Err(CidError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn registries_dedup_case_insensitively() {
        let doc = r#"{"version":1,"domains":["Travel","travel "],"intents":["A"],"schemas":[]}"#;
        let ds = import_dataset(doc.as_bytes()).unwrap();
        assert_eq!(ds.domains, vec!["Travel".to_string()]);
    }

    #[test]
    fn unregistered_label_is_rejected() {
        let doc = r#"{"version":1,"domains":["Travel"],"intents":[],
            "schemas":[{"domain":"Travel","intent":"Plan a trip","elements":[],
            "prerequisites":{},"provenance":{"kind":"curated"}}]}"#;
        assert!(matches!(
            import_dataset(doc.as_bytes()),
            Err(CidError::Registry { registry: "intent", .. })
        ));
    }
}
