use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::validate::{find_cycles, validate_schema, Violation};
use super::{CidError, ElementId, IntentSchema};

/// Element layers `ℓ₁..ℓ_H`, stored zero-based but numbered from 1 in every
/// public accessor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayeredElements {
    pub layers: Vec<BTreeSet<ElementId>>,
    pub schema_ref: String,
}

impl LayeredElements {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer `k`, 1-based.
    pub fn layer(&self, k: usize) -> Option<&BTreeSet<ElementId>> {
        k.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// 1-based layer index of an element.
    pub fn layer_of(&self, id: &ElementId) -> Option<usize> {
        self.layers.iter().position(|l| l.contains(id)).map(|i| i + 1)
    }

    pub fn element_count(&self) -> usize {
        self.layers.iter().map(BTreeSet::len).sum()
    }

    pub fn as_id_lists(&self) -> Vec<Vec<String>> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|e| e.0.clone()).collect())
            .collect()
    }
}

/// Longest-path layering by repeated Kahn peeling.
///
/// Self-loops are stripped first. Any other structural defect is an error:
/// a cycle yields [`CidError::Cycle`], other violations [`CidError::Invalid`].
pub fn induce_layers(schema: &IntentSchema) -> Result<LayeredElements, CidError> {
    let (report, sanitized) = validate_schema(schema);
    if let Some(v) = report.errors.iter().find(|v| !matches!(v, Violation::Cycle { .. })) {
        return Err(CidError::Invalid(v.to_string()));
    }

    let mut remaining: BTreeMap<&ElementId, BTreeSet<&ElementId>> = sanitized
        .elements
        .iter()
        .map(|e| (&e.id, sanitized.prerequisites_of(&e.id).iter().collect()))
        .collect();
    let mut layers = Vec::new();
    while !remaining.is_empty() {
        let ready: BTreeSet<ElementId> = remaining
            .iter()
            .filter(|(_, pres)| pres.is_empty())
            .map(|(id, _)| (*id).clone())
            .collect();
        if ready.is_empty() {
            let witness = find_cycles(&sanitized)
                .into_iter()
                .next()
                .unwrap_or_default();
            return Err(CidError::Cycle { witness });
        }
        remaining.retain(|id, _| !ready.contains(*id));
        for pres in remaining.values_mut() {
            pres.retain(|p| !ready.contains(*p));
        }
        layers.push(ready);
    }

    Ok(LayeredElements {
        layers,
        schema_ref: schema.key(),
    })
}
