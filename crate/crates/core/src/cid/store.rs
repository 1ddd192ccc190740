use std::sync::Arc;

use parking_lot::RwLock;

use super::{CidDataset, CidError, IntentSchema};
use crate::text::canonical_label;

/// Exact lookup on canonical `(domain, intent)` labels.
pub fn lookup<'a>(dataset: &'a CidDataset, domain: &str, intent: &str) -> Option<&'a IntentSchema> {
    let d = canonical_label(domain);
    let z = canonical_label(intent);
    dataset
        .schemas
        .iter()
        .find(|s| canonical_label(&s.domain) == d && canonical_label(&s.intent) == z)
}

/// Shared dataset handle. Readers take immutable snapshots; writers replace
/// the whole snapshot, so a reader never sees a half-applied change.
#[derive(Debug, Default)]
pub struct CidStore {
    current: RwLock<Arc<CidDataset>>,
}

impl CidStore {
    pub fn new(dataset: CidDataset) -> Self {
        CidStore {
            current: RwLock::new(Arc::new(dataset)),
        }
    }

    pub fn snapshot(&self) -> Arc<CidDataset> {
        self.current.read().clone()
    }

    pub fn replace(&self, dataset: CidDataset) {
        *self.current.write() = Arc::new(dataset);
    }

    /// Copy-on-write insert of one schema.
    pub fn insert(&self, schema: IntentSchema) -> Result<(), CidError> {
        let mut guard = self.current.write();
        let mut next = CidDataset::clone(&guard);
        next.insert(schema)?;
        *guard = Arc::new(next);
        Ok(())
    }
}
