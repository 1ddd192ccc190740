//! Pluggable similarity between an instruction and candidate documents.

use crate::backend::{BackendError, ChatBackend};
use crate::cid::IntentSchema;
use crate::text::{jaccard, token_set};

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Similarity of `query` to each document, same order as `docs`.
    fn scores(&self, query: &str, docs: &[String]) -> Result<Vec<f64>, BackendError>;
}

/// Token-set Jaccard over case-folded alphanumeric tokens. Scores lie in
/// `[0, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalProvider;

impl EmbeddingProvider for LexicalProvider {
    fn name(&self) -> &str {
        "lexical"
    }

    fn scores(&self, query: &str, docs: &[String]) -> Result<Vec<f64>, BackendError> {
        let q = token_set(query);
        Ok(docs.iter().map(|d| jaccard(&q, &token_set(d))).collect())
    }
}

/// Cosine similarity of backend embeddings.
pub struct BackendEmbeddingProvider<B> {
    pub backend: B,
}

impl<B: ChatBackend> EmbeddingProvider for BackendEmbeddingProvider<B> {
    fn name(&self) -> &str {
        "embedding"
    }

    fn scores(&self, query: &str, docs: &[String]) -> Result<Vec<f64>, BackendError> {
        let mut texts = Vec::with_capacity(docs.len() + 1);
        texts.push(query.to_owned());
        texts.extend(docs.iter().cloned());
        let vecs = self.backend.embed(&texts)?;
        if vecs.len() != texts.len() {
            return Err(BackendError::InvalidResponse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                vecs.len()
            )));
        }
        Ok(vecs[1..].iter().map(|v| cosine(&vecs[0], v)).collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Text a schema is retrieved by: its intent label followed by its element
/// names.
pub fn schema_document(schema: &IntentSchema) -> String {
    let mut s = schema.intent.clone();
    for e in &schema.elements {
        s.push(' ');
        s.push_str(&e.name);
    }
    s
}
