//! Instruction to layered elements, by retrieval from the curated dataset
//! or by few-shot construction when the intent has no schema.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatBackend, Decoding, TaskHint, TaskKind};
use crate::cid::{
    induce_layers, lookup, schema_key, validate_schema, CidDataset, CidError, IntentSchema, LayeredElements,
    Provenance, ProvenanceKind,
};
use crate::clarifier::UserInstruction;
use crate::prompts::PromptTemplates;
use crate::protocol::{extract_json, ConstructPayload, ExemplarDoc, RecognizeAnswer, RecognizePayload, SchemaDraft};
use crate::repair::{Ask, AskError};
use crate::similarity::{schema_document, EmbeddingProvider};
use crate::text::canonical_label;

#[derive(Clone, Debug)]
pub struct DecomposerConfig {
    /// Exemplars retrieved for construction.
    pub exemplars: usize,
    pub max_repairs: usize,
    pub decoding: Decoding,
    pub templates: Arc<PromptTemplates>,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        DecomposerConfig {
            exemplars: 3,
            max_repairs: 2,
            decoding: Decoding::default(),
            templates: Arc::new(PromptTemplates::default()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecomposeError {
    #[error("dataset has no schemas to retrieve from")]
    EmptyDataset,
    #[error("recognition failed: {0}")]
    Recognition(String),
    #[error("schema construction failed after {attempts} attempts: {}", .errors.join("; "))]
    Construction { attempts: usize, errors: Vec<String> },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Cid(#[from] CidError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub domain: String,
    pub intent: String,
    pub retries: usize,
    /// The backend never produced an in-set answer; labels come from the
    /// similarity fallback.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct FewShotPrompt {
    pub exemplars: Vec<(IntentSchema, LayeredElements)>,
    pub target_intent: String,
    pub target_instruction: UserInstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constructed {
    pub schema: IntentSchema,
    pub retries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionPath {
    Retrieved,
    Constructed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub domain: String,
    pub intent: String,
    pub schema: IntentSchema,
    pub layered: LayeredElements,
    pub path: DecompositionPath,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub similarity_scores: Vec<(String, f64)>,
    pub recognition: Recognition,
}

fn ask_error(e: AskError) -> Result<(), (usize, Vec<String>, Option<BackendError>)> {
    match e {
        AskError::Backend(b) => Err((0, Vec::new(), Some(b))),
        AskError::Exhausted { attempts, errors } => Err((attempts, errors, None)),
    }
}

/// Best label by score, ties broken by canonical label ascending.
fn best_label(labels: &[String], scores: &[f64]) -> Option<(String, f64)> {
    labels
        .iter()
        .zip(scores)
        .max_by(|(la, sa), (lb, sb)| {
            sa.total_cmp(sb)
                .then_with(|| canonical_label(lb).cmp(&canonical_label(la)))
        })
        .map(|(l, s)| (l.clone(), *s))
}

/// Map an instruction onto the closed domain and intent registries.
pub fn recognize_domain_intent(
    x: &UserInstruction,
    dataset: &CidDataset,
    backend: &dyn ChatBackend,
    provider: &dyn EmbeddingProvider,
    config: &DecomposerConfig,
) -> Result<Recognition, DecomposeError> {
    if dataset.domains.is_empty() || dataset.intents.is_empty() {
        return Err(DecomposeError::Recognition("domain or intent registry is empty".into()));
    }
    let pairs: Vec<(String, String)> = dataset
        .schemas
        .iter()
        .map(|s| (s.domain.clone(), s.intent.clone()))
        .collect();
    let prompt = config.templates.render(
        "recognize",
        &[
            ("instruction", &x.text),
            ("domains", &dataset.domains.join(", ")),
            ("intents", &dataset.intents.join(", ")),
        ],
    );
    let payload = RecognizePayload {
        instruction: x.text.clone(),
        domains: dataset.domains.clone(),
        intents: dataset.intents.clone(),
        pairs,
    };
    let hint = TaskHint {
        kind: TaskKind::Recognize,
        payload: serde_json::to_value(&payload).expect("payload serializes"),
    };
    let ask = Ask {
        backend,
        templates: &config.templates,
        decoding: config.decoding.clone(),
        max_repairs: config.max_repairs,
    };
    let asked = ask.run(prompt, hint, |text| {
        let a: RecognizeAnswer = extract_json(text).map_err(|e| vec![e])?;
        let mut errors = Vec::new();
        let d = dataset.canonical_domain(&a.domain);
        let z = dataset.canonical_intent(&a.intent);
        if d.is_none() {
            errors.push(format!("domain {:?} is not one of the listed domains", a.domain));
        }
        if z.is_none() {
            errors.push(format!("intent {:?} is not one of the listed intents", a.intent));
        }
        match (d, z) {
            (Some(d), Some(z)) => Ok((d.to_owned(), z.to_owned())),
            _ => Err(errors),
        }
    });
    match asked {
        Ok(a) => {
            let (domain, intent) = a.value;
            Ok(Recognition {
                domain: home_domain(dataset, &domain, &intent),
                intent,
                retries: a.retries,
                fallback: false,
            })
        }
        Err(e) => {
            let (attempts, errors, backend_err) = ask_error(e).unwrap_err();
            if let Some(b) = backend_err {
                return Err(b.into());
            }
            log::warn!("recognition out of set after {attempts} attempts ({}); using similarity", errors.join("; "));
            let scores = provider.scores(&x.text, &dataset.intents)?;
            let (intent, _) = best_label(&dataset.intents, &scores)
                .ok_or_else(|| DecomposeError::Recognition("no intent to fall back to".into()))?;
            let domain = match dataset.schemas.iter().find(|s| canonical_label(&s.intent) == canonical_label(&intent)) {
                Some(s) => s.domain.clone(),
                None => {
                    let ds = provider.scores(&x.text, &dataset.domains)?;
                    best_label(&dataset.domains, &ds)
                        .map(|(d, _)| d)
                        .ok_or_else(|| DecomposeError::Recognition("no domain to fall back to".into()))?
                }
            };
            Ok(Recognition {
                domain,
                intent,
                retries: attempts.saturating_sub(1),
                fallback: true,
            })
        }
    }
}

/// An intent stored under exactly one domain is filed there even when the
/// model named another domain.
fn home_domain(dataset: &CidDataset, domain: &str, intent: &str) -> String {
    if lookup(dataset, domain, intent).is_some() {
        return domain.to_owned();
    }
    let homes: Vec<&IntentSchema> = dataset
        .schemas
        .iter()
        .filter(|s| canonical_label(&s.intent) == canonical_label(intent))
        .collect();
    match homes.as_slice() {
        [only] => only.domain.clone(),
        _ => domain.to_owned(),
    }
}

/// Top-`k` schemas by similarity to the instruction. Ties go to the
/// canonically smaller intent label.
pub fn retrieve_similar_intents(
    x: &UserInstruction,
    dataset: &CidDataset,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<(IntentSchema, f64)>, DecomposeError> {
    if dataset.schemas.is_empty() {
        return Err(DecomposeError::EmptyDataset);
    }
    let docs: Vec<String> = dataset.schemas.iter().map(schema_document).collect();
    let scores = provider.scores(&x.text, &docs)?;
    let mut ranked: Vec<(IntentSchema, f64)> = dataset.schemas.iter().cloned().zip(scores).collect();
    ranked.sort_by(|(a, sa), (b, sb)| {
        sb.total_cmp(sa)
            .then_with(|| canonical_label(&a.intent).cmp(&canonical_label(&b.intent)))
            .then_with(|| canonical_label(&a.domain).cmp(&canonical_label(&b.domain)))
    });
    ranked.truncate(k.max(1));
    Ok(ranked)
}

fn exemplar_doc(schema: &IntentSchema, layered: &LayeredElements) -> ExemplarDoc {
    ExemplarDoc {
        domain: schema.domain.clone(),
        intent: schema.intent.clone(),
        elements: schema.elements.clone(),
        prerequisites: schema.prerequisites.clone(),
        layers: layered.as_id_lists(),
    }
}

/// Ask the backend for a new schema modelled on the exemplars.
pub fn construct_schema_fewshot(
    domain: &str,
    prompt: &FewShotPrompt,
    backend: &dyn ChatBackend,
    config: &DecomposerConfig,
) -> Result<Constructed, DecomposeError> {
    if prompt.exemplars.is_empty() {
        return Err(DecomposeError::Construction {
            attempts: 0,
            errors: vec!["no exemplars".into()],
        });
    }
    let docs: Vec<ExemplarDoc> = prompt.exemplars.iter().map(|(s, l)| exemplar_doc(s, l)).collect();
    let exemplar_text = docs
        .iter()
        .map(|d| serde_json::to_string(d).expect("exemplar serializes"))
        .collect::<Vec<_>>()
        .join("\n");
    let text = config.templates.render(
        "construct",
        &[
            ("instruction", &prompt.target_instruction.text),
            ("intent", &prompt.target_intent),
            ("domain", domain),
            ("exemplars", &exemplar_text),
        ],
    );
    let payload = ConstructPayload {
        instruction: prompt.target_instruction.text.clone(),
        domain: domain.to_owned(),
        intent: prompt.target_intent.clone(),
        exemplars: docs,
    };
    let hint = TaskHint {
        kind: TaskKind::ConstructSchema,
        payload: serde_json::to_value(&payload).expect("payload serializes"),
    };
    let ask = Ask {
        backend,
        templates: &config.templates,
        decoding: config.decoding.clone(),
        max_repairs: config.max_repairs,
    };
    let source = backend.id();
    let asked = ask.run(text, hint, |reply| {
        let draft: SchemaDraft = extract_json(reply).map_err(|e| vec![e])?;
        if draft.elements.is_empty() {
            return Err(vec!["schema has no elements".to_owned()]);
        }
        let schema = IntentSchema {
            domain: domain.to_owned(),
            intent: prompt.target_intent.clone(),
            elements: draft.elements,
            prerequisites: draft.prerequisites,
            provenance: Provenance::constructed(source.clone()),
        };
        let (report, sanitized) = validate_schema(&schema);
        if report.is_valid() {
            Ok(sanitized)
        } else {
            Err(report.errors.iter().map(ToString::to_string).collect())
        }
    });
    match asked {
        Ok(a) => Ok(Constructed {
            schema: a.value,
            retries: a.retries,
        }),
        Err(AskError::Backend(b)) => Err(b.into()),
        Err(AskError::Exhausted { attempts, errors }) => Err(DecomposeError::Construction { attempts, errors }),
    }
}

/// Retrieve-or-construct with a per-session overlay of constructed schemas.
pub struct Decomposer {
    pub config: DecomposerConfig,
    provider: Box<dyn EmbeddingProvider>,
    overlay: Mutex<Overlay>,
}

#[derive(Default)]
struct Overlay {
    schemas: BTreeMap<String, IntentSchema>,
    by_instruction: BTreeMap<String, DecompositionResult>,
}

impl Decomposer {
    pub fn new(config: DecomposerConfig, provider: Box<dyn EmbeddingProvider>) -> Self {
        Decomposer {
            config,
            provider,
            overlay: Mutex::new(Overlay::default()),
        }
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    /// Schemas constructed so far, for export or promotion.
    pub fn constructed(&self) -> Vec<IntentSchema> {
        self.overlay.lock().schemas.values().cloned().collect()
    }

    pub fn decompose(
        &self,
        x: &UserInstruction,
        dataset: &CidDataset,
        backend: &dyn ChatBackend,
    ) -> Result<DecompositionResult, DecomposeError> {
        let instruction_key = canonical_label(&x.text);
        if let Some(hit) = self.overlay.lock().by_instruction.get(&instruction_key) {
            return Ok(hit.clone());
        }

        let rec = recognize_domain_intent(x, dataset, backend, self.provider(), &self.config)?;
        if let Some(schema) = lookup(dataset, &rec.domain, &rec.intent) {
            let layered = induce_layers(schema)?;
            let (_, sanitized) = validate_schema(schema);
            return Ok(DecompositionResult {
                domain: schema.domain.clone(),
                intent: schema.intent.clone(),
                schema: sanitized,
                layered,
                path: DecompositionPath::Retrieved,
                similarity_scores: Vec::new(),
                recognition: rec,
            });
        }

        let key = schema_key(&rec.domain, &rec.intent);
        let cached = self.overlay.lock().schemas.get(&key).cloned();
        let (schema, similarity_scores) = match cached {
            Some(s) => (s, Vec::new()),
            None => {
                let curated = CidDataset {
                    schemas: dataset
                        .schemas
                        .iter()
                        .filter(|s| s.provenance.kind == ProvenanceKind::Curated)
                        .cloned()
                        .collect(),
                    ..CidDataset::default()
                };
                let similar = retrieve_similar_intents(x, &curated, self.config.exemplars, self.provider())?;
                let scores = similar.iter().map(|(s, v)| (s.intent.clone(), *v)).collect();
                let exemplars = similar
                    .into_iter()
                    .map(|(s, _)| induce_layers(&s).map(|l| (s, l)))
                    .collect::<Result<Vec<_>, _>>()?;
                let prompt = FewShotPrompt {
                    exemplars,
                    target_intent: rec.intent.clone(),
                    target_instruction: x.clone(),
                };
                let built = construct_schema_fewshot(&rec.domain, &prompt, backend, &self.config)?;
                (built.schema, scores)
            }
        };
        let layered = induce_layers(&schema)?;
        let result = DecompositionResult {
            domain: schema.domain.clone(),
            intent: schema.intent.clone(),
            schema: schema.clone(),
            layered,
            path: DecompositionPath::Constructed,
            similarity_scores,
            recognition: rec,
        };
        let mut overlay = self.overlay.lock();
        overlay.schemas.insert(key, schema);
        overlay.by_instruction.insert(instruction_key, result.clone());
        Ok(result)
    }
}
