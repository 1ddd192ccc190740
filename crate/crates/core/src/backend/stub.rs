//! Deterministic stand-in for a model endpoint.
//!
//! A request is answered, in order, by: a fixture addressed by the request
//! fingerprint; the next queued response for its task; a built-in policy,
//! if the script enables one for that task. A strict script with no match
//! fails with [`BackendError::FixtureMiss`]. Every random choice is seeded
//! from the script seed, the request seed, and the fingerprint, so replies
//! are a pure function of the request.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    fingerprint, BackendError, Capabilities, Capability, ChatBackend, ChatMessage, ChatRequest,
    ChatResponse, Decoding, ScoredContinuation, TaskKind,
};
use crate::clarifier::Answer;
use crate::protocol::{
    AnswerSetDraft, ConstructPayload, FinalizePayload, QuestionDraft, RecognizeAnswer,
    RecognizePayload, SchemaDraft, SimulatePayload, TableDraft, TablePayload,
};
use crate::text::{alnum_tokens, canonical_label, jaccard, strip_token, token_set};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub weight: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureResponse {
    Branches { branches: Vec<Branch> },
    Scores { tokens: Vec<String>, probs: Vec<f64> },
    Vectors { vectors: Vec<Vec<f64>> },
    Text { text: String },
}

impl FixtureResponse {
    pub fn text(t: impl Into<String>) -> Self {
        FixtureResponse::Text { text: t.into() }
    }
}

/// Token confidences used by the scoring policy: tokens that already occur
/// in the context are generated confidently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePolicy {
    pub in_context: f64,
    pub out_of_context: f64,
}

impl Default for ConfidencePolicy {
    fn default() -> Self {
        ConfidencePolicy {
            in_context: 0.75,
            out_of_context: 0.25,
        }
    }
}

fn default_capabilities() -> Capabilities {
    Capabilities {
        chat: true,
        scoring: true,
        embedding: true,
    }
}

fn default_dim() -> usize {
    8
}

fn default_id() -> String {
    "stub".to_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubScript {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_capabilities")]
    pub capabilities: Capabilities,
    #[serde(default)]
    pub fixtures: BTreeMap<String, FixtureResponse>,
    /// Responses served in order per task name (`recognize`, `score`, ...).
    #[serde(default)]
    pub queues: BTreeMap<String, Vec<FixtureResponse>>,
    /// Task names the built-in policies may answer; `"all"` enables every
    /// one. Ignored by lenient scripts, which enable everything.
    #[serde(default)]
    pub policies: BTreeSet<String>,
    /// Suggested options per canonical element name. `{Element name}`
    /// placeholders are filled from already-settled values.
    #[serde(default)]
    pub option_bank: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub confidence: ConfidencePolicy,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

impl Default for StubScript {
    fn default() -> Self {
        StubScript {
            id: default_id(),
            strict: false,
            seed: 0,
            capabilities: default_capabilities(),
            fixtures: BTreeMap::new(),
            queues: BTreeMap::new(),
            policies: BTreeSet::new(),
            option_bank: BTreeMap::new(),
            confidence: ConfidencePolicy::default(),
            embedding_dim: default_dim(),
        }
    }
}

impl StubScript {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bytes = std::fs::read(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_policies<I: IntoIterator<Item = &'static str>>(mut self, names: I) -> Self {
        self.policies.extend(names.into_iter().map(str::to_owned));
        self
    }

    pub fn queue(mut self, task: &str, responses: Vec<FixtureResponse>) -> Self {
        self.queues.entry(task.to_owned()).or_default().extend(responses);
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        for (fp, f) in self.fixtures.iter().chain(
            self.queues
                .iter()
                .flat_map(|(k, v)| v.iter().map(move |f| (k, f))),
        ) {
            if let FixtureResponse::Branches { branches } = f {
                let total: f64 = branches.iter().map(|b| b.weight).sum();
                if branches.is_empty() || (total - 1.0).abs() > 1e-9 || branches.iter().any(|b| b.weight < 0.0) {
                    return Err(BackendError::Config(format!(
                        "fixture {fp}: branch weights must be non-negative and sum to 1 (got {total})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct StubBackend {
    script: StubScript,
    queues: Mutex<BTreeMap<String, VecDeque<FixtureResponse>>>,
}

pub(crate) fn task_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Recognize => "recognize",
        TaskKind::ConstructSchema => "construct_schema",
        TaskKind::GenerateTable => "generate_table",
        TaskKind::Finalize => "finalize",
        TaskKind::SimulateUser => "simulate_user",
        TaskKind::Extract => "extract",
        TaskKind::JudgeOption => "judge_option",
    }
}

impl StubBackend {
    pub fn new(script: StubScript) -> Result<Self, BackendError> {
        script.validate()?;
        let queues = script
            .queues
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
            .collect();
        Ok(StubBackend {
            script,
            queues: Mutex::new(queues),
        })
    }

    /// Every policy enabled, no fixtures.
    pub fn lenient() -> Self {
        StubBackend::new(StubScript::default()).expect("default script is valid")
    }

    pub fn script(&self) -> &StubScript {
        &self.script
    }

    fn policy_enabled(&self, name: &str) -> bool {
        !self.script.strict || self.script.policies.contains("all") || self.script.policies.contains(name)
    }

    fn next_queued(&self, name: &str) -> Option<FixtureResponse> {
        self.queues.lock().get_mut(name).and_then(VecDeque::pop_front)
    }

    fn rng_for(&self, fp: &str, decoding: Option<&Decoding>) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.script.seed.to_le_bytes());
        h.update(decoding.and_then(|d| d.seed).unwrap_or(0).to_le_bytes());
        h.update(fp.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn resolve_text(&self, f: FixtureResponse, fp: &str, decoding: &Decoding) -> Result<String, BackendError> {
        match f {
            FixtureResponse::Text { text } => Ok(text),
            FixtureResponse::Branches { branches } => {
                let mut rng = self.rng_for(fp, Some(decoding));
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                for b in &branches {
                    acc += b.weight;
                    if draw < acc {
                        return Ok(b.text.clone());
                    }
                }
                Ok(branches.last().map(|b| b.text.clone()).unwrap_or_default())
            }
            other => Err(BackendError::InvalidResponse(format!(
                "chat fixture {fp} is not a text response: {other:?}"
            ))),
        }
    }

    fn policy_reply(&self, request: &ChatRequest, fp: &str) -> Option<Result<String, BackendError>> {
        let hint = request.task.as_ref()?;
        if !self.policy_enabled(task_name(hint.kind)) {
            return None;
        }
        let sampled = request.decoding.temperature > 0.0 && request.decoding.seed.is_some();
        let mut rng = self.rng_for(fp, Some(&request.decoding));
        let parse_err = |e: serde_json::Error| BackendError::InvalidResponse(format!("stub payload: {e}"));
        let reply = match hint.kind {
            TaskKind::Recognize => serde_json::from_value(hint.payload.clone())
                .map_err(parse_err)
                .map(|p| recognize_policy(&p)),
            TaskKind::ConstructSchema => serde_json::from_value(hint.payload.clone())
                .map_err(parse_err)
                .map(|p| construct_policy(&p)),
            TaskKind::GenerateTable => serde_json::from_value(hint.payload.clone())
                .map_err(parse_err)
                .map(|p| table_policy(&p, &self.script.option_bank, sampled.then_some(&mut rng))),
            TaskKind::Finalize => serde_json::from_value(hint.payload.clone())
                .map_err(parse_err)
                .map(|p| finalize_policy(&p)),
            TaskKind::SimulateUser => serde_json::from_value(hint.payload.clone())
                .map_err(parse_err)
                .map(|p| simulate_policy(&p, &mut rng)),
            TaskKind::Extract => Ok("{}".to_owned()),
            TaskKind::JudgeOption => Ok(judge_policy(&hint.payload)),
        };
        Some(reply)
    }
}

impl ChatBackend for StubBackend {
    fn id(&self) -> String {
        self.script.id.clone()
    }

    fn capabilities(&self) -> Capabilities {
        self.script.capabilities
    }

    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if !self.script.capabilities.chat {
            return Err(BackendError::Capability("chat"));
        }
        let fp = fingerprint(Capability::Chat, &request.messages, Some(&request.decoding));
        let task = request.task.as_ref().map(|t| t.kind);
        if let Some(f) = self.script.fixtures.get(&fp) {
            return self.resolve_text(f.clone(), &fp, &request.decoding).map(ChatResponse::from_text);
        }
        if let Some(f) = task.and_then(|k| self.next_queued(task_name(k))) {
            return self.resolve_text(f, &fp, &request.decoding).map(ChatResponse::from_text);
        }
        match self.policy_reply(request, &fp) {
            Some(reply) => reply.map(ChatResponse::from_text),
            None if !self.script.strict && task.is_none() => Ok(ChatResponse::from_text("ok")),
            None => Err(BackendError::FixtureMiss {
                capability: Capability::Chat,
                fingerprint: fp,
                task,
            }),
        }
    }

    fn score_continuation(
        &self,
        context: &[ChatMessage],
        continuation: &str,
    ) -> Result<ScoredContinuation, BackendError> {
        if !self.script.capabilities.scoring {
            return Err(BackendError::Capability("scoring"));
        }
        let mut messages = context.to_vec();
        messages.push(ChatMessage::assistant(continuation));
        let fp = fingerprint(Capability::Score, &messages, None);
        let fixture = self
            .script
            .fixtures
            .get(&fp)
            .cloned()
            .or_else(|| self.next_queued("score"));
        let scored = match fixture {
            Some(FixtureResponse::Scores { tokens, probs }) => ScoredContinuation { tokens, probs },
            Some(other) => {
                return Err(BackendError::InvalidResponse(format!(
                    "score fixture {fp} is not a score vector: {other:?}"
                )))
            }
            None if self.policy_enabled("score") => confidence_policy(context, continuation, self.script.confidence),
            None => {
                return Err(BackendError::FixtureMiss {
                    capability: Capability::Score,
                    fingerprint: fp,
                    task: None,
                })
            }
        };
        scored.validate()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if !self.script.capabilities.embedding {
            return Err(BackendError::Capability("embedding"));
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let messages: Vec<_> = texts.iter().map(ChatMessage::user).collect();
        let fp = fingerprint(Capability::Embed, &messages, None);
        match self.script.fixtures.get(&fp).cloned().or_else(|| self.next_queued("embed")) {
            Some(FixtureResponse::Vectors { vectors }) if vectors.len() == texts.len() => Ok(vectors),
            Some(other) => Err(BackendError::InvalidResponse(format!(
                "embed fixture {fp} does not match request: {other:?}"
            ))),
            None if self.policy_enabled("embed") => Ok(texts
                .iter()
                .map(|t| hashed_embedding(t, self.script.embedding_dim))
                .collect()),
            None => Err(BackendError::FixtureMiss {
                capability: Capability::Embed,
                fingerprint: fp,
                task: None,
            }),
        }
    }
}

fn recognize_policy(p: &RecognizePayload) -> String {
    let query = token_set(&p.instruction);
    let best = |labels: &[String]| -> Option<String> {
        let mut best: Option<(f64, &String)> = None;
        for l in labels {
            let s = jaccard(&query, &token_set(l));
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, l));
            }
        }
        best.map(|(_, l)| l.clone())
    };
    let intent = best(&p.intents).unwrap_or_default();
    let domain = p
        .pairs
        .iter()
        .find(|(_, z)| canonical_label(z) == canonical_label(&intent))
        .map(|(d, _)| d.clone())
        .or_else(|| best(&p.domains))
        .unwrap_or_default();
    serde_json::to_string(&RecognizeAnswer { domain, intent }).expect("serializes")
}

/// Transfer the first exemplar's structure to the new intent.
fn construct_policy(p: &ConstructPayload) -> String {
    let draft = p
        .exemplars
        .first()
        .map(|e| SchemaDraft {
            elements: e.elements.clone(),
            prerequisites: e.prerequisites.clone(),
        })
        .unwrap_or(SchemaDraft {
            elements: Vec::new(),
            prerequisites: BTreeMap::new(),
        });
    serde_json::to_string(&draft).expect("serializes")
}

fn fill_placeholders(template: &str, settled: &BTreeMap<String, String>) -> Option<String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..].find('}')? + open;
        out.push_str(&rest[..open]);
        let key = canonical_label(&rest[open + 1..close]);
        out.push_str(settled.get(&key)?);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Some(out)
}

fn table_policy(p: &TablePayload, bank: &BTreeMap<String, Vec<String>>, mut rng: Option<&mut ChaCha8Rng>) -> String {
    let settled: BTreeMap<String, String> = p
        .settled
        .iter()
        .filter_map(|s| s.value.as_ref().map(|v| (canonical_label(&s.name), v.clone())))
        .collect();
    let questions = p
        .elements
        .iter()
        .map(|e| {
            let templates = bank
                .iter()
                .find(|(k, _)| canonical_label(k) == canonical_label(&e.name))
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| vec!["Standard".into(), "Flexible".into(), "Custom".into()]);
            let mut options: Vec<String> = Vec::new();
            for t in &templates {
                if let Some(o) = fill_placeholders(t, &settled) {
                    if !options.contains(&o) {
                        options.push(o);
                    }
                }
            }
            if let Some(rng) = rng.as_deref_mut() {
                if !options.is_empty() {
                    let r = rng.gen_range(0..options.len());
                    options.rotate_left(r);
                }
                let keep = rng.gen_range(0..=options.len());
                options.truncate(keep);
            }
            options.truncate(p.max_options);
            QuestionDraft {
                element_id: e.id.clone(),
                text: format!("What is your preference for {}?", e.name.to_lowercase()),
                options,
                allow_free_text: true,
            }
        })
        .collect();
    serde_json::to_string(&TableDraft { questions }).expect("serializes")
}

/// Plan text that repeats every settled value verbatim.
fn finalize_policy(p: &FinalizePayload) -> String {
    let mut parts = vec![format!("Plan for: {}.", p.instruction.trim().trim_end_matches('.'))];
    for s in &p.settled {
        match &s.value {
            Some(v) => parts.push(format!("{}: {}.", s.name, v)),
            None => parts.push(format!("{}: no preference.", s.name)),
        }
    }
    parts.join(" ")
}

fn simulate_policy(p: &SimulatePayload, rng: &mut ChaCha8Rng) -> String {
    let answers = p
        .questions
        .iter()
        .map(|q| {
            let answer = match p.ground_truth.get(&q.element_id) {
                Some(v) => match q.options.iter().find(|o| canonical_label(o) == canonical_label(v)) {
                    Some(o) => Answer::Option(o.clone()),
                    None => Answer::FreeText(v.clone()),
                },
                None if rng.gen::<f64>() < p.skip_probability => Answer::Skipped,
                None => match q.options.first() {
                    Some(o) => Answer::Option(o.clone()),
                    None => Answer::Skipped,
                },
            };
            (q.element_id.clone(), answer)
        })
        .collect();
    serde_json::to_string(&AnswerSetDraft { answers }).expect("serializes")
}

fn judge_policy(payload: &serde_json::Value) -> String {
    let option = payload.get("option").and_then(|v| v.as_str()).unwrap_or("");
    if option.trim().is_empty() { "no" } else { "yes" }.to_owned()
}

fn confidence_policy(context: &[ChatMessage], continuation: &str, policy: ConfidencePolicy) -> ScoredContinuation {
    let known: BTreeSet<String> = context.iter().flat_map(|m| alnum_tokens(&m.content)).collect();
    let tokens: Vec<String> = continuation.split_whitespace().map(str::to_owned).collect();
    let probs = tokens
        .iter()
        .map(|t| {
            let s = strip_token(t);
            if !s.is_empty() && alnum_tokens(&s).iter().all(|p| known.contains(p)) {
                policy.in_context
            } else {
                policy.out_of_context
            }
        })
        .collect();
    ScoredContinuation { tokens, probs }
}

/// Bag-of-words feature hashing, L2-normalized.
fn hashed_embedding(text: &str, dim: usize) -> Vec<f64> {
    let dim = dim.max(1);
    let mut v = vec![0.0; dim];
    for tok in alnum_tokens(text) {
        let digest = Sha256::digest(tok.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        v[(u64::from_le_bytes(b) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
