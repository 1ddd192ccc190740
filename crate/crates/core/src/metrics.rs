//! Clarification-interaction metrics over trajectory records, plus BLEU
//! and agent-execution statistics. Every rate is a fraction in `[0, 1]`;
//! reports average per instruction (macro average).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use num_traits::Float;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{ChatBackend, ChatMessage, ChatRequest, Decoding, ResponseFormat, TaskHint, TaskKind};
use crate::cid::{lookup, CidDataset, IntentSchema};
use crate::clarifier::{check_conflicts, ReplayError, Trajectory, TrajectoryRecord};
use crate::prompts::PromptTemplates;
use crate::protocol::JudgePayload;
use crate::scalar::Scalar;
use crate::text::canonical_label;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub instruction_id: String,
    #[serde(default)]
    pub gold_elements: Vec<String>,
    /// Element name to accepted aliases.
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_output: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("instruction {0} has no gold elements")]
    MissingGold(String),
    #[error("no schema for {domain} / {intent}")]
    MissingSchema { domain: String, intent: String },
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("trajectory {session}: {source}")]
    Replay {
        session: String,
        #[source]
        source: ReplayError,
    },
}

/// Gold elements covered by the asked elements, matched on canonical name
/// or a listed synonym.
pub fn intents_cover_rate<S: Scalar>(
    trajectory: &Trajectory,
    schema: &IntentSchema,
    gold: &GoldAnnotation,
) -> Result<S, MetricError> {
    if gold.gold_elements.is_empty() {
        return Err(MetricError::MissingGold(gold.instruction_id.clone()));
    }
    let asked: Vec<String> = trajectory
        .asked_elements()
        .iter()
        .filter_map(|id| schema.element(id))
        .map(|e| canonical_label(&e.name))
        .collect();
    let covered = gold
        .gold_elements
        .iter()
        .filter(|g| {
            let mut names = vec![canonical_label(g)];
            if let Some(aliases) = gold.synonyms.get(*g) {
                names.extend(aliases.iter().map(|a| canonical_label(a)));
            }
            asked.iter().any(|a| names.contains(a))
        })
        .count();
    Ok(S::ratio(covered, gold.gold_elements.len()))
}

/// Conflicting questions over asked questions; zero when nothing was asked.
pub fn logical_conflict_rate<S: Scalar>(trajectory: &Trajectory, schema: &IntentSchema) -> Result<S, ReplayError> {
    let conflicts = check_conflicts(trajectory, schema)?;
    Ok(S::ratio(conflicts.len(), trajectory.question_count()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionStats<S = f64> {
    pub turns: S,
    pub questions_per_turn: S,
    pub options_presenting_rate: S,
    pub avg_options_per_question: S,
}

pub fn interaction_stats<S: Scalar>(trajectory: &Trajectory) -> InteractionStats<S> {
    let questions: Vec<_> = trajectory.turns.iter().flat_map(|t| &t.table.questions).collect();
    let with_options = questions.iter().filter(|q| !q.options.is_empty()).count();
    let options: usize = questions.iter().map(|q| q.options.len()).sum();
    InteractionStats {
        turns: S::from_count(trajectory.turn_count()),
        questions_per_turn: S::ratio(questions.len(), trajectory.turn_count()),
        options_presenting_rate: S::ratio(with_options, questions.len()),
        avg_options_per_question: S::ratio(options, with_options),
    }
}

pub trait JudgeProvider: Send + Sync {
    fn id(&self) -> String;
    fn is_reasonable(&self, question: &str, option: &str) -> Result<bool, MetricError>;
}

/// Fixed verdicts keyed by `(question, option)`, with a default for
/// anything unlisted.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FixtureJudge {
    #[serde(default)]
    pub verdicts: Vec<(String, String, bool)>,
    #[serde(default)]
    pub default: Option<bool>,
}

impl FixtureJudge {
    pub fn constant(verdict: bool) -> Self {
        FixtureJudge {
            verdicts: Vec::new(),
            default: Some(verdict),
        }
    }
}

impl JudgeProvider for FixtureJudge {
    fn id(&self) -> String {
        "fixture".into()
    }

    fn is_reasonable(&self, question: &str, option: &str) -> Result<bool, MetricError> {
        self.verdicts
            .iter()
            .find(|(q, o, _)| q == question && o == option)
            .map(|v| v.2)
            .or(self.default)
            .ok_or_else(|| MetricError::JudgeUnavailable(format!("no verdict for {option:?}")))
    }
}

/// Model-backed judge. Verdicts are cached by a hash of the question and
/// option, so each pair costs at most one call.
pub struct BackendJudge {
    backend: Arc<dyn ChatBackend>,
    templates: Arc<PromptTemplates>,
    cache: Mutex<HashMap<String, bool>>,
}

impl BackendJudge {
    pub fn new(backend: Arc<dyn ChatBackend>, templates: Arc<PromptTemplates>) -> Self {
        BackendJudge {
            backend,
            templates,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn key(question: &str, option: &str) -> String {
        let mut h = Sha256::new();
        h.update(question.as_bytes());
        h.update([0u8]);
        h.update(option.as_bytes());
        hex::encode(h.finalize())
    }
}

impl JudgeProvider for BackendJudge {
    fn id(&self) -> String {
        format!("judge:{}", self.backend.id())
    }

    fn is_reasonable(&self, question: &str, option: &str) -> Result<bool, MetricError> {
        let key = Self::key(question, option);
        if let Some(v) = self.cache.lock().get(&key) {
            return Ok(*v);
        }
        let request = ChatRequest {
            messages: vec![ChatMessage::user(
                self.templates.render("judge", &[("question", question), ("option", option)]),
            )],
            decoding: Decoding::default(),
            response_format: ResponseFormat::Text,
            task: Some(TaskHint {
                kind: TaskKind::JudgeOption,
                payload: serde_json::to_value(JudgePayload {
                    question: question.to_owned(),
                    option: option.to_owned(),
                })
                .expect("payload serializes"),
            }),
        };
        let reply = self
            .backend
            .chat_complete(&request)
            .map_err(|e| MetricError::JudgeUnavailable(e.to_string()))?;
        let verdict = canonical_label(&reply.text).starts_with("yes");
        self.cache.lock().insert(key, verdict);
        Ok(verdict)
    }
}

pub fn options_reasonable_rate<S: Scalar>(trajectory: &Trajectory, judge: &dyn JudgeProvider) -> Result<S, MetricError> {
    let mut total = 0;
    let mut ok = 0;
    for q in trajectory.turns.iter().flat_map(|t| &t.table.questions) {
        for o in &q.options {
            total += 1;
            if judge.is_reasonable(&q.question_text, o)? {
                ok += 1;
            }
        }
    }
    Ok(S::ratio(ok, total))
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|s| (*s).to_owned()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 over whitespace tokens: uniform weights, add-one
/// smoothing for orders 2 to 4, brevity penalty `exp(1 - r/c)` when the
/// candidate is shorter.
pub fn bleu<F: Float>(candidate: &str, reference: &str) -> F {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() {
        return F::zero();
    }
    let mut log_sum = F::zero();
    for n in 1..=4 {
        let cand = ngram_counts(&c, n);
        let refs = ngram_counts(&r, n);
        let matched: usize = cand.iter().map(|(g, k)| (*k).min(refs.get(g).copied().unwrap_or(0))).sum();
        let total = c.len().saturating_sub(n - 1);
        let p = if n == 1 {
            if matched == 0 {
                return F::zero();
            }
            F::from(matched).unwrap() / F::from(total).unwrap()
        } else {
            F::from(matched + 1).unwrap() / F::from(total + 1).unwrap()
        };
        log_sum = log_sum + p.ln();
    }
    let geo = (log_sum / F::from(4).unwrap()).exp();
    let bp = if c.len() < r.len() {
        (F::one() - F::from(r.len()).unwrap() / F::from(c.len()).unwrap()).exp()
    } else {
        F::one()
    };
    bp * geo
}

/// Externally produced agent-execution log for one instruction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub instruction_id: String,
    pub subtasks: Vec<SubtaskLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskLog {
    pub name: String,
    #[serde(default)]
    pub unnecessary: bool,
    #[serde(default)]
    pub general: bool,
    #[serde(default)]
    pub tool_invocations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStats<S = f64> {
    pub unnecessary_subtasks: S,
    pub general_subtasks: S,
    pub tool_invocations_per_subtask: S,
}

pub fn execution_stats<S: Scalar>(log: &ExecutionLog) -> ExecutionStats<S> {
    let n = log.subtasks.len();
    ExecutionStats {
        unnecessary_subtasks: S::ratio(log.subtasks.iter().filter(|s| s.unnecessary).count(), n),
        general_subtasks: S::ratio(log.subtasks.iter().filter(|s| s.general).count(), n),
        tool_invocations_per_subtask: S::ratio(log.subtasks.iter().map(|s| s.tool_invocations).sum(), n),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionMetrics<S = f64> {
    pub instruction_id: String,
    pub intents_cover_rate: Option<S>,
    pub logical_conflict_rate: S,
    pub avg_interaction_turns: S,
    pub avg_questions_per_turn: S,
    pub options_presenting_rate: S,
    pub avg_options_per_question: S,
    pub options_reasonable_rate: Option<S>,
    pub bleu: Option<f64>,
    pub execution: Option<ExecutionStats<S>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages<S = f64> {
    pub intents_cover_rate: Option<S>,
    pub logical_conflict_rate: Option<S>,
    pub avg_interaction_turns: Option<S>,
    pub avg_questions_per_turn: Option<S>,
    pub options_presenting_rate: Option<S>,
    pub avg_options_per_question: Option<S>,
    pub options_reasonable_rate: Option<S>,
    pub bleu: Option<f64>,
    pub unnecessary_subtasks: Option<S>,
    pub general_subtasks: Option<S>,
    pub tool_invocations_per_subtask: Option<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<S = f64> {
    pub instructions: Vec<InstructionMetrics<S>>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages<S>,
    /// Requested metrics that could not be computed, with the reason.
    pub unavailable: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalRequest {
    /// Judge-backed option reasonableness was asked for.
    pub reasonableness: bool,
}

fn macro_of<S: Scalar>(xs: impl Iterator<Item = Option<S>>) -> Option<S> {
    let v: Vec<S> = xs.flatten().collect();
    (!v.is_empty()).then(|| S::mean(&v))
}

/// Metrics for every record. Schemas come from `dataset`; gold annotations
/// and execution logs are matched on `session_id`.
pub fn evaluate<S: Scalar>(
    records: &[TrajectoryRecord],
    dataset: &CidDataset,
    gold: &[GoldAnnotation],
    judge: Option<&dyn JudgeProvider>,
    logs: &[ExecutionLog],
    request: EvalRequest,
) -> Result<MetricReport<S>, MetricError> {
    let gold_by: BTreeMap<&str, &GoldAnnotation> = gold.iter().map(|g| (g.instruction_id.as_str(), g)).collect();
    let logs_by: BTreeMap<&str, &ExecutionLog> = logs.iter().map(|l| (l.instruction_id.as_str(), l)).collect();
    let mut unavailable = Vec::new();
    if request.reasonableness && judge.is_none() {
        unavailable.push("options_reasonable_rate: no judge configured".to_owned());
    }

    let mut instructions = Vec::with_capacity(records.len());
    for rec in records {
        let schema = lookup(dataset, &rec.schema.domain, &rec.schema.intent).ok_or_else(|| MetricError::MissingSchema {
            domain: rec.schema.domain.clone(),
            intent: rec.schema.intent.clone(),
        })?;
        let t = rec.to_trajectory();
        let g = gold_by.get(rec.session_id.as_str());
        let cover = match g {
            Some(g) if !g.gold_elements.is_empty() => Some(intents_cover_rate(&t, schema, g)?),
            _ => None,
        };
        let conflict = logical_conflict_rate(&t, schema).map_err(|source| MetricError::Replay {
            session: rec.session_id.clone(),
            source,
        })?;
        let stats = interaction_stats::<S>(&t);
        let reasonable = match judge.filter(|_| request.reasonableness) {
            Some(j) => match options_reasonable_rate(&t, j) {
                Ok(v) => Some(v),
                Err(e) => {
                    unavailable.push(format!("options_reasonable_rate for {}: {e}", rec.session_id));
                    None
                }
            },
            None => None,
        };
        let bleu_score = match (g.and_then(|g| g.reference_output.as_deref()), &rec.final_output) {
            (Some(reference), Some(y)) => Some(bleu::<f64>(y, reference)),
            _ => None,
        };
        instructions.push(InstructionMetrics {
            instruction_id: rec.session_id.clone(),
            intents_cover_rate: cover,
            logical_conflict_rate: conflict,
            avg_interaction_turns: stats.turns,
            avg_questions_per_turn: stats.questions_per_turn,
            options_presenting_rate: stats.options_presenting_rate,
            avg_options_per_question: stats.avg_options_per_question,
            options_reasonable_rate: reasonable,
            bleu: bleu_score,
            execution: logs_by.get(rec.session_id.as_str()).map(|l| execution_stats(l)),
        });
    }

    let m = &instructions;
    let macro_avg = MacroAverages {
        intents_cover_rate: macro_of(m.iter().map(|i| i.intents_cover_rate)),
        logical_conflict_rate: macro_of(m.iter().map(|i| Some(i.logical_conflict_rate))),
        avg_interaction_turns: macro_of(m.iter().map(|i| Some(i.avg_interaction_turns))),
        avg_questions_per_turn: macro_of(m.iter().map(|i| Some(i.avg_questions_per_turn))),
        options_presenting_rate: macro_of(m.iter().map(|i| Some(i.options_presenting_rate))),
        avg_options_per_question: macro_of(m.iter().map(|i| Some(i.avg_options_per_question))),
        options_reasonable_rate: macro_of(m.iter().map(|i| i.options_reasonable_rate)),
        bleu: macro_of(m.iter().map(|i| i.bleu)),
        unnecessary_subtasks: macro_of(m.iter().map(|i| i.execution.map(|e| e.unnecessary_subtasks))),
        general_subtasks: macro_of(m.iter().map(|i| i.execution.map(|e| e.general_subtasks))),
        tool_invocations_per_subtask: macro_of(m.iter().map(|i| i.execution.map(|e| e.tool_invocations_per_subtask))),
    };
    Ok(MetricReport {
        instructions,
        macro_avg,
        unavailable,
    })
}

impl<S: Scalar> MetricReport<S> {
    /// Plain-text table of the macro averages; rates shown as percentages.
    pub fn render_table(&self) -> String {
        let m = &self.macro_avg;
        let pct = |v: Option<S>| v.map_or("n/a".to_owned(), |x| format!("{:.2}%", x.to_real() * 100.0));
        let num = |v: Option<S>| v.map_or("n/a".to_owned(), |x| format!("{:.2}", x.to_real()));
        let rows = [
            ("Intents cover rate", pct(m.intents_cover_rate)),
            ("Logical conflict rate", pct(m.logical_conflict_rate)),
            ("Avg. interaction turns", num(m.avg_interaction_turns)),
            ("Avg. questions per turn", num(m.avg_questions_per_turn)),
            ("Options presenting rate", pct(m.options_presenting_rate)),
            ("Options reasonable rate", pct(m.options_reasonable_rate)),
            ("Avg. options per question", num(m.avg_options_per_question)),
            ("BLEU", m.bleu.map_or("n/a".to_owned(), |b| format!("{b:.4}"))),
            ("Unnecessary sub-tasks", pct(m.unnecessary_subtasks)),
            ("General sub-tasks", pct(m.general_subtasks)),
            ("Tool invocations per sub-task", num(m.tool_invocations_per_subtask)),
        ];
        let mut out = format!("{} instruction(s)\n", self.instructions.len());
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<31}{value:>10}");
        }
        for u in &self.unavailable {
            let _ = writeln!(out, "unavailable: {u}");
        }
        out
    }
}
