use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    Answer, ClarificationQuestion, ClarificationTable, ClarifierConfig, ClarifierError, Trajectory,
    Turn, UserInstruction, UserResponse,
};
use crate::backend::{ChatBackend, ChatMessage, ChatRequest, Decoding, ResponseFormat, TaskHint, TaskKind};
use crate::cid::{induce_layers, validate_schema, CidError, ElementDef, ElementId, IntentSchema, LayeredElements};
use crate::prompts::PromptTemplates;
use crate::protocol::{extract_json, ElementBrief, FinalizePayload, SettledEntry, TableDraft, TablePayload};
use crate::repair::{Ask, AskError};
use crate::text::canonical_label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Clarifying,
    Finalizing,
    Completed,
    Aborted,
}

/// A live clarification session. `cursor` is the 1-based index of the layer
/// being asked; `H + 1` once every layer is settled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    /// Sanitized copy of the schema the session runs on.
    pub schema: IntentSchema,
    pub layered: LayeredElements,
    pub trajectory: Trajectory,
    pub cursor: usize,
    pub status: SessionStatus,
    pub pending: Option<ClarificationTable>,
    pub config: ClarifierConfig,
}

impl SessionState {
    pub fn new(
        id: impl Into<String>,
        instruction: UserInstruction,
        schema: &IntentSchema,
        config: ClarifierConfig,
    ) -> Result<Self, ClarifierError> {
        let (report, sanitized) = validate_schema(schema);
        if !report.is_valid() {
            return Err(CidError::Invalid(report.messages().join("; ")).into());
        }
        let layered = induce_layers(&sanitized)?;
        let mut s = SessionState {
            id: id.into(),
            schema: sanitized,
            layered,
            trajectory: Trajectory::new(instruction),
            cursor: 1,
            status: SessionStatus::Clarifying,
            pending: None,
            config,
        };
        s.advance_from(0);
        Ok(s)
    }

    /// Layer count `H`.
    pub fn depth(&self) -> usize {
        self.layered.depth()
    }

    /// Index the next table will carry.
    pub fn current_turn(&self) -> usize {
        self.trajectory.turns.len() + 1
    }

    pub fn is_settled(&self, id: &ElementId) -> bool {
        self.trajectory.resolved.contains_key(id) || self.trajectory.no_preference.contains(id)
    }

    fn unresolved_in_layer(&self, k: usize) -> Vec<&ElementDef> {
        let Some(layer) = self.layered.layer(k) else {
            return Vec::new();
        };
        self.schema
            .elements
            .iter()
            .filter(|e| layer.contains(&e.id) && !self.is_settled(&e.id))
            .collect()
    }

    /// Elements the next table should ask about, in schema order.
    fn targets(&self) -> Vec<&ElementDef> {
        let mut out = self.unresolved_in_layer(self.cursor);
        if self.config.merge_independent_layers {
            let asked: BTreeSet<&ElementId> = out.iter().map(|e| &e.id).collect();
            let extra: Vec<&ElementDef> = self
                .schema
                .elements
                .iter()
                .filter(|e| {
                    self.layered.layer_of(&e.id).is_some_and(|k| k > self.cursor)
                        && !self.is_settled(&e.id)
                        && !asked.contains(&e.id)
                        && self.schema.prerequisites_of(&e.id).iter().all(|p| self.is_settled(p))
                })
                .collect();
            out.extend(extra);
        }
        out
    }

    /// Move the cursor to the first layer after `k` with something left to
    /// ask, or to finalizing when there is none.
    fn advance_from(&mut self, k: usize) {
        let h = self.depth();
        match (k + 1..=h).find(|&l| !self.unresolved_in_layer(l).is_empty()) {
            Some(next) => self.cursor = next,
            None => {
                self.cursor = h + 1;
                self.status = SessionStatus::Finalizing;
            }
        }
    }

    /// Settled elements in schema order; `value: None` for skips.
    pub fn settled_entries(&self) -> Vec<SettledEntry> {
        settled_entries(&self.schema, &self.trajectory)
    }
}

fn settled_entries(schema: &IntentSchema, trajectory: &Trajectory) -> Vec<SettledEntry> {
    schema
        .elements
        .iter()
        .filter_map(|e| {
            if let Some(v) = trajectory.resolved.get(&e.id) {
                Some(Some(v.clone()))
            } else if trajectory.no_preference.contains(&e.id) {
                Some(None)
            } else {
                None
            }
            .map(|value| SettledEntry {
                id: e.id.0.clone(),
                name: e.name.clone(),
                value,
            })
        })
        .collect()
}

fn history_text(entries: &[SettledEntry]) -> String {
    if entries.is_empty() {
        return "(nothing yet)".to_owned();
    }
    entries
        .iter()
        .map(|s| match &s.value {
            Some(v) => format!("- {}: {}", s.name, v),
            None => format!("- {}: no preference", s.name),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn require_status(session: &SessionState, want: SessionStatus, op: &str) -> Result<(), ClarifierError> {
    if session.status != want {
        return Err(ClarifierError::IllegalState(format!(
            "{op} requires status {want:?}, session is {:?}",
            session.status
        )));
    }
    Ok(())
}

/// Ask the backend for the next table without touching the session.
pub fn draft_table(
    session: &SessionState,
    backend: &dyn ChatBackend,
    decoding: &Decoding,
) -> Result<ClarificationTable, ClarifierError> {
    require_status(session, SessionStatus::Clarifying, "generate_table")?;
    if session.cursor > session.depth() {
        return Err(ClarifierError::IllegalState(format!(
            "cursor {} is past the last layer {}",
            session.cursor,
            session.depth()
        )));
    }
    let targets = session.targets();
    let mut table = ClarificationTable {
        turn_index: session.current_turn(),
        layer_index: session.cursor,
        questions: Vec::new(),
    };
    if targets.is_empty() {
        return Ok(table);
    }

    let cfg = &session.config;
    let settled = session.settled_entries();
    let briefs: Vec<ElementBrief> = targets.iter().map(|e| ElementBrief::from(*e)).collect();
    let elements_text = briefs
        .iter()
        .map(|b| match &b.description {
            Some(d) => format!("- {}: {} ({})", b.id, b.name, d),
            None => format!("- {}: {}", b.id, b.name),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let max_options = cfg.max_options.to_string();
    let prompt = cfg.templates.render(
        "table",
        &[
            ("instruction", &session.trajectory.instruction.text),
            ("history", &history_text(&settled)),
            ("elements", &elements_text),
            ("max_options", &max_options),
        ],
    );
    let payload = TablePayload {
        instruction: session.trajectory.instruction.text.clone(),
        layer: session.cursor,
        elements: briefs,
        settled,
        max_options: cfg.max_options,
    };
    let hint = TaskHint {
        kind: TaskKind::GenerateTable,
        payload: serde_json::to_value(&payload).expect("payload serializes"),
    };
    let order: BTreeMap<&ElementId, usize> = targets.iter().enumerate().map(|(i, e)| (&e.id, i)).collect();

    let ask = Ask {
        backend,
        templates: &cfg.templates,
        decoding: decoding.clone(),
        max_repairs: cfg.max_repairs,
    };
    let asked = ask.run(prompt, hint, |text| {
        let draft: TableDraft = extract_json(text).map_err(|e| vec![e])?;
        check_table_draft(draft, &order, cfg.max_options)
    });
    match asked {
        Ok(a) => {
            table.questions = a.value;
            Ok(table)
        }
        Err(AskError::Backend(e)) => Err(e.into()),
        Err(AskError::Exhausted { attempts, errors }) => Err(ClarifierError::Generation { attempts, errors }),
    }
}

fn check_table_draft(
    draft: TableDraft,
    order: &BTreeMap<&ElementId, usize>,
    max_options: usize,
) -> Result<Vec<ClarificationQuestion>, Vec<String>> {
    let mut errors = Vec::new();
    let mut seen = BTreeSet::new();
    let mut questions = Vec::new();
    for q in draft.questions {
        let id = ElementId::new(q.element_id.clone());
        if !order.contains_key(&id) {
            errors.push(format!("element {id} is not one of the elements to ask about in this turn"));
            continue;
        }
        if !seen.insert(id.clone()) {
            errors.push(format!("element {id} has more than one question"));
            continue;
        }
        if q.text.trim().is_empty() {
            errors.push(format!("question for {id} has empty text"));
            continue;
        }
        let mut options: Vec<String> = Vec::new();
        for o in q.options {
            let o = o.trim().to_owned();
            if !o.is_empty() && !options.iter().any(|x| canonical_label(x) == canonical_label(&o)) {
                options.push(o);
            }
        }
        options.truncate(max_options);
        questions.push(ClarificationQuestion {
            element_id: id,
            question_text: q.text.trim().to_owned(),
            allow_free_text: q.allow_free_text || options.is_empty(),
            options,
        });
    }
    for id in order.keys() {
        if !seen.contains(*id) {
            errors.push(format!("missing question for element {id}"));
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    questions.sort_by_key(|q| order[&q.element_id]);
    Ok(questions)
}

/// Make `table` the session's pending table.
pub fn install_table(session: &mut SessionState, table: ClarificationTable) -> Result<ClarificationTable, ClarifierError> {
    require_status(session, SessionStatus::Clarifying, "install_table")?;
    if session.pending.is_some() {
        return Err(ClarifierError::IllegalState("a table is already awaiting a response".into()));
    }
    if table.turn_index != session.current_turn() || table.layer_index != session.cursor {
        return Err(ClarifierError::IllegalState(format!(
            "table is for turn {} layer {}, session is at turn {} layer {}",
            table.turn_index,
            table.layer_index,
            session.current_turn(),
            session.cursor
        )));
    }
    let allowed = session.depth() + session.config.grace_turns;
    if !table.questions.is_empty() && session.trajectory.turn_count() >= allowed {
        return Err(ClarifierError::IllegalState(format!("turn budget of {allowed} exhausted")));
    }
    session.pending = Some(table.clone());
    Ok(table)
}

/// Generate the table for the current layer and make it pending.
pub fn generate_table(session: &mut SessionState, backend: &dyn ChatBackend) -> Result<ClarificationTable, ClarifierError> {
    let decoding = session.config.decoding.clone();
    let table = draft_table(session, backend, &decoding)?;
    install_table(session, table)
}

pub fn apply_user_response(session: &mut SessionState, response: UserResponse) -> Result<(), ClarifierError> {
    apply_user_response_with(session, response, None)
}

/// Merge a response into the session. With cross-layer extraction enabled
/// and a backend supplied, free-text answers may also settle elements of
/// later layers.
pub fn apply_user_response_with(
    session: &mut SessionState,
    response: UserResponse,
    extractor: Option<&dyn ChatBackend>,
) -> Result<(), ClarifierError> {
    require_status(session, SessionStatus::Clarifying, "apply_user_response")?;
    let table = session
        .pending
        .clone()
        .ok_or_else(|| ClarifierError::IllegalState("no table is awaiting a response".into()))?;
    if response.turn_index != table.turn_index {
        return Err(ClarifierError::TurnMismatch {
            expected: table.turn_index,
            got: response.turn_index,
        });
    }
    if let Some(id) = response.answers.keys().find(|id| table.question(id).is_none()) {
        return Err(ClarifierError::UnknownElement(id.clone()));
    }

    let mut answers = BTreeMap::new();
    for q in &table.questions {
        let answer = match response.answers.get(&q.element_id).cloned().unwrap_or(Answer::Skipped) {
            Answer::Option(v) => match q.options.iter().find(|o| canonical_label(o) == canonical_label(&v)) {
                Some(o) => Answer::Option(o.clone()),
                None => {
                    return Err(ClarifierError::InvalidAnswer {
                        element: q.element_id.clone(),
                        reason: format!("{v:?} is not one of the offered options"),
                    })
                }
            },
            Answer::FreeText(v) if v.trim().is_empty() => {
                return Err(ClarifierError::InvalidAnswer {
                    element: q.element_id.clone(),
                    reason: "free-text answer is empty".into(),
                })
            }
            Answer::FreeText(_) if !q.allow_free_text => {
                return Err(ClarifierError::InvalidAnswer {
                    element: q.element_id.clone(),
                    reason: "question does not accept free text".into(),
                })
            }
            Answer::FreeText(v) => Answer::FreeText(v.trim().to_owned()),
            Answer::Skipped => Answer::Skipped,
        };
        answers.insert(q.element_id.clone(), answer);
    }

    let traj = &mut session.trajectory;
    for (id, answer) in &answers {
        match answer.value() {
            Some(v) => {
                if let Some(old) = traj.resolved.get(id) {
                    if old != v {
                        traj.contradictions.push(format!("{id}: {old:?} -> {v:?}"));
                    }
                }
                traj.no_preference.remove(id);
                traj.resolved.insert(id.clone(), v.to_owned());
            }
            None => {
                traj.no_preference.insert(id.clone());
            }
        }
    }

    if session.config.cross_layer_extraction {
        if let Some(backend) = extractor {
            extract_cross_layer(session, &answers, backend)?;
        }
    }

    session.pending = None;
    if !table.questions.is_empty() {
        session.trajectory.turns.push(Turn {
            table: table.clone(),
            response: UserResponse {
                turn_index: table.turn_index,
                answers,
            },
        });
    }
    session.advance_from(table.layer_index);
    Ok(())
}

fn extract_cross_layer(
    session: &mut SessionState,
    answers: &BTreeMap<ElementId, Answer>,
    backend: &dyn ChatBackend,
) -> Result<(), ClarifierError> {
    let future: Vec<ElementBrief> = session
        .schema
        .elements
        .iter()
        .filter(|e| !session.is_settled(&e.id) && !answers.contains_key(&e.id))
        .map(ElementBrief::from)
        .collect();
    if future.is_empty() {
        return Ok(());
    }
    for text in answers.values().filter_map(|a| match a {
        Answer::FreeText(t) => Some(t.clone()),
        _ => None,
    }) {
        let elements = future.iter().map(|b| format!("- {}: {}", b.id, b.name)).collect::<Vec<_>>().join("\n");
        let prompt = session.config.templates.render("extract", &[("text", &text), ("elements", &elements)]);
        let request = ChatRequest {
            messages: vec![ChatMessage::user(prompt)],
            decoding: session.config.decoding.clone(),
            response_format: ResponseFormat::Json,
            task: Some(TaskHint {
                kind: TaskKind::Extract,
                payload: json!({"text": text, "elements": future}),
            }),
        };
        let reply = backend.chat_complete(&request)?;
        let found: BTreeMap<String, String> = extract_json(&reply.text).unwrap_or_default();
        for (id, v) in found {
            let id = ElementId::new(id);
            if future.iter().any(|b| b.id == id.0) && !v.trim().is_empty() && !session.is_settled(&id) {
                session.trajectory.resolved.insert(id, v.trim().to_owned());
            }
        }
    }
    Ok(())
}

/// Context the final output is generated from, `(x, t_{1:K})`. Also the
/// context under which its tokens are scored for confidence.
pub fn final_context(schema: &IntentSchema, trajectory: &Trajectory, templates: &PromptTemplates) -> Vec<ChatMessage> {
    let entries = settled_entries(schema, trajectory);
    vec![ChatMessage::user(templates.render(
        "finalize",
        &[
            ("instruction", &trajectory.instruction.text),
            ("history", &history_text(&entries)),
        ],
    ))]
}

pub fn finalize_output(session: &mut SessionState, backend: &dyn ChatBackend) -> Result<String, ClarifierError> {
    require_status(session, SessionStatus::Finalizing, "finalize_output")?;
    let payload = FinalizePayload {
        instruction: session.trajectory.instruction.text.clone(),
        domain: session.schema.domain.clone(),
        intent: session.schema.intent.clone(),
        settled: session.settled_entries(),
    };
    let request = ChatRequest {
        messages: final_context(&session.schema, &session.trajectory, &session.config.templates),
        decoding: session.config.decoding.clone(),
        response_format: ResponseFormat::Text,
        task: Some(TaskHint {
            kind: TaskKind::Finalize,
            payload: serde_json::to_value(&payload).expect("payload serializes"),
        }),
    };
    let y = backend.chat_complete(&request)?.text;
    session.trajectory.final_output = Some(y.clone());
    session.status = SessionStatus::Completed;
    Ok(y)
}

pub fn abort(session: &mut SessionState) -> Result<(), ClarifierError> {
    match session.status {
        SessionStatus::Clarifying | SessionStatus::Finalizing => {
            session.status = SessionStatus::Aborted;
            session.pending = None;
            Ok(())
        }
        s => Err(ClarifierError::IllegalState(format!("cannot abort a {s:?} session"))),
    }
}
