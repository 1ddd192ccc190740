use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::session::{apply_user_response, install_table};
use super::{
    Answer, ClarificationQuestion, ClarificationTable, ClarifierConfig, ClarifierError, SessionState, Trajectory,
    Turn, UserInstruction, UserResponse,
};
use crate::cid::{ElementId, IntentSchema};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRef {
    pub domain: String,
    pub intent: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub element_id: ElementId,
    pub text: String,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default = "yes")]
    pub allow_free_text: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRecord {
    pub k: usize,
    pub questions: Vec<QuestionRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub answers: BTreeMap<ElementId, Answer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub j: usize,
    pub table: TableRecord,
    pub response: ResponseRecord,
}

/// One line of a trajectory JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub session_id: String,
    pub instruction: String,
    pub schema: SchemaRef,
    #[serde(default)]
    pub layers: Vec<Vec<String>>,
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_output: Option<String>,
    #[serde(default)]
    pub resolved: BTreeMap<ElementId, String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub no_preference: BTreeSet<ElementId>,
}

impl TrajectoryRecord {
    pub fn from_session(s: &SessionState) -> Self {
        let mut r = TrajectoryRecord::from_trajectory(&s.id, &s.schema.domain, &s.schema.intent, &s.trajectory);
        r.layers = s.layered.as_id_lists();
        r
    }

    pub fn from_trajectory(session_id: &str, domain: &str, intent: &str, t: &Trajectory) -> Self {
        TrajectoryRecord {
            session_id: session_id.to_owned(),
            instruction: t.instruction.text.clone(),
            schema: SchemaRef {
                domain: domain.to_owned(),
                intent: intent.to_owned(),
            },
            layers: Vec::new(),
            turns: t
                .turns
                .iter()
                .map(|turn| TurnRecord {
                    j: turn.table.turn_index,
                    table: TableRecord {
                        k: turn.table.layer_index,
                        questions: turn
                            .table
                            .questions
                            .iter()
                            .map(|q| QuestionRecord {
                                element_id: q.element_id.clone(),
                                text: q.question_text.clone(),
                                options: q.options.clone(),
                                allow_free_text: q.allow_free_text,
                            })
                            .collect(),
                    },
                    response: ResponseRecord {
                        answers: turn.response.answers.clone(),
                    },
                })
                .collect(),
            final_output: t.final_output.clone(),
            resolved: t.resolved.clone(),
            no_preference: t.no_preference.clone(),
        }
    }

    /// Rebuild the trajectory. Skips are recovered from the turn answers
    /// when the record does not list them.
    pub fn to_trajectory(&self) -> Trajectory {
        let mut t = Trajectory::new(UserInstruction {
            id: self.session_id.clone(),
            text: self.instruction.clone(),
            metadata: BTreeMap::new(),
        });
        for turn in &self.turns {
            let questions: Vec<ClarificationQuestion> = turn
                .table
                .questions
                .iter()
                .map(|q| ClarificationQuestion {
                    element_id: q.element_id.clone(),
                    question_text: q.text.clone(),
                    options: q.options.clone(),
                    allow_free_text: q.allow_free_text,
                })
                .collect();
            for q in &questions {
                let answer = turn.response.answers.get(&q.element_id);
                if matches!(answer, None | Some(Answer::Skipped)) && !self.resolved.contains_key(&q.element_id) {
                    t.no_preference.insert(q.element_id.clone());
                }
            }
            t.turns.push(Turn {
                table: ClarificationTable {
                    turn_index: turn.j,
                    layer_index: turn.table.k,
                    questions,
                },
                response: UserResponse {
                    turn_index: turn.j,
                    answers: turn.response.answers.clone(),
                },
            });
        }
        t.no_preference.extend(self.no_preference.iter().cloned());
        t.final_output = self.final_output.clone();
        t.resolved = self.resolved.clone();
        t
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<Self>, String> {
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(out)
    }

    pub fn write_jsonl<'a>(mut w: impl Write, records: impl IntoIterator<Item = &'a Self>) -> std::io::Result<()> {
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Session as it stood when table `turn` was pending: earlier turns
    /// replayed, table `turn` installed.
    pub fn prefix_session(
        &self,
        schema: &IntentSchema,
        turn: usize,
        config: ClarifierConfig,
    ) -> Result<SessionState, ClarifierError> {
        let t = self.to_trajectory();
        if turn == 0 || turn > t.turns.len() {
            return Err(ClarifierError::IllegalState(format!(
                "trajectory {} has no turn {turn}",
                self.session_id
            )));
        }
        let mut s = SessionState::new(self.session_id.clone(), t.instruction.clone(), schema, config)?;
        for past in &t.turns[..turn - 1] {
            install_table(&mut s, past.table.clone())?;
            apply_user_response(&mut s, past.response.clone())?;
        }
        install_table(&mut s, t.turns[turn - 1].table.clone())?;
        Ok(s)
    }
}
