use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::cid::{ElementId, IntentSchema};

/// A question asked before all of its element's prerequisites were settled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub turn_index: usize,
    pub element_id: ElementId,
    pub missing: Vec<ElementId>,
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("turn {turn} asks about {element}, which the schema does not define")]
    UnknownElement { turn: usize, element: ElementId },
    #[error("turn indices must increase: {previous} then {found}")]
    TurnOrder { previous: usize, found: usize },
    #[error("turn {turn} answers {element}, which its table did not ask")]
    UnaskedAnswer { turn: usize, element: ElementId },
}

/// Replay a trajectory against the schema's prerequisites.
///
/// An element counts as settled from the turn after it was answered or
/// skipped. Elements resolved without ever being asked (cross-layer
/// extraction) count as settled from the start. Self-prerequisites are
/// ignored.
pub fn check_conflicts(trajectory: &Trajectory, schema: &IntentSchema) -> Result<Vec<ConflictRecord>, ReplayError> {
    let known = schema.element_ids();
    let asked = trajectory.asked_elements();
    let mut settled: BTreeSet<ElementId> = trajectory
        .resolved
        .keys()
        .chain(trajectory.no_preference.iter())
        .filter(|id| !asked.contains(*id))
        .cloned()
        .collect();

    let mut conflicts = Vec::new();
    let mut previous = 0;
    for turn in &trajectory.turns {
        let j = turn.table.turn_index;
        if j <= previous {
            return Err(ReplayError::TurnOrder { previous, found: j });
        }
        previous = j;
        let mut newly = BTreeMap::new();
        for q in &turn.table.questions {
            let e = &q.element_id;
            if !known.contains(e) {
                return Err(ReplayError::UnknownElement {
                    turn: j,
                    element: e.clone(),
                });
            }
            let missing: Vec<ElementId> = schema
                .prerequisites_of(e)
                .iter()
                .filter(|p| *p != e && !settled.contains(*p))
                .cloned()
                .collect();
            if !missing.is_empty() {
                conflicts.push(ConflictRecord {
                    turn_index: j,
                    element_id: e.clone(),
                    missing,
                });
            }
            newly.insert(e.clone(), ());
        }
        if let Some(extra) = turn.response.answers.keys().find(|id| !newly.contains_key(*id)) {
            return Err(ReplayError::UnaskedAnswer {
                turn: j,
                element: extra.clone(),
            });
        }
        // an unanswered question is a skip, so every asked element settles
        settled.extend(newly.into_keys());
    }
    Ok(conflicts)
}
