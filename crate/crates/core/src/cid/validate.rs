use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{format_path, CidDataset, ElementId, IntentSchema};
use crate::text::canonical_label;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DanglingPrerequisite { element: ElementId, missing: ElementId },
    UnknownElement { element: ElementId },
    Cycle { witness: Vec<ElementId> },
    DuplicateElementId { element: ElementId },
    DuplicateElementName { name: String },
    EmptyName { element: ElementId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DanglingPrerequisite { element, missing } => {
                write!(f, "prerequisite {missing} of {element} is not a defined element")
            }
            Violation::UnknownElement { element } => {
                write!(f, "prerequisites listed for undefined element {element}")
            }
            Violation::Cycle { witness } => write!(f, "cycle {}", format_path(witness)),
            Violation::DuplicateElementId { element } => write!(f, "duplicate element id {element}"),
            Violation::DuplicateElementName { name } => write!(f, "duplicate element name {name:?}"),
            Violation::EmptyName { element } => write!(f, "element {element} has an empty name"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    SelfLoop { element: ElementId },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::SelfLoop { element } => write!(f, "self-loop {element} stripped"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema: String,
    pub errors: Vec<Violation>,
    pub warnings: Vec<Warning>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.errors.iter().map(ToString::to_string).collect()
    }
}

/// Check a schema and return the report together with a sanitized copy.
///
/// The sanitized copy differs from the input only in that self-loops are
/// removed. Validation never fails; callers gate on
/// [`ValidationReport::is_valid`].
pub fn validate_schema(schema: &IntentSchema) -> (ValidationReport, IntentSchema) {
    let mut report = ValidationReport {
        schema: schema.key(),
        ..Default::default()
    };

    let mut seen_ids = HashSet::new();
    let mut seen_names = HashSet::new();
    for e in &schema.elements {
        if !seen_ids.insert(&e.id) {
            report
                .errors
                .push(Violation::DuplicateElementId { element: e.id.clone() });
        }
        let name = canonical_label(&e.name);
        if name.is_empty() {
            report
                .errors
                .push(Violation::EmptyName { element: e.id.clone() });
        } else if !seen_names.insert(name) {
            report
                .errors
                .push(Violation::DuplicateElementName { name: e.name.clone() });
        }
    }

    let ids = schema.element_ids();
    let mut sanitized = schema.clone();
    for (owner, pres) in sanitized.prerequisites.iter_mut() {
        if !ids.contains(owner) {
            report
                .errors
                .push(Violation::UnknownElement { element: owner.clone() });
        }
        if pres.contains(owner) {
            report
                .warnings
                .push(Warning::SelfLoop { element: owner.clone() });
            pres.retain(|p| p != owner);
        }
        for p in pres.iter() {
            if !ids.contains(p) {
                report.errors.push(Violation::DanglingPrerequisite {
                    element: owner.clone(),
                    missing: p.clone(),
                });
            }
        }
    }

    for witness in find_cycles(&sanitized) {
        report.errors.push(Violation::Cycle { witness });
    }

    (report, sanitized)
}

/// Cycles reachable in the prerequisite graph, one witness per distinct node
/// set, each written as a closed path `a→b→…→a` following prerequisite
/// edges. Dangling references are ignored here.
pub(crate) fn find_cycles(schema: &IntentSchema) -> Vec<Vec<ElementId>> {
    let ids = schema.element_ids();
    let graph: BTreeMap<&ElementId, BTreeSet<&ElementId>> = ids
        .iter()
        .map(|id| {
            let next = schema
                .prerequisites_of(id)
                .iter()
                .filter(|p| ids.contains(*p))
                .collect();
            (id, next)
        })
        .collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: BTreeMap<&ElementId, Mark> = ids.iter().map(|i| (i, Mark::New)).collect();
    let mut cycles = Vec::new();
    let mut seen_sets: HashSet<BTreeSet<&ElementId>> = HashSet::new();

    for root in ids.iter() {
        if mark[root] != Mark::New {
            continue;
        }
        // Iterative DFS; `path` mirrors the active stack.
        let mut stack: Vec<(&ElementId, Vec<&ElementId>)> =
            vec![(root, graph[root].iter().rev().copied().collect())];
        let mut path = vec![root];
        mark.insert(root, Mark::Active);
        while let Some((node, pending)) = stack.last_mut() {
            if let Some(next) = pending.pop() {
                match mark[next] {
                    Mark::New => {
                        mark.insert(next, Mark::Active);
                        path.push(next);
                        stack.push((next, graph[next].iter().rev().copied().collect()));
                    }
                    Mark::Active => {
                        let start = path.iter().position(|n| *n == next).expect("active on path");
                        let members: BTreeSet<_> = path[start..].iter().copied().collect();
                        if seen_sets.insert(members) {
                            let mut witness: Vec<ElementId> =
                                path[start..].iter().map(|n| (*n).clone()).collect();
                            witness.push(next.clone());
                            cycles.push(witness);
                        }
                    }
                    Mark::Done => {}
                }
            } else {
                mark.insert(*node, Mark::Done);
                path.pop();
                stack.pop();
            }
        }
    }
    cycles
}

/// One report per schema, in dataset order.
pub fn validate_dataset(dataset: &CidDataset) -> Vec<ValidationReport> {
    dataset.schemas.iter().map(|s| validate_schema(s).0).collect()
}
