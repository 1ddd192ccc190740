//! Forward rollouts of a clarification session under a simulated user.
//!
//! A rollout clones a session that is waiting on a table, answers it and
//! every later table with the simulator, and finalizes. Rollout `i` is
//! seeded from `(master_seed, i)` alone, so results do not depend on how
//! rollouts are scheduled across workers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, Decoding, TaskHint, TaskKind};
use crate::cid::{ElementId, IntentSchema};
use crate::clarifier::{
    apply_user_response, finalize_output, generate_table, Answer, ClarificationTable, ClarifierError,
    SessionState, SessionStatus, Trajectory, Turn, UserResponse,
};
use crate::protocol::{extract_json, AnswerSetDraft, SimQuestion, SimulatePayload};
use crate::repair::{Ask, AskError};
use crate::scalar::Scalar;
use crate::text::canonical_label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    #[default]
    None,
    /// Free-text answers are wrapped in conversational filler.
    Paraphrase,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorProfile {
    pub persona: String,
    pub ground_truth: BTreeMap<ElementId, String>,
    pub skip_probability: f64,
    pub noise: Noise,
}

impl SimulatorProfile {
    pub fn scripted(ground_truth: BTreeMap<ElementId, String>, skip_probability: f64) -> Self {
        SimulatorProfile {
            ground_truth,
            skip_probability,
            ..SimulatorProfile::default()
        }
    }

    /// Build a profile whose preferences are keyed by element id or name.
    pub fn from_named(
        schema: &IntentSchema,
        preferences: &BTreeMap<String, String>,
        skip_probability: f64,
    ) -> Result<Self, SamplerError> {
        let mut ground_truth = BTreeMap::new();
        for (k, v) in preferences {
            let e = schema
                .resolve_element(k)
                .ok_or_else(|| SamplerError::InvalidProfile(format!("{k:?} is not an element of {}", schema.key())))?;
            ground_truth.insert(e.id.clone(), v.clone());
        }
        Ok(SimulatorProfile::scripted(ground_truth, skip_probability))
    }

    pub fn validate(&self, schema: &IntentSchema) -> Result<(), SamplerError> {
        if !(0.0..=1.0).contains(&self.skip_probability) {
            return Err(SamplerError::InvalidProfile(format!(
                "skip_probability {} is outside [0, 1]",
                self.skip_probability
            )));
        }
        if let Some(k) = self.ground_truth.keys().find(|k| schema.element(k).is_none()) {
            return Err(SamplerError::InvalidProfile(format!("ground truth names unknown element {k}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulatorMode {
    #[default]
    Scripted,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n: usize,
    pub master_seed: u64,
    /// Enumerate the simulator's outcome tree instead of sampling.
    pub exhaustive: bool,
    pub max_leaves: usize,
    /// Worker bound; `None` uses the global pool.
    pub workers: Option<usize>,
    pub simulator: SimulatorMode,
    /// Decoding for the role-played user in LLM mode.
    pub simulator_decoding: Decoding,
    pub max_repairs: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n: 3,
            master_seed: 0,
            exhaustive: false,
            max_leaves: 4096,
            workers: None,
            simulator: SimulatorMode::Scripted,
            simulator_decoding: Decoding {
                temperature: 0.7,
                ..Decoding::default()
            },
            max_repairs: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid simulator profile: {0}")]
    InvalidProfile(String),
    #[error("rollouts start from a clarifying session with a pending table")]
    NoPendingTable,
    #[error("n must be at least 1")]
    ZeroRollouts,
    #[error("exhaustive enumeration needs deterministic tables and the scripted simulator")]
    NotEnumerable,
    #[error("outcome tree has more than {0} leaves")]
    TooManyLeaves(usize),
    #[error("rollout {index} failed: {cause}")]
    Rollout {
        index: usize,
        #[source]
        cause: ClarifierError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One binary decision the scripted simulator took.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchTaken {
    pub skip_probability: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub id: String,
    pub session_id: String,
    /// Turn index of the table the rollout starts at.
    pub turn: usize,
    pub index: usize,
    pub seed: u64,
    pub decoding: Decoding,
    /// Turns of the full trajectory that were given rather than simulated.
    pub prefix_turns: usize,
    pub trajectory: Trajectory,
    pub final_output: String,
    /// Set by exhaustive enumeration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchTaken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_star: Option<f64>,
}

impl RolloutRecord {
    pub fn prefix(&self) -> &[Turn] {
        &self.trajectory.turns[..self.prefix_turns]
    }

    pub fn forward(&self) -> &[Turn] {
        &self.trajectory.turns[self.prefix_turns..]
    }

    /// Probability of this leaf under the simulator; one for sampled
    /// rollouts.
    pub fn weight<S: Scalar>(&self) -> S {
        self.branches.iter().fold(S::one(), |w, b| {
            let p = S::from_real(b.skip_probability);
            w * if b.skipped { p } else { S::one() - p }
        })
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(mix(master) ^ index)
}

/// Scripted answers; `skip(p)` decides the questions without ground truth
/// when `0 < p < 1`.
fn scripted_answers(table: &ClarificationTable, profile: &SimulatorProfile, mut skip: impl FnMut(f64) -> bool) -> UserResponse {
    let p = profile.skip_probability;
    let answers = table
        .questions
        .iter()
        .map(|q| {
            let answer = match profile.ground_truth.get(&q.element_id) {
                Some(v) => match q.options.iter().find(|o| canonical_label(o) == canonical_label(v)) {
                    Some(o) => Answer::Option(o.clone()),
                    None => match profile.noise {
                        Noise::None => Answer::FreeText(v.clone()),
                        Noise::Paraphrase => Answer::FreeText(format!("I'd like {v}, I think")),
                    },
                },
                None if q.options.is_empty() || p >= 1.0 => Answer::Skipped,
                None if p <= 0.0 => Answer::Option(q.options[0].clone()),
                None if skip(p) => Answer::Skipped,
                None => Answer::Option(q.options[0].clone()),
            };
            (q.element_id.clone(), answer)
        })
        .collect();
    UserResponse {
        turn_index: table.turn_index,
        answers,
    }
}

/// Scripted simulator.
pub fn simulate_user_response(table: &ClarificationTable, profile: &SimulatorProfile, rng: &mut impl Rng) -> UserResponse {
    scripted_answers(table, profile, |p| rng.gen::<f64>() < p)
}

/// Role-play the user through the backend.
pub fn simulate_user_response_llm(
    session: &SessionState,
    table: &ClarificationTable,
    profile: &SimulatorProfile,
    backend: &dyn ChatBackend,
    decoding: &Decoding,
    max_repairs: usize,
) -> Result<UserResponse, ClarifierError> {
    let schema = &session.schema;
    let name = |id: &ElementId| schema.element(id).map(|e| e.name.clone()).unwrap_or_default();
    let questions: Vec<SimQuestion> = table
        .questions
        .iter()
        .map(|q| SimQuestion {
            element_id: q.element_id.0.clone(),
            name: name(&q.element_id),
            text: q.question_text.clone(),
            options: q.options.clone(),
        })
        .collect();
    let question_text = questions
        .iter()
        .map(|q| {
            if q.options.is_empty() {
                format!("- {} ({}): {}", q.element_id, q.name, q.text)
            } else {
                format!("- {} ({}): {} Options: {}", q.element_id, q.name, q.text, q.options.join(" | "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let preferences = if profile.ground_truth.is_empty() {
        "(none stated)".to_owned()
    } else {
        profile
            .ground_truth
            .iter()
            .map(|(id, v)| format!("- {}: {}", name(id), v))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let persona = if profile.persona.trim().is_empty() { "a typical user" } else { profile.persona.as_str() };
    let prompt = session.config.templates.render(
        "simulate",
        &[("persona", persona), ("preferences", &preferences), ("questions", &question_text)],
    );
    let payload = SimulatePayload {
        persona: persona.to_owned(),
        questions,
        ground_truth: profile.ground_truth.iter().map(|(k, v)| (k.0.clone(), v.clone())).collect(),
        skip_probability: profile.skip_probability,
    };
    let hint = TaskHint {
        kind: TaskKind::SimulateUser,
        payload: serde_json::to_value(&payload).expect("payload serializes"),
    };
    let ask = Ask {
        backend,
        templates: &session.config.templates,
        decoding: decoding.clone(),
        max_repairs,
    };
    let asked = ask.run(prompt, hint, |text| {
        let draft: AnswerSetDraft = extract_json(text).map_err(|e| vec![e])?;
        let mut errors = Vec::new();
        let mut answers = BTreeMap::new();
        for (key, a) in draft.answers {
            let Some(q) = table
                .questions
                .iter()
                .find(|q| q.element_id.as_str() == key || canonical_label(&name(&q.element_id)) == canonical_label(&key))
            else {
                errors.push(format!("{key} was not asked in this table"));
                continue;
            };
            match &a {
                Answer::Option(v) if !q.options.iter().any(|o| canonical_label(o) == canonical_label(v)) => {
                    errors.push(format!("{v:?} is not an option for {key}"))
                }
                Answer::FreeText(_) if !q.allow_free_text => errors.push(format!("{key} does not accept free text")),
                _ => {
                    answers.insert(q.element_id.clone(), a);
                }
            }
        }
        if errors.is_empty() {
            Ok(answers)
        } else {
            Err(errors)
        }
    });
    match asked {
        Ok(a) => Ok(UserResponse {
            turn_index: table.turn_index,
            answers: a.value,
        }),
        Err(AskError::Backend(e)) => Err(e.into()),
        Err(AskError::Exhausted { attempts, errors }) => Err(ClarifierError::Generation { attempts, errors }),
    }
}

fn check_prefix(prefix: &SessionState) -> Result<&ClarificationTable, SamplerError> {
    match (&prefix.status, &prefix.pending) {
        (SessionStatus::Clarifying, Some(t)) => Ok(t),
        _ => Err(SamplerError::NoPendingTable),
    }
}

/// Drive a cloned session to completion.
fn drive(
    prefix: &SessionState,
    profile: &SimulatorProfile,
    backend: &dyn ChatBackend,
    cfg: &SamplerConfig,
    seed: u64,
    skip: &mut dyn FnMut(f64) -> bool,
) -> Result<(SessionState, Decoding), ClarifierError> {
    let mut s = prefix.clone();
    if s.config.decoding.temperature > 0.0 {
        s.config.decoding.seed = Some(seed);
    }
    let decoding = s.config.decoding.clone();
    let cap = s.depth() + 1;
    let mut turns = 0;
    while s.status == SessionStatus::Clarifying {
        if turns > cap {
            return Err(ClarifierError::IllegalState(format!("rollout exceeded {cap} forward turns")));
        }
        let table = match s.pending.clone() {
            Some(t) => t,
            None => generate_table(&mut s, backend)?,
        };
        let response = match cfg.simulator {
            SimulatorMode::Scripted => scripted_answers(&table, profile, &mut *skip),
            SimulatorMode::Llm => {
                let d = Decoding {
                    seed: Some(derive_seed(seed, table.turn_index as u64)),
                    ..cfg.simulator_decoding.clone()
                };
                simulate_user_response_llm(&s, &table, profile, backend, &d, cfg.max_repairs)?
            }
        };
        apply_user_response(&mut s, response)?;
        turns += 1;
    }
    finalize_output(&mut s, backend)?;
    Ok((s, decoding))
}

fn record(prefix: &SessionState, turn: usize, index: usize, seed: u64, done: (SessionState, Decoding), branches: Vec<BranchTaken>) -> RolloutRecord {
    let (s, decoding) = done;
    RolloutRecord {
        id: format!("{}/j{}/r{}", prefix.id, turn, index),
        session_id: prefix.id.clone(),
        turn,
        index,
        seed,
        decoding,
        prefix_turns: prefix.trajectory.turn_count(),
        final_output: s.trajectory.final_output.clone().unwrap_or_default(),
        trajectory: s.trajectory,
        branches,
        r_star: None,
    }
}

/// Rollout `index` of a sampled run.
pub fn run_rollout(
    prefix: &SessionState,
    profile: &SimulatorProfile,
    backend: &dyn ChatBackend,
    cfg: &SamplerConfig,
    index: usize,
) -> Result<RolloutRecord, SamplerError> {
    let table = check_prefix(prefix)?;
    let seed = derive_seed(cfg.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut skip = |p: f64| rng.gen::<f64>() < p;
    let done = drive(prefix, profile, backend, cfg, seed, &mut skip).map_err(|cause| SamplerError::Rollout { index, cause })?;
    Ok(record(prefix, table.turn_index, index, seed, done, Vec::new()))
}

pub(crate) fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, SamplerError> {
    match workers {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| SamplerError::Pool(e.to_string())),
    }
}

/// `n` independent rollouts, ordered by index.
pub fn sample_forward_conversations(
    prefix: &SessionState,
    profile: &SimulatorProfile,
    backend: &dyn ChatBackend,
    cfg: &SamplerConfig,
) -> Result<Vec<RolloutRecord>, SamplerError> {
    check_prefix(prefix)?;
    profile.validate(&prefix.schema)?;
    if cfg.exhaustive {
        return enumerate_forward_conversations(prefix, profile, backend, cfg);
    }
    if cfg.n == 0 {
        return Err(SamplerError::ZeroRollouts);
    }
    with_pool(cfg.workers, || {
        (0..cfg.n)
            .into_par_iter()
            .map(|i| run_rollout(prefix, profile, backend, cfg, i))
            .collect::<Result<Vec<_>, _>>()
    })?
}

/// Every leaf of the scripted simulator's outcome tree, each carrying the
/// branches that lead to it.
pub fn enumerate_forward_conversations(
    prefix: &SessionState,
    profile: &SimulatorProfile,
    backend: &dyn ChatBackend,
    cfg: &SamplerConfig,
) -> Result<Vec<RolloutRecord>, SamplerError> {
    let table = check_prefix(prefix)?;
    if cfg.simulator != SimulatorMode::Scripted || prefix.config.decoding.temperature > 0.0 {
        return Err(SamplerError::NotEnumerable);
    }
    let turn = table.turn_index;
    let mut out = Vec::new();
    let mut stack: Vec<Vec<bool>> = vec![Vec::new()];
    while let Some(forced) = stack.pop() {
        if out.len() >= cfg.max_leaves {
            return Err(SamplerError::TooManyLeaves(cfg.max_leaves));
        }
        let index = out.len();
        let mut taken: Vec<BranchTaken> = Vec::new();
        let mut skip = |p: f64| {
            let s = forced.get(taken.len()).copied().unwrap_or(false);
            taken.push(BranchTaken {
                skip_probability: p,
                skipped: s,
            });
            s
        };
        let done = drive(prefix, profile, backend, cfg, cfg.master_seed, &mut skip)
            .map_err(|cause| SamplerError::Rollout { index, cause })?;
        for i in (forced.len()..taken.len()).rev() {
            let mut alt: Vec<bool> = taken[..i].iter().map(|b| b.skipped).collect();
            alt.push(true);
            stack.push(alt);
        }
        out.push(record(prefix, turn, index, cfg.master_seed, done, taken));
    }
    Ok(out)
}
