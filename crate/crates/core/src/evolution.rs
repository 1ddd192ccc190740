//! Self-evolving data generation: run clarification sessions where every
//! turn picks the best of several candidate tables by intent-aware reward,
//! then export the top trajectories for SFT and best-vs-worst candidate
//! pairs for DPO.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendConfig, BackendError, ChatBackend, ChatMessage, Decoding};
use crate::cid::{import_dataset, seed_dataset, CidDataset, CidError, IntentSchema};
use crate::clarifier::{
    apply_user_response, check_conflicts, draft_table, finalize_output, install_table, Answer, ClarificationTable,
    ClarifierConfig, ClarifierError, SessionState, SessionStatus, TrajectoryRecord, Turn, UserInstruction, UserResponse,
};
use crate::decomposer::{DecomposeError, Decomposer, DecomposerConfig};
use crate::reward::{intent_aware_reward, IntentAwareReward, LexicalSaliency, Normalization, RewardError, SaliencyProvider};
use crate::sampler::{derive_seed, simulate_user_response, SamplerConfig, SamplerError, SimulatorProfile};
use crate::similarity::LexicalProvider;

/// One instruction with the preferences of the simulated user behind it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstructionSpec {
    pub id: String,
    pub text: String,
    /// Element name (or id) to preferred value.
    #[serde(default)]
    pub preferences: BTreeMap<String, String>,
    #[serde(default)]
    pub persona: String,
    #[serde(default)]
    pub skip_probability: f64,
}

pub fn read_instructions(path: &Path) -> Result<Vec<InstructionSpec>, EvolutionError> {
    let text = fs::read_to_string(path).map_err(|e| EvolutionError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvolutionError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub table: ClarificationTable,
    pub ir: f64,
}

/// Candidate tables scored at one turn of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub session_id: String,
    pub instruction: String,
    pub turn: usize,
    pub prefix: Vec<Turn>,
    pub candidates: Vec<ScoredCandidate>,
    pub chosen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub record: TrajectoryRecord,
    pub schema: IntentSchema,
    pub ir_per_turn: Vec<IntentAwareReward>,
    /// Mean of the per-turn values.
    pub ir_total: f64,
    pub round: usize,
    pub policy_id: String,
}

impl ScoredTrajectory {
    pub fn turn_count(&self) -> usize {
        self.record.turns.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub session_id: String,
    pub turn: usize,
    pub prompt: Vec<ChatMessage>,
    pub chosen: ChatMessage,
    pub rejected: ChatMessage,
    pub ir_chosen: f64,
    pub ir_rejected: f64,
    pub margin: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("nothing to select from")]
    EmptyInput,
    #[error("invalid round config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("output directory {0} is not empty; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("only {succeeded} of {total} instructions succeeded, below the required fraction {required}")]
    TooFewSucceeded { succeeded: usize, total: usize, required: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Cid(#[from] CidError),
}

#[derive(Debug, thiserror::Error)]
enum SessionFailure {
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Clarifier(#[from] ClarifierError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub n_candidates: usize,
    /// Sampling temperature for candidates after the first, greedy one.
    pub candidate_temperature: f64,
    pub seed: u64,
    pub round: usize,
    pub policy_id: String,
    pub normalization: Normalization,
    pub sampler: SamplerConfig,
    pub workers: Option<usize>,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            n_candidates: 4,
            candidate_temperature: 1.0,
            seed: 0,
            round: 1,
            policy_id: "stub".into(),
            normalization: Normalization::PerToken,
            sampler: SamplerConfig::default(),
            workers: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Collected {
    pub scored: Vec<ScoredTrajectory>,
    pub decision_points: Vec<DecisionPoint>,
    pub failures: Vec<(String, String)>,
}

fn instruction_seed(master: u64, id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    derive_seed(master, u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

fn run_one(
    spec: &InstructionSpec,
    dataset: &CidDataset,
    backend: &dyn ChatBackend,
    provider: &dyn SaliencyProvider,
    cfg: &CollectConfig,
) -> Result<(ScoredTrajectory, Vec<DecisionPoint>), SessionFailure> {
    let x = UserInstruction::new(spec.id.clone(), spec.text.clone())?;
    let decomposer = Decomposer::new(DecomposerConfig::default(), Box::new(LexicalProvider));
    let d = decomposer.decompose(&x, dataset, backend)?;
    let mut profile = SimulatorProfile::from_named(&d.schema, &spec.preferences, spec.skip_probability)?;
    profile.persona = spec.persona.clone();
    let mut session = SessionState::new(spec.id.clone(), x, &d.schema, ClarifierConfig::default())?;

    let seed = instruction_seed(cfg.seed, &spec.id);
    let mut user_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut irs = Vec::new();
    let mut points = Vec::new();
    while session.status == SessionStatus::Clarifying {
        let j = session.current_turn();
        let mut candidates = Vec::new();
        for c in 0..cfg.n_candidates.max(1) {
            let decoding = if c == 0 {
                session.config.decoding.clone()
            } else {
                Decoding::sampled(cfg.candidate_temperature, derive_seed(seed, (j * 1000 + c) as u64))
            };
            candidates.push(draft_table(&session, backend, &decoding)?);
        }
        if candidates[0].questions.is_empty() {
            let t = install_table(&mut session, candidates.swap_remove(0))?;
            apply_user_response(&mut session, UserResponse { turn_index: t.turn_index, answers: BTreeMap::new() })?;
            continue;
        }
        let sampler = SamplerConfig {
            master_seed: derive_seed(seed, j as u64),
            ..cfg.sampler.clone()
        };
        let mut scored = Vec::with_capacity(candidates.len());
        for table in candidates {
            let mut prefix = session.clone();
            install_table(&mut prefix, table.clone())?;
            let ir = intent_aware_reward::<f64>(&prefix, &profile, &sampler, backend, provider, cfg.normalization)?;
            scored.push((table, ir));
        }
        // first maximum wins
        let best = scored
            .iter()
            .enumerate()
            .fold(0, |b, (i, (_, ir))| if ir.value > scored[b].1.value { i } else { b });
        points.push(DecisionPoint {
            session_id: spec.id.clone(),
            instruction: spec.text.clone(),
            turn: j,
            prefix: session.trajectory.turns.clone(),
            candidates: scored
                .iter()
                .map(|(t, ir)| ScoredCandidate {
                    table: t.clone(),
                    ir: ir.value,
                })
                .collect(),
            chosen: best,
        });
        let (table, ir) = scored.swap_remove(best);
        install_table(&mut session, table.clone())?;
        let response = simulate_user_response(&table, &profile, &mut user_rng);
        apply_user_response(&mut session, response)?;
        irs.push(ir);
    }
    finalize_output(&mut session, backend)?;
    let ir_total = if irs.is_empty() { 0.0 } else { irs.iter().map(|r| r.value).sum::<f64>() / irs.len() as f64 };
    Ok((
        ScoredTrajectory {
            record: TrajectoryRecord::from_session(&session),
            schema: session.schema.clone(),
            ir_per_turn: irs,
            ir_total,
            round: cfg.round,
            policy_id: cfg.policy_id.clone(),
        },
        points,
    ))
}

/// Run one reward-guided session per instruction. Failed instructions are
/// logged and reported, not fatal.
pub fn collect_trajectories(
    instructions: &[InstructionSpec],
    dataset: &CidDataset,
    backend: &dyn ChatBackend,
    cfg: &CollectConfig,
) -> Collected {
    let provider = LexicalSaliency;
    let work = || {
        instructions
            .par_iter()
            .map(|spec| (spec.id.clone(), run_one(spec, dataset, backend, &provider, cfg)))
            .collect::<Vec<_>>()
    };
    let results = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|p| p.install(work))
            .unwrap_or_else(|_| work()),
        None => work(),
    };
    let mut out = Collected::default();
    for (id, r) in results {
        match r {
            Ok((s, points)) => {
                out.scored.push(s);
                out.decision_points.extend(points);
            }
            Err(e) => {
                log::warn!("instruction {id} skipped: {e}");
                out.failures.push((id, e.to_string()));
            }
        }
    }
    out
}

/// Highest `ir_total` first; ties to fewer turns, then session id.
pub fn rank(scored: &[ScoredTrajectory]) -> Vec<&ScoredTrajectory> {
    let mut v: Vec<&ScoredTrajectory> = scored.iter().collect();
    v.sort_by(|a, b| {
        b.ir_total
            .total_cmp(&a.ir_total)
            .then(a.turn_count().cmp(&b.turn_count()))
            .then_with(|| a.record.session_id.cmp(&b.record.session_id))
    });
    v
}

/// The top `ceil(top_fraction * n)` trajectories in rank order.
pub fn select_sft_examples(scored: &[ScoredTrajectory], top_fraction: f64) -> Result<Vec<ScoredTrajectory>, EvolutionError> {
    if scored.is_empty() {
        return Err(EvolutionError::EmptyInput);
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(EvolutionError::Config(format!("top_fraction {top_fraction} is outside (0, 1]")));
    }
    let k = ((top_fraction * scored.len() as f64).ceil() as usize).min(scored.len());
    Ok(rank(scored).into_iter().take(k).cloned().collect())
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

/// Fixed text form of a table used in training data.
pub fn render_table(table: &ClarificationTable, schema: &IntentSchema) -> String {
    let mut out = String::from("| Element | Question | Options |\n|---|---|---|\n");
    for q in &table.questions {
        let name = schema.element(&q.element_id).map_or(q.element_id.as_str(), |e| e.name.as_str());
        let options = if q.options.is_empty() {
            "(free text)".to_owned()
        } else {
            let mut o = q.options.iter().map(|o| cell(o)).collect::<Vec<_>>().join(" / ");
            if q.allow_free_text {
                o.push_str(" / (free text)");
            }
            o
        };
        out.push_str(&format!("| {} | {} | {} |\n", cell(name), cell(&q.question_text), options));
    }
    out.trim_end().to_owned()
}

pub fn render_response(response: &UserResponse, schema: &IntentSchema) -> String {
    let mut lines = Vec::new();
    for e in &schema.elements {
        if let Some(a) = response.answers.get(&e.id) {
            lines.push(match a {
                Answer::Option(v) | Answer::FreeText(v) => format!("{}: {}", e.name, v),
                Answer::Skipped => format!("{}: no preference", e.name),
            });
        }
    }
    lines.join("\n")
}

fn prefix_messages(instruction: &str, prefix: &[Turn], schema: &IntentSchema) -> Vec<ChatMessage> {
    let mut m = vec![ChatMessage::user(instruction)];
    for t in prefix {
        m.push(ChatMessage::assistant(render_table(&t.table, schema)));
        m.push(ChatMessage::user(render_response(&t.response, schema)));
    }
    m
}

/// Best-vs-worst pair per decision point when the margin reaches `delta`.
/// Returns the pairs and the number of decision points skipped.
pub fn build_dpo_pairs(points: &[DecisionPoint], schemas: &BTreeMap<String, IntentSchema>, delta: f64) -> (Vec<DpoPair>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for p in points {
        let Some(schema) = schemas.get(&p.session_id) else {
            skipped += 1;
            continue;
        };
        if p.candidates.len() < 2 {
            skipped += 1;
            continue;
        }
        let mut best = 0;
        let mut worst = 0;
        for (i, c) in p.candidates.iter().enumerate() {
            if c.ir > p.candidates[best].ir {
                best = i;
            }
            if c.ir < p.candidates[worst].ir {
                worst = i;
            }
        }
        let (b, w) = (&p.candidates[best], &p.candidates[worst]);
        let margin = b.ir - w.ir;
        if margin < delta || b.table == w.table {
            skipped += 1;
            continue;
        }
        pairs.push(DpoPair {
            session_id: p.session_id.clone(),
            turn: p.turn,
            prompt: prefix_messages(&p.instruction, &p.prefix, schema),
            chosen: ChatMessage::assistant(render_table(&b.table, schema)),
            rejected: ChatMessage::assistant(render_table(&w.table, schema)),
            ir_chosen: b.ir,
            ir_rejected: w.ir,
            margin,
        });
    }
    (pairs, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub session_id: String,
    pub ir_total: f64,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub messages: Vec<ChatMessage>,
    pub meta: SftMeta,
}

pub fn sft_example(s: &ScoredTrajectory) -> SftExample {
    let t = s.record.to_trajectory();
    let mut messages = prefix_messages(&s.record.instruction, &t.turns, &s.schema);
    messages.push(ChatMessage::assistant(s.record.final_output.clone().unwrap_or_default()));
    SftExample {
        messages,
        meta: SftMeta {
            session_id: s.record.session_id.clone(),
            ir_total: s.ir_total,
            round: s.round,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoMeta {
    pub session_id: String,
    pub turn: usize,
    pub margin: f64,
    pub ir_chosen: f64,
    pub ir_rejected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoExample {
    pub prompt: Vec<ChatMessage>,
    pub chosen: Vec<ChatMessage>,
    pub rejected: Vec<ChatMessage>,
    pub meta: DpoMeta,
}

pub fn dpo_example(p: &DpoPair) -> DpoExample {
    DpoExample {
        prompt: p.prompt.clone(),
        chosen: vec![p.chosen.clone()],
        rejected: vec![p.rejected.clone()],
        meta: DpoMeta {
            session_id: p.session_id.clone(),
            turn: p.turn,
            margin: p.margin,
            ir_chosen: p.ir_chosen,
            ir_rejected: p.ir_rejected,
        },
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<usize, EvolutionError> {
    let io = |e: std::io::Error| EvolutionError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut f, &item).map_err(|e| EvolutionError::Io(e.to_string()))?;
        f.write_all(b"\n").map_err(io)?;
        n += 1;
    }
    f.flush().map_err(io)?;
    Ok(n)
}

/// YAML round configuration. Relative paths resolve against the config
/// file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub round: usize,
    #[serde(default = "default_policy")]
    pub policy_id: String,
    #[serde(default)]
    pub seed: u64,
    pub instructions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_top_fraction")]
    pub top_fraction: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_min_success")]
    pub min_success: f64,
    #[serde(default = "default_temperature")]
    pub candidate_temperature: f64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_policy() -> String {
    "stub".into()
}
fn default_candidates() -> usize {
    4
}
fn default_top_fraction() -> f64 {
    0.3
}
fn default_delta() -> f64 {
    0.05
}
fn default_min_success() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    1.0
}

impl RoundConfig {
    pub fn from_yaml(text: &str, base: &Path) -> Result<Self, EvolutionError> {
        let mut cfg: RoundConfig = serde_yaml::from_str(text).map_err(|e| EvolutionError::Config(e.to_string()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.instructions);
        rebase(&mut cfg.output_dir);
        if let Some(d) = cfg.dataset.as_mut() {
            rebase(d);
        }
        if let BackendConfig::Stub { fixtures: Some(f) } = &mut cfg.backend {
            rebase(f);
        }
        if cfg.round == 0 {
            return Err(EvolutionError::Config("round must be at least 1".into()));
        }
        cfg.base_dir = base.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EvolutionError> {
        let text = fs::read_to_string(path).map_err(|e| EvolutionError::Io(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Copy with paths made relative to the config directory where
    /// possible, for the manifest.
    pub fn portable(&self) -> Self {
        let rel = |p: &Path| -> PathBuf {
            if self.base_dir.as_os_str().is_empty() {
                return p.to_path_buf();
            }
            p.strip_prefix(&self.base_dir).map(Path::to_path_buf).unwrap_or_else(|_| {
                p.file_name().map(PathBuf::from).unwrap_or_else(|| p.to_path_buf())
            })
        };
        let mut c = self.clone();
        c.instructions = rel(&self.instructions);
        c.output_dir = rel(&self.output_dir);
        c.dataset = self.dataset.as_deref().map(rel);
        if let BackendConfig::Stub { fixtures: Some(f) } = &mut c.backend {
            *f = rel(f);
        }
        c.base_dir = PathBuf::new();
        c
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            n_candidates: self.n_candidates,
            candidate_temperature: self.candidate_temperature,
            seed: self.seed,
            round: self.round,
            policy_id: self.policy_id.clone(),
            normalization: self.normalization,
            sampler: self.sampler.clone(),
            workers: self.workers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportPaths {
    pub sft: String,
    pub dpo: String,
    pub trajectories: String,
    pub decision_points: String,
}

/// Round manifest, written as `manifest.json` next to the exports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRound {
    pub round: usize,
    pub source_policy: String,
    pub n_instructions: usize,
    pub n_trajectories: usize,
    pub sft_count: usize,
    pub dpo_count: usize,
    pub dpo_skipped: usize,
    pub failures: Vec<(String, String)>,
    pub exports: ExportPaths,
    pub config: RoundConfig,
}

fn prepare_output(dir: &Path, force: bool) -> Result<(), EvolutionError> {
    let io = |e: std::io::Error| EvolutionError::Io(format!("{}: {e}", dir.display()));
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(io)?.next().is_some();
        if occupied && !force {
            return Err(EvolutionError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(io)
}

/// Collect, select, pair, and export one round, using `backend` as the
/// policy.
pub fn run_round_with(cfg: &RoundConfig, backend: &dyn ChatBackend, force: bool) -> Result<EvolutionRound, EvolutionError> {
    prepare_output(&cfg.output_dir, force)?;
    let dataset = match &cfg.dataset {
        Some(p) => import_dataset(&fs::read(p).map_err(|e| EvolutionError::Io(format!("{}: {e}", p.display())))?)?,
        None => seed_dataset(),
    };
    let instructions = read_instructions(&cfg.instructions)?;
    let collected = collect_trajectories(&instructions, &dataset, backend, &cfg.collect_config());
    let succeeded = collected.scored.len();
    if instructions.is_empty() || (succeeded as f64) < cfg.min_success * instructions.len() as f64 {
        return Err(EvolutionError::TooFewSucceeded {
            succeeded,
            total: instructions.len(),
            required: cfg.min_success,
        });
    }
    let sft = select_sft_examples(&collected.scored, cfg.top_fraction)?;
    let schemas: BTreeMap<String, IntentSchema> = collected
        .scored
        .iter()
        .map(|s| (s.record.session_id.clone(), s.schema.clone()))
        .collect();
    let (pairs, dpo_skipped) = build_dpo_pairs(&collected.decision_points, &schemas, cfg.delta);

    let exports = ExportPaths {
        sft: "sft.jsonl".into(),
        dpo: "dpo.jsonl".into(),
        trajectories: "trajectories.jsonl".into(),
        decision_points: "decision_points.jsonl".into(),
    };
    let dir = &cfg.output_dir;
    let sft_count = write_jsonl(&dir.join(&exports.sft), sft.iter().map(sft_example))?;
    let dpo_count = write_jsonl(&dir.join(&exports.dpo), pairs.iter().map(dpo_example))?;
    write_jsonl(&dir.join(&exports.trajectories), &collected.scored)?;
    write_jsonl(&dir.join(&exports.decision_points), &collected.decision_points)?;

    let manifest = EvolutionRound {
        round: cfg.round,
        source_policy: cfg.policy_id.clone(),
        n_instructions: instructions.len(),
        n_trajectories: succeeded,
        sft_count,
        dpo_count,
        dpo_skipped,
        failures: collected.failures,
        exports,
        config: cfg.portable(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes).map_err(|e| EvolutionError::Io(e.to_string()))?;
    Ok(manifest)
}

pub fn run_evolution_round(cfg: &RoundConfig, force: bool) -> Result<EvolutionRound, EvolutionError> {
    let backend: Arc<dyn ChatBackend> = cfg.backend.build()?;
    run_round_with(cfg, backend.as_ref(), force)
}

/// True when every turn of every exported trajectory respects
/// prerequisites.
pub fn sft_conflict_free(sft: &[ScoredTrajectory]) -> bool {
    sft.iter().all(|s| {
        check_conflicts(&s.record.to_trajectory(), &s.schema).is_ok_and(|c| c.is_empty())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::StubBackend;
    use crate::clarifier::ClarificationQuestion;
    use crate::cid::ElementId;
    use proptest::prelude::*;

    fn spec(id: &str, text: &str) -> InstructionSpec {
        InstructionSpec {
            id: id.into(),
            text: text.into(),
            ..InstructionSpec::default()
        }
    }

    fn fake(id: &str, ir: f64, turns: usize) -> ScoredTrajectory {
        let s = crate::cid::testing::travel_schema();
        let mut t = crate::clarifier::Trajectory::new(UserInstruction::new(id, "x").unwrap());
        for j in 0..turns {
            t.turns.push(Turn {
                table: ClarificationTable { turn_index: j + 1, layer_index: j + 1, questions: vec![] },
                response: UserResponse { turn_index: j + 1, answers: BTreeMap::new() },
            });
        }
        ScoredTrajectory {
            record: TrajectoryRecord::from_trajectory(id, "Travel", "Plan a trip", &t),
            schema: s,
            ir_per_turn: vec![],
            ir_total: ir,
            round: 1,
            policy_id: "p".into(),
        }
    }

    #[test]
    fn single_candidate_single_path() {
        let cfg = CollectConfig {
            n_candidates: 1,
            ..CollectConfig::default()
        };
        let out = collect_trajectories(&[spec("a", "plan a trip to Japan")], &seed_dataset(), &StubBackend::lenient(), &cfg);
        assert_eq!(out.scored.len(), 1);
        let s = &out.scored[0];
        assert_eq!(s.ir_per_turn.len(), s.turn_count());
        assert_eq!(s.turn_count(), 3);
        assert!((s.ir_total - s.ir_per_turn.iter().map(|r| r.value).sum::<f64>() / 3.0).abs() < 1e-15);
        assert!(sft_conflict_free(&out.scored));
    }

    #[test]
    fn collection_is_deterministic() {
        let cfg = CollectConfig {
            n_candidates: 3,
            seed: 5,
            ..CollectConfig::default()
        };
        let specs = [spec("a", "plan a trip to Japan"), spec("b", "help me buy a laptop")];
        let ds = seed_dataset();
        let a = collect_trajectories(&specs, &ds, &StubBackend::lenient(), &cfg);
        let b = collect_trajectories(&specs, &ds, &StubBackend::lenient(), &cfg);
        assert_eq!(a, b);
        for p in &a.decision_points {
            let best = p.candidates.iter().map(|c| c.ir).fold(f64::MIN, f64::max);
            assert_eq!(p.candidates[p.chosen].ir, best);
        }
    }

    #[test]
    fn sft_selection_cases() {
        let v: Vec<ScoredTrajectory> = (0..10).map(|i| fake(&format!("s{i}"), i as f64 / 10.0, 2)).collect();
        let top = select_sft_examples(&v, 0.3).unwrap();
        let ids: Vec<_> = top.iter().map(|s| s.record.session_id.as_str()).collect();
        assert_eq!(ids, vec!["s9", "s8", "s7"]);
        assert_eq!(select_sft_examples(&v, 1.0).unwrap().len(), 10);
        let tied = vec![fake("b", 0.5, 3), fake("c", 0.5, 2), fake("a", 0.5, 3)];
        let ids: Vec<_> = select_sft_examples(&tied, 1.0).unwrap().into_iter().map(|s| s.record.session_id).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
        assert!(matches!(select_sft_examples(&[], 0.3), Err(EvolutionError::EmptyInput)));
    }

    fn point(irs: &[f64]) -> DecisionPoint {
        DecisionPoint {
            session_id: "s".into(),
            instruction: "x".into(),
            turn: 1,
            prefix: vec![],
            candidates: irs
                .iter()
                .enumerate()
                .map(|(i, ir)| ScoredCandidate {
                    table: ClarificationTable {
                        turn_index: 1,
                        layer_index: 1,
                        questions: vec![ClarificationQuestion {
                            element_id: ElementId::new("e1"),
                            question_text: format!("variant {i}"),
                            options: vec![],
                            allow_free_text: true,
                        }],
                    },
                    ir: *ir,
                })
                .collect(),
            chosen: 0,
        }
    }

    #[test]
    fn dpo_pair_cases() {
        let schemas: BTreeMap<_, _> = [("s".to_owned(), crate::cid::testing::travel_schema())].into();
        let (p, _) = build_dpo_pairs(&[point(&[0.9, 0.1])], &schemas, 0.2);
        assert_eq!(p.len(), 1);
        assert!((p[0].margin - 0.8).abs() < 1e-12);
        let (p, skipped) = build_dpo_pairs(&[point(&[0.5, 0.5])], &schemas, 0.05);
        assert!(p.is_empty());
        assert_eq!(skipped, 1);
        // all three pairings clear delta; only the extreme one is emitted
        let irs = [0.8, 0.5, 0.2];
        let clearing: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| irs[i] - irs[j] >= 0.2 - 1e-12 && i != j)
            .collect();
        assert_eq!(clearing.len(), 3);
        let (p, _) = build_dpo_pairs(&[point(&irs)], &schemas, 0.2);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].ir_chosen, p[0].ir_rejected), (0.8, 0.2));
        assert!(p[0].chosen.content.contains("variant 0") && p[0].rejected.content.contains("variant 2"));
    }

    #[test]
    fn table_syntax_is_fixed() {
        let s = crate::cid::testing::travel_schema();
        let t = ClarificationTable {
            turn_index: 1,
            layer_index: 1,
            questions: vec![ClarificationQuestion {
                element_id: ElementId::new("e1"),
                question_text: "Where to?".into(),
                options: vec!["Okinawa".into(), "A|B".into()],
                allow_free_text: true,
            }],
        };
        assert_eq!(
            render_table(&t, &s),
            "| Element | Question | Options |\n|---|---|---|\n| Destination | Where to? | Okinawa / A\\|B / (free text) |"
        );
    }

    fn round_yaml(dir: &Path) -> RoundConfig {
        let lines = ["plan a trip to Japan", "help me buy a laptop", "I want to adopt a pet"]
            .iter()
            .enumerate()
            .map(|(i, t)| serde_json::to_string(&spec(&format!("i{i}"), t)).unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(dir.join("instructions.jsonl"), lines).unwrap();
        RoundConfig::from_yaml("round: 1\nseed: 3\ninstructions: instructions.jsonl\noutput_dir: out\nn_candidates: 2\n", dir).unwrap()
    }

    #[test]
    fn round_writes_consistent_manifest_and_guards_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = round_yaml(dir.path());
        let m = run_evolution_round(&cfg, false).unwrap();
        assert_eq!(m.n_trajectories, 3);
        let lines = |f: &str| fs::read_to_string(cfg.output_dir.join(f)).unwrap().lines().count();
        assert_eq!(lines("sft.jsonl"), m.sft_count);
        assert_eq!(lines("dpo.jsonl"), m.dpo_count);
        assert_eq!(m.sft_count, 1);
        let first = fs::read(cfg.output_dir.join("sft.jsonl")).unwrap();
        assert!(matches!(run_evolution_round(&cfg, false), Err(EvolutionError::OutputExists(_))));
        run_evolution_round(&cfg, true).unwrap();
        assert_eq!(fs::read(cfg.output_dir.join("sft.jsonl")).unwrap(), first);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(RoundConfig::from_yaml("round: 1\ninstructions: a\noutput_dir: b\nbogus: 1\n", Path::new(".")).is_err());
        assert!(RoundConfig::from_yaml("round: 0\ninstructions: a\noutput_dir: b\n", Path::new(".")).is_err());
    }

    proptest! {
        #[test]
        fn adding_below_cutoff_keeps_selection(irs in proptest::collection::vec(0.0f64..1.0, 1..20), frac in 0.05f64..=1.0) {
            let v: Vec<ScoredTrajectory> = irs.iter().enumerate().map(|(i, ir)| fake(&format!("s{i:02}"), *ir, 1)).collect();
            let before = select_sft_examples(&v, frac).unwrap();
            let cutoff = before.last().unwrap().ir_total;
            let mut more = v.clone();
            more.push(fake("zz", cutoff - 1.0, 1));
            let after = select_sft_examples(&more, frac).unwrap();
            let ids = |s: &[ScoredTrajectory]| s.iter().map(|x| x.record.session_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(&ids(&after)[..before.len()], &ids(&before)[..]);
        }

        #[test]
        fn selection_equals_brute_force_sort(irs in proptest::collection::vec(0u8..5, 1..15), frac in 0.05f64..=1.0) {
            let v: Vec<ScoredTrajectory> = irs.iter().enumerate().map(|(i, ir)| fake(&format!("s{i:02}"), *ir as f64, 1 + i % 3)).collect();
            let mut brute = v.clone();
            // insertion sort under the documented order
            for i in 1..brute.len() {
                let mut j = i;
                while j > 0 && {
                    let (a, b) = (&brute[j - 1], &brute[j]);
                    (b.ir_total, std::cmp::Reverse(b.turn_count()), std::cmp::Reverse(b.record.session_id.clone()))
                        > (a.ir_total, std::cmp::Reverse(a.turn_count()), std::cmp::Reverse(a.record.session_id.clone()))
                } {
                    brute.swap(j - 1, j);
                    j -= 1;
                }
            }
            let k = (frac * v.len() as f64).ceil() as usize;
            prop_assert_eq!(select_sft_examples(&v, frac).unwrap(), brute[..k.min(v.len())].to_vec());
        }
    }
}
