use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use prism_core::backend::{BackendConfig, ChatBackend};
use prism_core::cid::{import_dataset, lookup, seed_dataset, validate_dataset, CidDataset, IntentSchema};
use prism_core::clarifier::{
    finalize_output, generate_table, ClarifierConfig, SessionState, SessionStatus, TrajectoryRecord, UserInstruction,
};
use prism_core::decomposer::{Decomposer, DecomposerConfig};
use prism_core::evolution::{run_evolution_round, RoundConfig};
use prism_core::metrics::{evaluate, BackendJudge, EvalRequest, ExecutionLog, GoldAnnotation, JudgeProvider};
use prism_core::prompts::PromptTemplates;
use prism_core::reward::{
    intent_aware_reward, reward_trace, IntentAwareReward, LexicalSaliency, Normalization, RecordedSaliency,
    RewardTrace, SaliencyProvider,
};
use prism_core::sampler::{run_rollout, Noise, SamplerConfig, SimulatorProfile};
use prism_core::similarity::LexicalProvider;
use prism_service::{AppState, ServiceConfig};
use serde::{Deserialize, Serialize};

use crate::config::{self, CliConfig};
use crate::{Cli, Command, EstimatorKind, Provider, DEFAULT_SEED};

/// A failed command: usage problems exit 2, everything else 1.
pub enum Failure {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Domain(_) => ExitCode::from(1),
        }
    }

    pub fn report(&self, json: bool) {
        let (kind, e) = match self {
            Failure::Usage(e) => ("usage", e),
            Failure::Domain(e) => ("domain", e),
        };
        if json {
            let causes: Vec<String> = e.chain().skip(1).map(ToString::to_string).collect();
            let doc = serde_json::json!({"error": {"kind": kind, "message": e.to_string(), "causes": causes}});
            eprintln!("{doc}");
        } else {
            eprintln!("error: {e:#}");
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Domain(e.into())
    }
}

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

struct Ctx {
    cfg: CliConfig,
    /// From `--seed` or the config file, if either gave one.
    explicit_seed: Option<u64>,
    seed: u64,
    json: bool,
}

impl Ctx {
    fn backend(&self) -> anyhow::Result<Arc<dyn ChatBackend>> {
        let cfg = self.cfg.backend.clone().unwrap_or_else(BackendConfig::from_env);
        Ok(cfg.build()?)
    }

    fn dataset(&self) -> anyhow::Result<CidDataset> {
        match &self.cfg.dataset {
            Some(p) => read_dataset(p),
            None => Ok(seed_dataset()),
        }
    }
}

fn read_dataset(path: &Path) -> anyhow::Result<CidDataset> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    import_dataset(&bytes).with_context(|| format!("importing {}", path.display()))
}

fn emit<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let cfg = match config::discover(cli.config.as_deref()) {
        Some(path) => config::load(&path).map_err(usage)?,
        None => CliConfig::default(),
    };
    let explicit_seed = cli.seed.or(cfg.seed);
    let ctx = Ctx {
        explicit_seed,
        seed: explicit_seed.unwrap_or(DEFAULT_SEED),
        json: cli.json,
        cfg,
    };
    match cli.command {
        Command::Validate { file } => validate(&ctx, &file),
        Command::Decompose { instruction } => decompose(&ctx, &instruction),
        Command::Simulate {
            instruction,
            profile,
            n,
            out,
        } => simulate(&ctx, &instruction, &profile, n, out.as_deref()),
        Command::Reward {
            trajectory,
            provider,
            saliency,
            estimator,
            n,
            turn,
            profile,
            raw,
        } => {
            let provider: Box<dyn SaliencyProvider> = match (provider, saliency) {
                (Provider::Lexical, _) => Box::new(LexicalSaliency),
                (Provider::Nli, Some(path)) => Box::new(RecordedSaliency::load(&path).map_err(|e| usage(e.into()))?),
                (Provider::Nli, None) => return Err(usage(anyhow!("--provider nli requires --saliency <file>"))),
            };
            let opts = RewardOpts {
                estimator,
                n,
                turn,
                profile,
                normalization: if raw { Normalization::Raw } else { Normalization::PerToken },
            };
            reward(&ctx, &trajectory, provider.as_ref(), &opts)
        }
        Command::GenerateData { config, force } => generate(&ctx, &config, force),
        Command::Evaluate {
            trajectories,
            gold,
            logs,
            judge,
        } => evaluate_cmd(&ctx, &trajectories, gold.as_deref(), logs.as_deref(), judge),
        Command::Serve { addr, data_dir } => serve(&ctx, addr, data_dir),
    }
}

#[derive(Serialize)]
struct ValidateOutput<'a> {
    valid: bool,
    reports: &'a [prism_core::cid::ValidationReport],
}

fn validate(ctx: &Ctx, file: &Path) -> Result<ExitCode, Failure> {
    let dataset = read_dataset(file)?;
    let reports = validate_dataset(&dataset);
    let valid = reports.iter().all(|r| r.is_valid());
    if ctx.json {
        emit(&ValidateOutput {
            valid,
            reports: &reports,
        })?;
    } else {
        for r in &reports {
            println!("{} {}", if r.is_valid() { "ok     " } else { "invalid" }, r.schema);
            for w in &r.warnings {
                println!("    warning: {w}");
            }
            for e in &r.errors {
                println!("    error: {e}");
            }
        }
        let bad = reports.iter().filter(|r| !r.is_valid()).count();
        println!("{} schemas, {} invalid", reports.len(), bad);
    }
    Ok(if valid { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn decompose(ctx: &Ctx, instruction: &str) -> Result<ExitCode, Failure> {
    let backend = ctx.backend()?;
    let dataset = ctx.dataset()?;
    let x = UserInstruction::new("cli", instruction).map_err(|e| usage(e.into()))?;
    let d = Decomposer::new(DecomposerConfig::default(), Box::new(LexicalProvider))
        .decompose(&x, &dataset, backend.as_ref())
        .context("decomposition failed")?;
    emit(&d)?;
    Ok(ExitCode::SUCCESS)
}

/// Simulated user profile as written by hand: preferences are keyed by
/// element name or id.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProfileFile {
    persona: String,
    preferences: BTreeMap<String, String>,
    skip_probability: f64,
    noise: Noise,
}

fn read_profile(path: &Path) -> Result<ProfileFile, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    serde_yaml::from_str(&text)
        .with_context(|| format!("parsing profile {}", path.display()))
        .map_err(usage)
}

fn to_profile(p: &ProfileFile, schema: &IntentSchema) -> anyhow::Result<SimulatorProfile> {
    let mut profile = SimulatorProfile::from_named(schema, &p.preferences, p.skip_probability)?;
    profile.persona = p.persona.clone();
    profile.noise = p.noise;
    Ok(profile)
}

fn simulate(ctx: &Ctx, instruction: &str, profile: &Path, n: usize, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let wanted = read_profile(profile)?;
    let backend = ctx.backend()?;
    let dataset = ctx.dataset()?;
    let x = UserInstruction::new("sim", instruction).map_err(|e| usage(e.into()))?;
    let d = Decomposer::new(DecomposerConfig::default(), Box::new(LexicalProvider))
        .decompose(&x, &dataset, backend.as_ref())
        .context("decomposition failed")?;
    let profile = to_profile(&wanted, &d.schema)?;
    let cfg = SamplerConfig {
        master_seed: ctx.seed,
        ..SamplerConfig::default()
    };
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("sim-{i:03}");
        let x = UserInstruction::new(id.clone(), instruction).map_err(|e| usage(e.into()))?;
        let mut s = SessionState::new(id.clone(), x, &d.schema, ClarifierConfig::default())?;
        let trajectory = if s.status == SessionStatus::Clarifying {
            generate_table(&mut s, backend.as_ref())?;
            let mut r = run_rollout(&s, &profile, backend.as_ref(), &cfg, i)?;
            r.trajectory.final_output = Some(r.final_output);
            r.trajectory
        } else {
            finalize_output(&mut s, backend.as_ref())?;
            s.trajectory.clone()
        };
        let mut rec = TrajectoryRecord::from_trajectory(&id, &d.schema.domain, &d.schema.intent, &trajectory);
        rec.layers = d.layered.as_id_lists();
        records.push(rec);
    }
    match out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            TrajectoryRecord::write_jsonl(std::io::BufWriter::new(f), &records)?;
        }
        None => TrajectoryRecord::write_jsonl(std::io::stdout().lock(), &records)?,
    }
    Ok(ExitCode::SUCCESS)
}

struct RewardOpts {
    estimator: Option<EstimatorKind>,
    n: usize,
    turn: Option<usize>,
    profile: Option<PathBuf>,
    normalization: Normalization,
}

#[derive(Serialize)]
struct RewardOutput {
    session_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<RewardTrace>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    intent_aware: Vec<IntentAwareReward>,
}

fn reward(ctx: &Ctx, path: &Path, provider: &dyn SaliencyProvider, opts: &RewardOpts) -> Result<ExitCode, Failure> {
    let records = read_records(path)?;
    let wanted = opts.profile.as_deref().map(read_profile).transpose()?;
    let backend = ctx.backend()?;
    let dataset = ctx.dataset()?;
    let templates = PromptTemplates::default();
    let mut outputs = Vec::new();
    for rec in &records {
        let schema = lookup(&dataset, &rec.schema.domain, &rec.schema.intent)
            .ok_or_else(|| anyhow!("no schema for {} / {}", rec.schema.domain, rec.schema.intent))?;
        let t = rec.to_trajectory();
        let trace = match &t.final_output {
            Some(_) => Some(reward_trace::<f64>(schema, &t, backend.as_ref(), provider, &templates, opts.normalization)?),
            None => None,
        };
        let mut intent_aware = Vec::new();
        if let Some(kind) = opts.estimator {
            let profile = match &wanted {
                Some(p) => to_profile(p, schema)?,
                None => SimulatorProfile::scripted(rec.resolved.clone(), 0.0),
            };
            let cfg = SamplerConfig {
                n: opts.n,
                master_seed: ctx.seed,
                exhaustive: kind == EstimatorKind::Exhaustive,
                ..SamplerConfig::default()
            };
            let turns: Vec<usize> = match opts.turn {
                Some(j) => vec![j],
                None => (1..=t.turns.len()).collect(),
            };
            for j in turns {
                let prefix = rec.prefix_session(schema, j, ClarifierConfig::default())?;
                intent_aware.push(intent_aware_reward::<f64>(&prefix, &profile, &cfg, backend.as_ref(), provider, opts.normalization)?);
            }
        }
        outputs.push(RewardOutput {
            session_id: rec.session_id.clone(),
            trace,
            intent_aware,
        });
    }
    if ctx.json {
        emit(&outputs)?;
    } else {
        for o in &outputs {
            let r = o.trace.as_ref().map_or("n/a".to_owned(), |t| format!("{:.6}", t.r_star));
            println!("{}  R*={}", o.session_id, r);
            for ir in &o.intent_aware {
                println!("    {}  IR={:.6}  ({} samples)", ir.history_ref, ir.value, ir.samples.len());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>, Failure> {
    let f = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(usage)?;
    TrajectoryRecord::read_jsonl(BufReader::new(f)).map_err(|e| Failure::Domain(anyhow!("{}: {e}", path.display())))
}

fn generate(ctx: &Ctx, path: &Path, force: bool) -> Result<ExitCode, Failure> {
    let mut cfg = RoundConfig::load(path).map_err(|e| usage(e.into()))?;
    if let Some(seed) = ctx.explicit_seed {
        cfg.seed = seed;
    }
    let manifest = run_evolution_round(&cfg, force)?;
    if ctx.json {
        emit(&manifest)?;
    } else {
        println!(
            "round {}: {} of {} instructions, {} SFT examples, {} DPO pairs ({} decision points skipped) -> {}",
            manifest.round,
            manifest.n_trajectories,
            manifest.n_instructions,
            manifest.sft_count,
            manifest.dpo_count,
            manifest.dpo_skipped,
            cfg.output_dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn read_json_array<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<Vec<T>, Failure> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let f = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(usage)?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Domain)
}

fn evaluate_cmd(
    ctx: &Ctx,
    pattern: &str,
    gold: Option<&Path>,
    logs: Option<&Path>,
    judge: bool,
) -> Result<ExitCode, Failure> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| usage(anyhow!("bad glob {pattern:?}: {e}")))?
        .collect::<Result<_, _>>()
        .context("listing trajectory files")?;
    paths.sort();
    if paths.is_empty() {
        return Err(usage(anyhow!("no files match {pattern:?}")));
    }
    let mut records = Vec::new();
    for p in &paths {
        records.extend(read_records(p)?);
    }
    let gold: Vec<GoldAnnotation> = read_json_array(gold)?;
    let logs: Vec<ExecutionLog> = read_json_array(logs)?;
    let dataset = ctx.dataset()?;
    let judge_impl = if judge {
        Some(BackendJudge::new(ctx.backend()?, Arc::new(PromptTemplates::default())))
    } else {
        None
    };
    let report = evaluate::<f64>(
        &records,
        &dataset,
        &gold,
        judge_impl.as_ref().map(|j| j as &dyn JudgeProvider),
        &logs,
        EvalRequest { reasonableness: judge },
    )?;
    if ctx.json {
        emit(&report)?;
    } else {
        print!("{}", report.render_table());
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(ctx: &Ctx, addr: std::net::SocketAddr, data_dir: Option<PathBuf>) -> Result<ExitCode, Failure> {
    let mut config = ServiceConfig::from_env();
    if data_dir.is_some() {
        config.data_dir = data_dir;
    }
    let state = AppState::new(ctx.backend()?, ctx.dataset()?, config).context("opening session journal")?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(prism_service::serve(addr, state)).context("serving")?;
    Ok(ExitCode::SUCCESS)
}
