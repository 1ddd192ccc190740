use std::collections::BTreeMap;

use prism_core::backend::{StubBackend, StubScript};
use prism_core::cid::{lookup, seed_dataset, IntentSchema};
use prism_core::clarifier::{generate_table, ClarifierConfig, SessionState, UserInstruction};
use prism_core::prompts::PromptTemplates;
use prism_core::reward::{
    intent_aware_reward, reward_trace, token_level_reward, LexicalSaliency, Normalization, RewardTrace,
};
use prism_core::sampler::{enumerate_forward_conversations, run_rollout, SamplerConfig, SimulatorProfile};
use prism_core::Rational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::{check, fixtures};

#[derive(Deserialize)]
struct TreeCase {
    instruction: String,
    schema: IntentSchema,
    profile: SimulatorProfile,
}

fn tree() -> (SessionState, SimulatorProfile, StubBackend) {
    let dir = fixtures().join("reward_tree");
    let case: TreeCase = serde_json::from_str(&std::fs::read_to_string(dir.join("case.json")).unwrap()).unwrap();
    let backend = StubBackend::new(StubScript::load(&dir.join("stub.json")).unwrap()).unwrap();
    let x = UserInstruction::new("tree", case.instruction).unwrap();
    let mut s = SessionState::new("tree", x, &case.schema, ClarifierConfig::default()).unwrap();
    generate_table(&mut s, &backend).unwrap();
    (s, case.profile, backend)
}

fn travel_prefix(id: &str, backend: &StubBackend) -> SessionState {
    let dataset = seed_dataset();
    let schema = lookup(&dataset, "Travel", "Plan a trip").unwrap();
    let x = UserInstruction::new(id, "Plan a trip to Japan").unwrap();
    let mut s = SessionState::new(id, x, schema, ClarifierConfig::default()).unwrap();
    generate_table(&mut s, backend).unwrap();
    s
}

/// Straight sum of products, accumulated from the last token backwards.
fn dot_oracle(t: &RewardTrace<f64>) -> f64 {
    let n = t.r_imp.scores.len();
    assert_eq!(n, t.r_con.scores.len());
    let mut dot = 0.0;
    for i in (0..n).rev() {
        dot += t.r_imp.scores[i] * t.r_con.scores[i];
    }
    match t.normalization {
        Normalization::Raw => dot,
        Normalization::PerToken if n == 0 => 0.0,
        Normalization::PerToken => dot / n as f64,
    }
}

// Leaves of the shipped tree (skip probability 1/4, first option otherwise):
//   Okinawa, Whale watching in Okinawa   weight 9/16   R* 7/16
//   Okinawa, skip                        weight 3/16   R* 3/20
//   skip, Snorkeling                     weight 3/16   R* 3/20
//   skip, skip                           weight 1/16   R* 0
const TREE_IR: (i64, i64) = (387, 1280);

pub fn oracle() -> crate::Outcome {
    let templates = PromptTemplates::default();
    let mut traces = Vec::new();

    let (s, profile, backend) = tree();
    let all = SamplerConfig {
        exhaustive: true,
        ..SamplerConfig::default()
    };
    let leaves = enumerate_forward_conversations(&s, &profile, &backend, &all).map_err(|e| e.to_string())?;
    check(leaves.len() == 4, || format!("tree has {} leaves", leaves.len()))?;
    for norm in [Normalization::PerToken, Normalization::Raw] {
        for leaf in &leaves {
            traces.push(reward_trace::<f64>(&s.schema, &leaf.trajectory, &backend, &LexicalSaliency, &templates, norm).map_err(|e| e.to_string())?);
        }
    }

    let lenient = StubBackend::lenient();
    let prefix = travel_prefix("oracle", &lenient);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..40 {
        let mut truth = BTreeMap::new();
        for e in &prefix.schema.elements {
            if rng.gen_bool(0.5) {
                truth.insert(e.id.clone(), format!("choice {}", rng.gen_range(0..9)));
            }
        }
        let profile = SimulatorProfile::scripted(truth, rng.gen_range(0.0..0.5));
        let cfg = SamplerConfig {
            master_seed: i,
            ..SamplerConfig::default()
        };
        let r = run_rollout(&prefix, &profile, &lenient, &cfg, 0).map_err(|e| e.to_string())?;
        let norm = if i % 2 == 0 { Normalization::PerToken } else { Normalization::Raw };
        traces.push(reward_trace::<f64>(&prefix.schema, &r.trajectory, &lenient, &LexicalSaliency, &templates, norm).map_err(|e| e.to_string())?);
    }
    let mut worst: f64 = 0.0;
    for (i, t) in traces.iter().enumerate() {
        let diff = (t.r_star - dot_oracle(t)).abs();
        worst = worst.max(diff);
        check(diff <= 1e-9, || format!("trace {i}: r_star {} vs oracle {}", t.r_star, dot_oracle(t)))?;
    }

    let exact = intent_aware_reward::<Rational>(&s, &profile, &all, &backend, &LexicalSaliency, Normalization::PerToken)
        .map_err(|e| e.to_string())?;
    let want = Rational::new(TREE_IR.0, TREE_IR.1);
    check(exact.value == want, || format!("exhaustive IR {} (want {want})", exact.value))?;
    let mut weighted = Rational::new(0, 1);
    for sample in &exact.samples {
        weighted += sample.weight * sample.r_star;
    }
    check(weighted == want, || format!("hand-weighted mean {weighted} (want {want})"))?;

    let target = TREE_IR.0 as f64 / TREE_IR.1 as f64;
    let mut mae = 0.0;
    for seed in 0..10 {
        let cfg = SamplerConfig {
            n: 200,
            master_seed: seed,
            ..SamplerConfig::default()
        };
        let mc = intent_aware_reward::<f64>(&s, &profile, &cfg, &backend, &LexicalSaliency, Normalization::PerToken).map_err(|e| e.to_string())?;
        mae += (mc.value - target).abs() / 10.0;
    }
    check(mae <= 0.05, || format!("MC mean absolute error {mae:.4} exceeds 0.05"))?;
    Ok(format!(
        "{} traces, max oracle diff {worst:.1e}; exhaustive IR = {want}; MC MAE {mae:.4}",
        traces.len()
    ))
}

pub fn point_mass() -> crate::Outcome {
    let templates = PromptTemplates::default();
    let one = SamplerConfig {
        n: 1,
        master_seed: 5,
        ..SamplerConfig::default()
    };
    let mut checked = 0;

    let lenient = StubBackend::lenient();
    let prefix = travel_prefix("point", &lenient);
    let truth = prefix
        .schema
        .elements
        .iter()
        .map(|e| (e.id.clone(), format!("my {}", e.name.to_lowercase())))
        .collect();
    let travel_profile = SimulatorProfile::scripted(truth, 0.0);
    let (tree_prefix, tree_profile, tree_backend) = tree();
    let tree_profile = SimulatorProfile {
        skip_probability: 0.0,
        ..tree_profile
    };
    let cases: [(&SessionState, &SimulatorProfile, &StubBackend); 2] =
        [(&prefix, &travel_profile, &lenient), (&tree_prefix, &tree_profile, &tree_backend)];

    for (s, profile, backend) in cases {
        for norm in [Normalization::PerToken, Normalization::Raw] {
            let rollout = run_rollout(s, profile, backend, &one, 0).map_err(|e| e.to_string())?;
            let trace = reward_trace::<f64>(&s.schema, &rollout.trajectory, backend, &LexicalSaliency, &templates, norm).map_err(|e| e.to_string())?;
            let direct = token_level_reward(&trace.r_imp, &trace.r_con, norm).map_err(|e| e.to_string())?;
            let ir = intent_aware_reward::<f64>(s, profile, &one, backend, &LexicalSaliency, norm).map_err(|e| e.to_string())?;
            check(ir.value.to_bits() == direct.to_bits(), || format!("{}: IR {} vs R* {}", s.id, ir.value, direct))?;

            let trace_q = reward_trace::<Rational>(&s.schema, &rollout.trajectory, backend, &LexicalSaliency, &templates, norm).map_err(|e| e.to_string())?;
            let ir_q = intent_aware_reward::<Rational>(s, profile, &one, backend, &LexicalSaliency, norm).map_err(|e| e.to_string())?;
            check(ir_q.value == trace_q.r_star, || format!("{}: exact IR {} vs R* {}", s.id, ir_q.value, trace_q.r_star))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} prefixes, f64 bit-exact and exact rational"))
}
