use std::collections::BTreeMap;

use prism_core::backend::StubBackend;
use prism_core::cid::{ElementDef, ElementId, IntentSchema, Provenance};
use prism_core::clarifier::{
    generate_table, Answer, ClarificationQuestion, ClarificationTable, ClarifierConfig, SessionState, Trajectory,
    Turn, UserInstruction, UserResponse,
};
use prism_core::metrics::logical_conflict_rate;
use prism_core::sampler::{run_rollout, Noise, SamplerConfig, SimulatorProfile};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCHEMAS: u64 = 1000;

/// Random DAG over 3 to 12 elements. Element ids are shuffled against the
/// topological order and the element list is shuffled again, so neither
/// ids nor listing order give the schedule away.
pub fn random_schema(rng: &mut impl Rng) -> IntentSchema {
    let n = rng.gen_range(3..=12);
    let density: f64 = rng.gen_range(0.05..0.9);
    let mut label: Vec<usize> = (1..=n).collect();
    label.shuffle(rng);
    let id = |i: usize| ElementId::new(format!("e{}", label[i]));
    let mut prerequisites: BTreeMap<ElementId, Vec<ElementId>> = BTreeMap::new();
    for i in 1..n {
        for j in 0..i {
            if rng.gen_bool(density) {
                prerequisites.entry(id(i)).or_default().push(id(j));
            }
        }
    }
    let mut elements: Vec<ElementDef> = (0..n).map(|i| ElementDef::new(id(i).as_str(), format!("Slot {}", label[i]))).collect();
    elements.shuffle(rng);
    IntentSchema {
        domain: "Synthetic".into(),
        intent: "Random DAG".into(),
        elements,
        prerequisites,
        provenance: Provenance::curated(),
    }
}

fn random_profile(schema: &IntentSchema, rng: &mut impl Rng) -> SimulatorProfile {
    let mut ground_truth = BTreeMap::new();
    for e in &schema.elements {
        if rng.gen_bool(0.6) {
            ground_truth.insert(e.id.clone(), format!("value {}", rng.gen_range(0..100)));
        }
    }
    let mut p = SimulatorProfile::scripted(ground_truth, rng.gen_range(0.0..0.7));
    if rng.gen_bool(0.3) {
        p.noise = Noise::Paraphrase;
    }
    p
}

/// Asks every element in a uniformly random order, ignoring prerequisites.
fn random_order_asker(schema: &IntentSchema, rng: &mut impl Rng) -> Trajectory {
    let mut ids: Vec<ElementId> = schema.elements.iter().map(|e| e.id.clone()).collect();
    ids.shuffle(rng);
    let mut t = Trajectory::new(UserInstruction::new("ctl", "do the thing").unwrap());
    let mut rest = ids.as_slice();
    while !rest.is_empty() {
        let k = rng.gen_range(1..=rest.len().min(3));
        let (now, later) = rest.split_at(k);
        rest = later;
        let j = t.turns.len() + 1;
        let questions = now
            .iter()
            .map(|e| ClarificationQuestion {
                element_id: e.clone(),
                question_text: format!("{e}?"),
                options: vec!["a".into()],
                allow_free_text: true,
            })
            .collect();
        let answers = now.iter().map(|e| (e.clone(), Answer::Option("a".into()))).collect();
        t.turns.push(Turn {
            table: ClarificationTable {
                turn_index: j,
                layer_index: j,
                questions,
            },
            response: UserResponse { turn_index: j, answers },
        });
    }
    t
}

pub fn run() -> crate::Outcome {
    let backend = StubBackend::lenient();
    let mut control = 0.0;
    let mut questions = 0;
    for case in 0..SCHEMAS {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let schema = random_schema(&mut rng);
        let profile = random_profile(&schema, &mut rng);
        let config = ClarifierConfig {
            merge_independent_layers: rng.gen_bool(0.5),
            ..ClarifierConfig::default()
        };
        let x = UserInstruction::new(format!("dag-{case}"), "complete the synthetic task").unwrap();
        let mut s = SessionState::new(format!("dag-{case}"), x, &schema, config).map_err(|e| format!("case {case}: {e}"))?;
        generate_table(&mut s, &backend).map_err(|e| format!("case {case}: {e}"))?;
        let cfg = SamplerConfig {
            n: 1,
            master_seed: case,
            ..SamplerConfig::default()
        };
        let r = run_rollout(&s, &profile, &backend, &cfg, 0).map_err(|e| format!("case {case}: {e}"))?;
        let rate: f64 = logical_conflict_rate(&r.trajectory, &schema).map_err(|e| format!("case {case}: {e}"))?;
        if rate != 0.0 {
            return Err(format!("case {case}: engine trajectory has conflict rate {rate}"));
        }
        if r.trajectory.asked_elements() != schema.element_ids() {
            return Err(format!("case {case}: not every element was asked"));
        }
        questions += r.trajectory.question_count();
        control += logical_conflict_rate::<f64>(&random_order_asker(&schema, &mut rng), &schema).unwrap();
    }
    let control = control / SCHEMAS as f64;
    crate::check(control > 0.2, || format!("random-order control conflict rate {control:.3} is not above 0.2"))?;
    Ok(format!("{SCHEMAS} schemas, {questions} questions, 0 conflicts; control rate {control:.3}"))
}
