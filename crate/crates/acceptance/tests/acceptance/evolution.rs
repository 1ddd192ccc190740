use std::collections::BTreeMap;
use std::path::Path;

use prism_core::clarifier::check_conflicts;
use prism_core::evolution::{run_evolution_round, DpoExample, RoundConfig, ScoredTrajectory, SftExample};

use crate::{check, fixtures};

const DATA_FILES: [&str; 4] = ["sft.jsonl", "dpo.jsonl", "trajectories.jsonl", "decision_points.jsonl"];

fn lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    std::fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("{}: {e}", path.display())))
        .collect()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

pub fn run() -> crate::Outcome {
    let mut cfg = RoundConfig::load(&fixtures().join("evolution/round.yaml")).map_err(|e| e.to_string())?;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cfg.output_dir = a.path().to_path_buf();
    let manifest = run_evolution_round(&cfg, false).map_err(|e| e.to_string())?;
    check(manifest.n_instructions == 20, || format!("{} instructions", manifest.n_instructions))?;
    check(manifest.failures.is_empty(), || format!("failures: {:?}", manifest.failures))?;

    // (a) margins
    let dpo: Vec<DpoExample> = lines(&a.path().join("dpo.jsonl"))?;
    check(!dpo.is_empty(), || "no DPO pairs".into())?;
    for p in &dpo {
        check(p.meta.margin >= cfg.delta, || format!("{} turn {}: margin {} < {}", p.meta.session_id, p.meta.turn, p.meta.margin, cfg.delta))?;
        check((p.meta.ir_chosen - p.meta.ir_rejected - p.meta.margin).abs() < 1e-12, || {
            format!("{} turn {}: margin does not match the scores", p.meta.session_id, p.meta.turn)
        })?;
    }

    // (b) brute-force top fraction: try every element as the next pick
    let scored: Vec<ScoredTrajectory> = lines(&a.path().join("trajectories.jsonl"))?;
    let k = (cfg.top_fraction * scored.len() as f64).ceil() as usize;
    let better = |x: &ScoredTrajectory, y: &ScoredTrajectory| {
        x.ir_total > y.ir_total
            || (x.ir_total == y.ir_total
                && (x.turn_count() < y.turn_count()
                    || (x.turn_count() == y.turn_count() && x.record.session_id < y.record.session_id)))
    };
    let mut pool: Vec<&ScoredTrajectory> = scored.iter().collect();
    let mut expected = Vec::new();
    while expected.len() < k {
        let best = (0..pool.len())
            .find(|&i| (0..pool.len()).all(|j| j == i || better(pool[i], pool[j])))
            .ok_or("no strict maximum among remaining trajectories")?;
        expected.push(pool.remove(best).record.session_id.clone());
    }
    let sft: Vec<SftExample> = lines(&a.path().join("sft.jsonl"))?;
    let got: Vec<String> = sft.iter().map(|e| e.meta.session_id.clone()).collect();
    check(got == expected, || format!("SFT {got:?}, brute force {expected:?}"))?;

    // (c) reruns: same directory with force, and a fresh directory
    let first = snapshot(a.path());
    run_evolution_round(&cfg, true).map_err(|e| e.to_string())?;
    check(first == snapshot(a.path()), || "forced rerun changed the output".into())?;
    cfg.output_dir = b.path().to_path_buf();
    run_evolution_round(&cfg, false).map_err(|e| e.to_string())?;
    let second = snapshot(b.path());
    for f in DATA_FILES {
        check(first.get(f) == second.get(f), || format!("{f} differs between runs"))?;
    }

    // (d) replay every SFT trajectory
    for id in &got {
        let s = scored.iter().find(|s| &s.record.session_id == id).ok_or_else(|| format!("{id} missing from trajectories"))?;
        let conflicts = check_conflicts(&s.record.to_trajectory(), &s.schema).map_err(|e| format!("{id}: {e}"))?;
        check(conflicts.is_empty(), || format!("{id}: {conflicts:?}"))?;
    }
    Ok(format!(
        "{} trajectories, {} SFT, {} DPO pairs ({} points under margin)",
        scored.len(),
        sft.len(),
        dpo.len(),
        manifest.dpo_skipped
    ))
}
