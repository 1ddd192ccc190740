use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;

use prism_core::cid::seed_dataset;
use prism_core::clarifier::TrajectoryRecord;
use prism_core::metrics::{bleu, evaluate, EvalRequest, GoldAnnotation, MetricReport};
use prism_core::Rational;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{check, fixtures};

fn r(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

/// Sentence BLEU-4 written from the definition: clipped n-gram precisions
/// (add-one smoothed above unigrams), geometric mean, brevity penalty.
fn bleu_oracle(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4usize {
        let grams = |toks: &[&str]| -> HashMap<String, usize> {
            let mut m = HashMap::new();
            if toks.len() >= n {
                for w in toks.windows(n) {
                    *m.entry(w.join("\u{1}")).or_insert(0) += 1;
                }
            }
            m
        };
        let (cg, rg) = (grams(&c), grams(&r));
        let clipped: usize = cg.iter().map(|(g, k)| (*k).min(*rg.get(g).unwrap_or(&0))).sum();
        let total = if c.len() >= n { c.len() - n + 1 } else { 0 };
        let p = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped + 1) as f64 / (total + 1) as f64
        };
        product *= p;
    }
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * product.powf(0.25)
}

fn sentence(rng: &mut impl Rng, vocab: &[&str]) -> String {
    let len = rng.gen_range(1..=14);
    (0..len).map(|_| *vocab.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn run() -> crate::Outcome {
    let dir = fixtures().join("metrics");
    let records = TrajectoryRecord::read_jsonl(BufReader::new(File::open(dir.join("trajectories.jsonl")).unwrap()))?;
    let gold: Vec<GoldAnnotation> = serde_json::from_reader(File::open(dir.join("gold.json")).unwrap()).map_err(|e| e.to_string())?;
    let report: MetricReport<Rational> =
        evaluate(&records, &seed_dataset(), &gold, None, &[], EvalRequest::default()).map_err(|e| e.to_string())?;
    let by_id = |id: &str| report.instructions.iter().find(|m| m.instruction_id == id).ok_or(format!("{id} missing"));

    let cover = by_id("fx-cover")?;
    check(cover.intents_cover_rate == Some(r(2, 3)), || format!("cover rate {:?}", cover.intents_cover_rate))?;
    let conflict = by_id("fx-conflict")?;
    check(conflict.logical_conflict_rate == r(1, 2), || format!("conflict rate {}", conflict.logical_conflict_rate))?;
    let stats = by_id("fx-stats")?;
    let got = (
        stats.avg_interaction_turns,
        stats.avg_questions_per_turn,
        stats.options_presenting_rate,
        stats.avg_options_per_question,
    );
    check(got == (r(2, 1), r(3, 1), r(1, 1), r(4, 1)), || format!("interaction stats {got:?}"))?;

    let vocab = ["the", "a", "trip", "to", "Okinawa", "in", "March", "with", "budget", "of", "$2000", "hotel", "beach"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..25 {
        let reference = sentence(&mut rng, &vocab);
        let candidate = if i % 3 == 0 {
            reference.clone()
        } else {
            sentence(&mut rng, &vocab)
        };
        let (got, want) = (bleu::<f64>(&candidate, &reference), bleu_oracle(&candidate, &reference));
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-6, || format!("pair {i}: bleu {got} vs oracle {want} for {candidate:?} / {reference:?}"))?;
    }
    Ok(format!("cover 2/3, conflict 1/2, stats (2, 3, 1, 4); 25 BLEU pairs, max diff {worst:.1e}"))
}
