//! Acceptance gate. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any fails.

mod evolution;
mod layers;
mod metrics;
mod reward;
mod service;
mod soundness;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "layer induction on Plan a trip",
            limit: Some(Duration::from_secs(1)),
            run: layers::run,
        },
        Criterion {
            name: "scheduler soundness over random DAG schemas",
            limit: Some(Duration::from_secs(60)),
            run: soundness::run,
        },
        Criterion {
            name: "reward oracle equivalence",
            limit: Some(Duration::from_secs(30)),
            run: reward::oracle,
        },
        Criterion {
            name: "point-mass identity",
            limit: None,
            run: reward::point_mass,
        },
        Criterion {
            name: "evolution round invariants",
            limit: Some(Duration::from_secs(120)),
            run: evolution::run,
        },
        Criterion {
            name: "metrics fixtures and BLEU oracle",
            limit: None,
            run: metrics::run,
        },
        Criterion {
            name: "service walkthrough",
            limit: None,
            run: service::run,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {}  [{elapsed:.2?}]  {detail}", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}  [{elapsed:.2?}]  {why}", c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
