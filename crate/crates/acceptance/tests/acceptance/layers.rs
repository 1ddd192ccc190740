use std::collections::BTreeSet;

use prism_core::cid::{induce_layers, lookup, seed_dataset, validate_schema, ElementId};

use crate::{check, Outcome};

pub fn run() -> Outcome {
    let dataset = seed_dataset();
    let schema = lookup(&dataset, "Travel", "Plan a trip").ok_or("Plan a trip missing from the seed dataset")?;
    let e7 = ElementId::new("e7");
    check(schema.prerequisites_of(&e7).contains(&e7), || "seed schema lost the e7 self-loop".into())?;

    let layered = induce_layers(schema).map_err(|e| e.to_string())?;
    let set = |ids: &[&str]| ids.iter().map(|s| ElementId::new(*s)).collect::<BTreeSet<_>>();
    let want = vec![set(&["e1", "e2", "e3"]), set(&["e4", "e5", "e6"]), set(&["e7"])];
    check(layered.layers == want, || format!("layers {:?}", layered.as_id_lists()))?;

    let (report, _) = validate_schema(schema);
    check(report.is_valid(), || format!("{:?}", report.errors))?;
    check(report.warnings.iter().any(|w| w.to_string().contains("self-loop")), || {
        "self-loop was not reported as a warning".into()
    })?;
    Ok(format!("{:?}", layered.as_id_lists()))
}
