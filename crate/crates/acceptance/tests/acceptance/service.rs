use std::sync::Arc;

use prism_core::backend::{ChatBackend, StubBackend, StubScript};
use prism_core::cid::{induce_layers, lookup, seed_dataset};
use prism_core::clarifier::{check_conflicts, TrajectoryRecord};
use prism_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};

use crate::{check, fixtures};

fn first_options(table: &Value) -> Value {
    let answers: serde_json::Map<String, Value> = table["questions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|q| (q["element_id"].as_str().unwrap().to_owned(), json!({"kind": "option", "value": q["options"][0]})))
        .collect();
    Value::Object(answers)
}

async fn walkthrough(base: &str) -> crate::Outcome {
    let http = reqwest::Client::new();
    let post = |path: String, body: Value| {
        let req = http.post(format!("{base}{path}")).json(&body);
        async move {
            let resp = req.send().await.map_err(|e| e.to_string())?;
            let status = resp.status().as_u16();
            let v: Value = resp.json().await.map_err(|e| e.to_string())?;
            Ok::<_, String>((status, v))
        }
    };

    let (status, mut s) = post("/v1/sessions".into(), json!({"instruction": "Plan a trip to Okinawa"})).await?;
    check(status == 201, || format!("create: {status} {s}"))?;
    check(s["intent"] == "Plan a trip", || format!("recognized {}", s["intent"]))?;
    let id = s["id"].as_str().unwrap().to_owned();
    let responses = format!("/v1/sessions/{id}/responses");

    let mut turns = 0;
    while s["status"] == "clarifying" {
        let j = s["turn_index"].clone();
        let (status, next) = post(responses.clone(), json!({"turn_index": j, "answers": first_options(&s["table"])})).await?;
        check(status == 200, || format!("turn {j}: {status} {next}"))?;
        turns += 1;
        if turns == 1 {
            let (status, err) = post(responses.clone(), json!({"turn_index": j, "answers": {}})).await?;
            check(status == 409 && err["error"]["code"] == "turn_mismatch", || format!("stale turn: {status} {err}"))?;
        }
        s = next;
    }
    check(s["status"] == "completed", || format!("ended as {}", s["status"]))?;
    let output = s["final_output"].as_str().unwrap_or_default();
    check(output.contains("Okinawa"), || format!("final output {output:?}"))?;

    let rec: TrajectoryRecord = http
        .get(format!("{base}/v1/sessions/{id}/trajectory"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .json()
        .await
        .map_err(|e| e.to_string())?;
    let dataset = seed_dataset();
    let schema = lookup(&dataset, "Travel", "Plan a trip").unwrap();
    let layered = induce_layers(schema).map_err(|e| e.to_string())?;
    let t = rec.to_trajectory();
    check(check_conflicts(&t, schema).map_err(|e| e.to_string())?.is_empty(), || "conflicts in walkthrough".into())?;
    check(t.turns.len() == layered.depth(), || format!("{} turns for {} layers", t.turns.len(), layered.depth()))?;
    for (i, turn) in t.turns.iter().enumerate() {
        check(turn.table.turn_index == i + 1 && turn.response.turn_index == i + 1, || format!("turn {i} misnumbered"))?;
        let asked = turn.table.element_ids();
        check(Some(&asked) == layered.layer(turn.table.layer_index), || format!("turn {} asked {asked:?}", i + 1))?;
    }
    check(
        schema.element_ids().iter().all(|e| t.resolved.contains_key(e) || t.no_preference.contains(e)),
        || "unsettled element at completion".into(),
    )?;
    Ok(format!("{} turns, 0 conflicts, 409 on stale turn", t.turns.len()))
}

pub fn run() -> crate::Outcome {
    let script = StubScript::load(&fixtures().join("service/stub.json")).map_err(|e| e.to_string())?;
    let backend: Arc<dyn ChatBackend> = Arc::new(StubBackend::new(script).map_err(|e| e.to_string())?);
    let state = AppState::new(backend, seed_dataset(), ServiceConfig::default()).map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().unwrap();
        let server = tokio::spawn(async move { axum::serve(listener, router(state)).await });
        let outcome = walkthrough(&format!("http://{addr}")).await;
        server.abort();
        outcome
    })
}
