use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use prism_core::backend::{ChatBackend, StubBackend, StubScript};
use prism_core::cid::{lookup, seed_dataset};
use prism_core::clarifier::{check_conflicts, TrajectoryRecord};
use prism_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn walkthrough_backend() -> Arc<dyn ChatBackend> {
    Arc::new(StubBackend::new(StubScript::load(&fixtures().join("service/stub.json")).unwrap()).unwrap())
}

fn app_with(config: ServiceConfig) -> Router {
    router(AppState::new(walkthrough_backend(), seed_dataset(), config).unwrap())
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

/// Answer every question with its first option.
fn first_options(table: &Value) -> Value {
    let mut answers = serde_json::Map::new();
    for q in table["questions"].as_array().unwrap() {
        answers.insert(
            q["element_id"].as_str().unwrap().to_owned(),
            json!({"kind": "option", "value": q["options"][0]}),
        );
    }
    Value::Object(answers)
}

#[tokio::test]
async fn travel_walkthrough_completes_without_conflicts() {
    let app = app();
    let (status, s) = call(&app, "POST", "/v1/sessions", Some(json!({"instruction": "Plan a trip to Okinawa"})), &[]).await;
    assert_eq!(status, StatusCode::CREATED, "{s}");
    assert_eq!(s["intent"], "Plan a trip");
    let id = s["id"].as_str().unwrap().to_owned();
    let ids: Vec<&str> = s["table"]["questions"].as_array().unwrap().iter().map(|q| q["element_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["e1", "e2", "e3"]);

    let uri = format!("/v1/sessions/{id}/responses");
    let (status, s) = call(
        &app,
        "POST",
        &uri,
        Some(json!({"turn_index": 1, "answers": {
            "e1": {"kind": "option", "value": "Okinawa"},
            "e2": {"kind": "option", "value": "March"},
            "e3": {"kind": "option", "value": "$2000"}
        }})),
        &[],
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{s}");
    assert_eq!(s["turn_index"], 2);
    let activities = s["table"]["questions"].as_array().unwrap().iter().find(|q| q["element_id"] == "e5").unwrap();
    assert_eq!(activities["options"][0], "Whale watching boat tour in Okinawa");

    // stale turn
    let (status, err) = call(&app, "POST", &uri, Some(json!({"turn_index": 1, "answers": {}})), &[]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "turn_mismatch");

    let mut s = s;
    while s["status"] == "clarifying" {
        let body = json!({"turn_index": s["turn_index"], "answers": first_options(&s["table"])});
        let (status, next) = call(&app, "POST", &uri, Some(body), &[]).await;
        assert_eq!(status, StatusCode::OK, "{next}");
        s = next;
    }
    assert_eq!(s["status"], "completed");
    assert!(s["final_output"].as_str().unwrap().contains("Okinawa"));

    let (status, rec) = call(&app, "GET", &format!("/v1/sessions/{id}/trajectory"), None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    let rec: TrajectoryRecord = serde_json::from_value(rec).unwrap();
    assert_eq!(rec.turns.len(), 3);
    let schema = lookup(&seed_dataset(), "Travel", "Plan a trip").unwrap().clone();
    assert!(check_conflicts(&rec.to_trajectory(), &schema).unwrap().is_empty());

    let (status, r) = call(&app, "GET", &format!("/v1/sessions/{id}/rewards"), None, &[]).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert!(r["trace"]["r_star"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn idempotency_key_replays_the_stored_reply() {
    let app = app();
    let (_, s) = call(&app, "POST", "/v1/sessions", Some(json!({"instruction": "Plan a trip to Kyoto"})), &[]).await;
    let uri = format!("/v1/sessions/{}/responses", s["id"].as_str().unwrap());
    let body = json!({"turn_index": 1, "answers": first_options(&s["table"])});
    let key = [("idempotency-key", "k-1")];
    let (a_status, a) = call(&app, "POST", &uri, Some(body.clone()), &key).await;
    let (b_status, b) = call(&app, "POST", &uri, Some(body.clone()), &key).await;
    assert_eq!((a_status, b_status), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let (c_status, _) = call(&app, "POST", &uri, Some(body), &[]).await;
    assert_eq!(c_status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn error_statuses() {
    let app = app();
    let (status, _) = call(&app, "GET", "/v1/sessions/nope", None, &[]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/v1/sessions", Some(json!({"text": 1})), &[]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, s) = call(&app, "POST", "/v1/sessions", Some(json!({"instruction": "Plan a trip"})), &[]).await;
    let uri = format!("/v1/sessions/{}/responses", s["id"].as_str().unwrap());
    let (status, e) = call(&app, "POST", &uri, Some(json!({"turn_index": 1, "answers": {"e1": {"kind": "option", "value": "Mars"}}})), &[]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{e}");
    let (status, _) = call(&app, "GET", &format!("/v1/sessions/{}/rewards", s["id"].as_str().unwrap()), None, &[]).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn backend_failure_is_502_with_causes() {
    let script = StubScript {
        strict: true,
        ..StubScript::default()
    };
    let app = router(AppState::with_seed(Arc::new(StubBackend::new(script).unwrap())));
    let (status, e) = call(&app, "POST", "/v1/sessions", Some(json!({"instruction": "Plan a trip"})), &[]).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{e}");
    assert_eq!(e["error"]["code"], "backend");
    assert!(e["error"]["message"].as_str().unwrap().contains("no stub fixture"));
}

#[tokio::test]
async fn dataset_round_trip_and_validation() {
    let app = app();
    let (status, d) = call(&app, "GET", "/v1/datasets/cid", None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "PUT", "/v1/datasets/cid", Some(d.clone()), &[]).await;
    assert_eq!(status, StatusCode::OK);

    let mut bad = d.clone();
    bad["schemas"][0]["prerequisites"]["e1"] = json!(["e4"]);
    let (status, body) = call(&app, "PUT", "/v1/datasets/cid", Some(bad), &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let report = &body["reports"][0];
    assert_eq!(report["schema"], "travel / plan a trip");
    assert_eq!(report["errors"][0]["kind"], "cycle");

    let (status, body) = call(&app, "PUT", "/v1/datasets/cid", Some(json!({"version": 9})), &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"]["message"].as_str().unwrap().contains("version"));
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let app = app_with(ServiceConfig {
        api_token: Some("s3cret".into()),
        ..ServiceConfig::default()
    });
    let (status, _) = call(&app, "GET", "/v1/datasets/cid", None, &[]).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, "GET", "/v1/datasets/cid", None, &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(status, StatusCode::OK);
    let (status, doc) = call(&app, "GET", "/v1/openapi.json", None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    assert!(doc["paths"]["/v1/sessions/{id}/responses"]["post"].is_object());
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        snapshot_every: 2,
        ..ServiceConfig::default()
    };
    let app = app_with(config.clone());
    let (_, s) = call(&app, "POST", "/v1/sessions", Some(json!({"instruction": "Plan a trip to Okinawa"})), &[]).await;
    let id = s["id"].as_str().unwrap().to_owned();
    let body = json!({"turn_index": 1, "answers": first_options(&s["table"])});
    let (_, after) = call(&app, "POST", &format!("/v1/sessions/{id}/responses"), Some(body.clone()), &[("idempotency-key", "x")]).await;
    drop(app);

    let restarted = app_with(config);
    let (status, s2) = call(&restarted, "GET", &format!("/v1/sessions/{id}"), None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s2, after);
    let (status, replay) =
        call(&restarted, "POST", &format!("/v1/sessions/{id}/responses"), Some(body), &[("idempotency-key", "x")]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(replay, after);
}

#[tokio::test]
async fn evaluate_shipped_fixtures() {
    let app = app();
    let text = std::fs::read_to_string(fixtures().join("metrics/trajectories.jsonl")).unwrap();
    let trajectories: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let gold: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("metrics/gold.json")).unwrap()).unwrap();
    let (status, report) = call(&app, "POST", "/v1/evaluate", Some(json!({"trajectories": trajectories, "gold": gold})), &[]).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let conflict = report["instructions"].as_array().unwrap().iter().find(|i| i["instruction_id"] == "fx-conflict").unwrap();
    assert_eq!(conflict["logical_conflict_rate"], 0.5);
}

#[tokio::test]
async fn generation_job_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let lines = [
        json!({"id": "a", "text": "plan a trip to Japan", "preferences": {"Destination": "Okinawa"}}),
        json!({"id": "b", "text": "help me buy a laptop"}),
    ];
    let path = dir.path().join("instructions.jsonl");
    std::fs::write(&path, lines.iter().map(Value::to_string).collect::<Vec<_>>().join("\n")).unwrap();
    let config = json!({
        "round": 1,
        "instructions": path,
        "output_dir": dir.path().join("out"),
        "n_candidates": 2
    });
    let app = app();
    let (status, job) = call(&app, "POST", "/v1/jobs/generate", Some(json!({"config": config})), &[]).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let uri = format!("/v1/jobs/{}", job["id"].as_str().unwrap());
    for _ in 0..600 {
        let (_, j) = call(&app, "GET", &uri, None, &[]).await;
        match j["state"].as_str().unwrap() {
            "succeeded" => {
                assert_eq!(j["manifest"]["n_trajectories"], 2);
                return;
            }
            "failed" => panic!("job failed: {j}"),
            _ => tokio::time::sleep(std::time::Duration::from_millis(50)).await,
        }
    }
    panic!("job did not finish");
}
