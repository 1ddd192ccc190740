//! HTTP front end for the clarification engine.
//!
//! All routes live under `/v1`. Session mutations are serialized per
//! session and journaled before the response is sent; model calls run on
//! the blocking pool.

mod error;
mod journal;
mod openapi;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use prism_core::backend::ChatBackend;
use prism_core::cid::{
    export_dataset, import_dataset, seed_dataset, validate_dataset, CidDataset, CidStore, ElementDef, ElementId,
};
use prism_core::clarifier::{
    abort, apply_user_response, finalize_output, generate_table, ClarificationTable, ClarifierConfig, SessionState,
    SessionStatus, TrajectoryRecord, UserInstruction, UserResponse,
};
use prism_core::decomposer::{Decomposer, DecomposerConfig};
use prism_core::evolution::{run_evolution_round, EvolutionRound, RoundConfig};
use prism_core::metrics::{evaluate, BackendJudge, EvalRequest, ExecutionLog, GoldAnnotation, JudgeProvider, MetricReport};
use prism_core::prompts::PromptTemplates;
use prism_core::reward::{reward_trace, LexicalSaliency, Normalization, RewardTrace};
use prism_core::similarity::LexicalProvider;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{OwnedMutexGuard, Semaphore};

pub use error::ApiError;
pub use journal::{Event, Journal, SessionEntry, StoredReply};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Journal directory; `None` keeps sessions in memory only.
    pub data_dir: Option<PathBuf>,
    /// Required bearer token, if any.
    pub api_token: Option<String>,
    pub job_workers: usize,
    pub snapshot_every: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: None,
            api_token: None,
            job_workers: 2,
            snapshot_every: 16,
        }
    }
}

impl ServiceConfig {
    /// Defaults plus `PRISM_API_TOKEN` and `PRISM_DATA_DIR`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        ServiceConfig {
            data_dir: var("PRISM_DATA_DIR").map(PathBuf::from),
            api_token: var("PRISM_API_TOKEN"),
            ..ServiceConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<EvolutionRound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type SessionSlot = Arc<tokio::sync::Mutex<SessionEntry>>;

struct Inner {
    backend: Arc<dyn ChatBackend>,
    store: CidStore,
    decomposer: RwLock<Arc<Decomposer>>,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    journal: Option<Journal>,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
    job_slots: Arc<Semaphore>,
    rewards: Mutex<HashMap<String, RewardTrace>>,
    templates: Arc<PromptTemplates>,
    config: ServiceConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn new_decomposer() -> Arc<Decomposer> {
    Arc::new(Decomposer::new(DecomposerConfig::default(), Box::new(LexicalProvider)))
}

impl AppState {
    /// Build the state, recovering journaled sessions from `data_dir`.
    pub fn new(backend: Arc<dyn ChatBackend>, dataset: CidDataset, config: ServiceConfig) -> std::io::Result<Self> {
        let journal = match &config.data_dir {
            Some(dir) => Some(Journal::open(&dir.join("sessions"), config.snapshot_every)?),
            None => None,
        };
        let mut sessions = HashMap::new();
        if let Some(j) = &journal {
            for entry in j.recover()? {
                sessions.insert(entry.state.id.clone(), Arc::new(tokio::sync::Mutex::new(entry)));
            }
        }
        Ok(AppState(Arc::new(Inner {
            backend,
            store: CidStore::new(dataset),
            decomposer: RwLock::new(new_decomposer()),
            sessions: Mutex::new(sessions),
            journal,
            jobs: Mutex::new(BTreeMap::new()),
            job_slots: Arc::new(Semaphore::new(config.job_workers.max(1))),
            rewards: Mutex::new(HashMap::new()),
            templates: Arc::new(PromptTemplates::default()),
            config,
        })))
    }

    pub fn with_seed(backend: Arc<dyn ChatBackend>) -> Self {
        AppState::new(backend, seed_dataset(), ServiceConfig::default()).expect("in-memory state")
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.lock().len()
    }

    async fn slot(&self, id: &str) -> Result<OwnedMutexGuard<SessionEntry>, ApiError> {
        let slot = self.0.sessions.lock().get(id).cloned().ok_or_else(|| ApiError::not_found("session", id))?;
        Ok(slot.lock_owned().await)
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/responses", post(post_response))
        .route("/sessions/{id}/advance", post(advance_session))
        .route("/sessions/{id}/abort", post(abort_session))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .route("/sessions/{id}/rewards", get(get_rewards))
        .route("/datasets/cid", get(get_dataset).put(put_dataset))
        .route("/jobs/generate", post(post_job))
        .route("/jobs/{id}", get(get_job))
        .route("/evaluate", post(post_evaluate))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/openapi.json", get(|| async { Json(openapi::document()) }));
    Router::new().nest("/v1", api).with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.0.config.api_token {
        let ok = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Links {
    #[serde(rename = "self")]
    pub self_: String,
    pub responses: String,
    pub trajectory: String,
    pub rewards: String,
}

/// Client view of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResource {
    pub id: String,
    pub status: SessionStatus,
    pub domain: String,
    pub intent: String,
    /// Turn the next response must carry.
    pub turn_index: usize,
    pub depth: usize,
    pub elements: Vec<ElementDef>,
    pub table: Option<ClarificationTable>,
    pub resolved: BTreeMap<ElementId, String>,
    pub no_preference: BTreeSet<ElementId>,
    pub final_output: Option<String>,
    pub links: Links,
}

impl SessionResource {
    pub fn of(s: &SessionState) -> Self {
        let base = format!("/v1/sessions/{}", s.id);
        SessionResource {
            id: s.id.clone(),
            status: s.status,
            domain: s.schema.domain.clone(),
            intent: s.schema.intent.clone(),
            turn_index: s.pending.as_ref().map_or(s.current_turn(), |t| t.turn_index),
            depth: s.depth(),
            elements: s.schema.elements.clone(),
            table: s.pending.clone(),
            resolved: s.trajectory.resolved.clone(),
            no_preference: s.trajectory.no_preference.clone(),
            final_output: s.trajectory.final_output.clone(),
            links: Links {
                responses: format!("{base}/responses"),
                trajectory: format!("{base}/trajectory"),
                rewards: format!("{base}/rewards"),
                self_: base,
            },
        }
    }
}

/// Generate the next table or the final output, whichever is due.
fn progress(entry: &mut SessionEntry, backend: &dyn ChatBackend, events: &mut Vec<Event>) -> Result<(), ApiError> {
    let s = &mut entry.state;
    if s.status == SessionStatus::Clarifying && s.pending.is_none() {
        let table = generate_table(s, backend)?;
        if table.questions.is_empty() {
            apply_user_response(
                s,
                UserResponse {
                    turn_index: table.turn_index,
                    answers: BTreeMap::new(),
                },
            )?;
            events.push(Event::TableInstalled { table: table.clone() });
            events.push(Event::ResponseApplied {
                response: UserResponse {
                    turn_index: table.turn_index,
                    answers: BTreeMap::new(),
                },
            });
            return progress(entry, backend, events);
        }
        events.push(Event::TableInstalled { table });
    }
    if entry.state.status == SessionStatus::Finalizing {
        let output = finalize_output(&mut entry.state, backend)?;
        events.push(Event::Finalized { output });
    }
    Ok(())
}

fn persist(state: &AppState, entry: &mut SessionEntry, events: Vec<Event>) -> Result<(), ApiError> {
    entry.events += events.len();
    if let Some(j) = &state.0.journal {
        j.append(entry, &events)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct CreateSession {
    instruction: String,
    #[serde(default)]
    config: Option<ClarifierConfig>,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse(&body)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let x = UserInstruction::new(id.clone(), req.instruction)?;
    let st = state.clone();
    let entry = blocking(move || -> Result<SessionEntry, ApiError> {
        let dataset = st.0.store.snapshot();
        let decomposer = st.0.decomposer.read().clone();
        let d = decomposer.decompose(&x, &dataset, st.0.backend.as_ref())?;
        let session = SessionState::new(id, x, &d.schema, req.config.unwrap_or_default())?;
        let mut entry = SessionEntry {
            state: session.clone(),
            replies: HashMap::new(),
            events: 0,
        };
        let mut events = vec![Event::Created {
            state: Box::new(session),
        }];
        progress(&mut entry, st.0.backend.as_ref(), &mut events)?;
        persist(&st, &mut entry, events)?;
        Ok(entry)
    })
    .await??;
    let resource = SessionResource::of(&entry.state);
    state
        .0
        .sessions
        .lock()
        .insert(entry.state.id.clone(), Arc::new(tokio::sync::Mutex::new(entry)));
    let location = resource.links.self_.clone();
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(resource)).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionResource>, ApiError> {
    let entry = state.slot(&id).await?;
    Ok(Json(SessionResource::of(&entry.state)))
}

async fn post_response(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let mut entry = state.slot(&id).await?;
    if let Some(stored) = key.as_ref().and_then(|k| entry.replies.get(k)) {
        let status = StatusCode::from_u16(stored.status).unwrap_or(StatusCode::OK);
        return Ok((status, [("idempotent-replay", "true")], Json(stored.body.clone())).into_response());
    }
    let response: UserResponse = parse(&body)?;
    let st = state.clone();
    blocking(move || -> Result<Response, ApiError> {
        let snapshot = entry.state.clone();
        if let Err(e) = apply_user_response(&mut entry.state, response.clone()) {
            entry.state = snapshot;
            return Err(e.into());
        }
        let mut events = vec![Event::ResponseApplied { response }];
        let outcome = progress(&mut entry, st.0.backend.as_ref(), &mut events);
        let reply = outcome.map(|_| StoredReply {
            status: 200,
            body: serde_json::to_value(SessionResource::of(&entry.state)).expect("resource serializes"),
        });
        if let (Some(k), Ok(r)) = (&key, &reply) {
            entry.replies.insert(k.clone(), r.clone());
            events.push(Event::Idempotent {
                key: k.clone(),
                reply: r.clone(),
            });
        }
        persist(&st, &mut entry, events)?;
        let reply = reply?;
        Ok((StatusCode::OK, Json(reply.body)).into_response())
    })
    .await?
}

/// Retry table generation or finalization after a backend failure.
async fn advance_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionResource>, ApiError> {
    let mut entry = state.slot(&id).await?;
    let st = state.clone();
    blocking(move || -> Result<Json<SessionResource>, ApiError> {
        let mut events = Vec::new();
        let outcome = progress(&mut entry, st.0.backend.as_ref(), &mut events);
        persist(&st, &mut entry, events)?;
        outcome.map(|_| Json(SessionResource::of(&entry.state)))
    })
    .await?
}

async fn abort_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionResource>, ApiError> {
    let mut entry = state.slot(&id).await?;
    abort(&mut entry.state)?;
    persist(&state, &mut entry, vec![Event::Aborted])?;
    Ok(Json(SessionResource::of(&entry.state)))
}

async fn get_trajectory(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<TrajectoryRecord>, ApiError> {
    let entry = state.slot(&id).await?;
    Ok(Json(TrajectoryRecord::from_session(&entry.state)))
}

#[derive(Serialize)]
struct RewardsBody {
    session_id: String,
    trace: RewardTrace,
}

async fn get_rewards(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let entry = state.slot(&id).await?;
    if entry.state.status != SessionStatus::Completed {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_completed",
            "rewards are computed once the session has a final output",
        ));
    }
    let cached = state.0.rewards.lock().get(&id).cloned();
    let trace = match cached {
        Some(t) => t,
        None => {
            let st = state.clone();
            let s = entry.state.clone();
            let t = blocking(move || {
                reward_trace::<f64>(
                    &s.schema,
                    &s.trajectory,
                    st.0.backend.as_ref(),
                    &LexicalSaliency,
                    &s.config.templates,
                    Normalization::PerToken,
                )
            })
            .await??;
            state.0.rewards.lock().insert(id.clone(), t.clone());
            t
        }
    };
    Ok(Json(RewardsBody {
        session_id: id,
        trace,
    })
    .into_response())
}

async fn get_dataset(State(state): State<AppState>) -> Response {
    let bytes = export_dataset(&state.0.store.snapshot());
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn put_dataset(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let dataset = import_dataset(&body).map_err(|e| {
        let mut err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_dataset", e.to_string());
        err.detail = Some(json!({"reports": []}));
        err
    })?;
    let reports = validate_dataset(&dataset);
    if reports.iter().any(|r| !r.is_valid()) {
        let failing: Vec<_> = reports.iter().filter(|r| !r.is_valid()).collect();
        let mut err = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_dataset",
            format!("{} schema(s) failed validation", failing.len()),
        );
        err.detail = Some(json!({ "reports": failing }));
        return Err(err);
    }
    let schemas = dataset.schemas.len();
    state.0.store.replace(dataset);
    *state.0.decomposer.write() = new_decomposer();
    Ok(Json(json!({"schemas": schemas, "reports": reports})).into_response())
}

#[derive(Deserialize)]
struct JobRequest {
    config: RoundConfig,
    #[serde(default)]
    force: bool,
}

async fn post_job(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: JobRequest = parse(&body)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let status = JobStatus {
        id: id.clone(),
        state: JobState::Queued,
        manifest: None,
        error: None,
    };
    state.0.jobs.lock().insert(id.clone(), status.clone());
    let st = state.clone();
    tokio::spawn(async move {
        let Ok(_permit) = st.0.job_slots.clone().acquire_owned().await else {
            return;
        };
        let set = |f: &dyn Fn(&mut JobStatus)| {
            if let Some(j) = st.0.jobs.lock().get_mut(&id) {
                f(j);
            }
        };
        set(&|j| j.state = JobState::Running);
        let result = tokio::task::spawn_blocking(move || run_evolution_round(&req.config, req.force)).await;
        match result {
            Ok(Ok(manifest)) => set(&|j| {
                j.state = JobState::Succeeded;
                j.manifest = Some(manifest.clone());
            }),
            Ok(Err(e)) => set(&|j| {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }),
            Err(e) => set(&|j| {
                j.state = JobState::Failed;
                j.error = Some(format!("worker failed: {e}"));
            }),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    state
        .0
        .jobs
        .lock()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job", &id))
}

#[derive(Deserialize)]
struct EvaluateRequest {
    trajectories: Vec<TrajectoryRecord>,
    #[serde(default)]
    gold: Vec<GoldAnnotation>,
    #[serde(default)]
    logs: Vec<ExecutionLog>,
    #[serde(default)]
    reasonableness: bool,
}

async fn post_evaluate(State(state): State<AppState>, body: Bytes) -> Result<Json<MetricReport>, ApiError> {
    let req: EvaluateRequest = parse(&body)?;
    let st = state.clone();
    let report = blocking(move || {
        let dataset = st.0.store.snapshot();
        let judge = BackendJudge::new(st.0.backend.clone(), st.0.templates.clone());
        let judge: Option<&dyn JudgeProvider> = req.reasonableness.then_some(&judge as &dyn JudgeProvider);
        evaluate::<f64>(
            &req.trajectories,
            &dataset,
            &req.gold,
            judge,
            &req.logs,
            EvalRequest {
                reasonableness: req.reasonableness,
            },
        )
    })
    .await??;
    Ok(Json(report))
}
