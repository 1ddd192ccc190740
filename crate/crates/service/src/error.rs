use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use prism_core::clarifier::ClarifierError;
use prism_core::decomposer::DecomposeError;
use prism_core::evolution::EvolutionError;
use prism_core::metrics::MetricError;
use prism_core::reward::RewardError;
use serde_json::{json, Value};

/// Error body: `{"error": {"code", "message", "causes"}}`, plus any extra
/// fields in `detail`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub causes: Vec<String>,
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            causes: Vec::new(),
            detail: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} with id {id}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn from_error(status: StatusCode, code: &'static str, e: &(dyn std::error::Error + 'static)) -> Self {
        let mut causes = Vec::new();
        let mut next = e.source();
        while let Some(c) = next {
            causes.push(c.to_string());
            next = c.source();
        }
        ApiError {
            status,
            code,
            message: e.to_string(),
            causes,
            detail: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "error": {"code": self.code, "message": self.message, "causes": self.causes}
        });
        if let (Some(Value::Object(extra)), Value::Object(map)) = (self.detail, &mut body) {
            map.extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<ClarifierError> for ApiError {
    fn from(e: ClarifierError) -> Self {
        let (status, code) = match &e {
            ClarifierError::TurnMismatch { .. } => (StatusCode::CONFLICT, "turn_mismatch"),
            ClarifierError::IllegalState(_) => (StatusCode::CONFLICT, "illegal_state"),
            ClarifierError::EmptyInstruction
            | ClarifierError::UnknownElement(_)
            | ClarifierError::InvalidAnswer { .. } => (StatusCode::BAD_REQUEST, "invalid_response"),
            ClarifierError::Schema(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_schema"),
            ClarifierError::Generation { .. } | ClarifierError::Backend(_) => (StatusCode::BAD_GATEWAY, "backend"),
        };
        ApiError::from_error(status, code, &e)
    }
}

impl From<DecomposeError> for ApiError {
    fn from(e: DecomposeError) -> Self {
        let (status, code) = match &e {
            DecomposeError::EmptyDataset => (StatusCode::CONFLICT, "empty_dataset"),
            DecomposeError::Cid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_schema"),
            _ => (StatusCode::BAD_GATEWAY, "backend"),
        };
        ApiError::from_error(status, code, &e)
    }
}

impl From<RewardError> for ApiError {
    fn from(e: RewardError) -> Self {
        let (status, code) = match &e {
            RewardError::Backend(_) | RewardError::Provider(_) => (StatusCode::BAD_GATEWAY, "backend"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "reward"),
        };
        ApiError::from_error(status, code, &e)
    }
}

impl From<MetricError> for ApiError {
    fn from(e: MetricError) -> Self {
        let (status, code) = match &e {
            MetricError::JudgeUnavailable(_) => (StatusCode::BAD_GATEWAY, "backend"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "evaluation"),
        };
        ApiError::from_error(status, code, &e)
    }
}

impl From<EvolutionError> for ApiError {
    fn from(e: EvolutionError) -> Self {
        ApiError::from_error(StatusCode::UNPROCESSABLE_ENTITY, "generation", &e)
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::from_error(StatusCode::INTERNAL_SERVER_ERROR, "storage", &e)
    }
}
