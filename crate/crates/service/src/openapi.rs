use serde_json::{json, Value};

fn op(summary: &str, ok: &str, errors: &[&str]) -> Value {
    let mut responses = serde_json::Map::new();
    responses.insert(ok.to_owned(), json!({"description": "success"}));
    for code in errors {
        let description = match *code {
            "400" => "malformed request",
            "401" => "missing or invalid bearer token",
            "404" => "unknown id",
            "409" => "stale turn or illegal state",
            "422" => "validation failure",
            "502" => "backend failure, with cause chain",
            _ => "error",
        };
        responses.insert((*code).to_owned(), json!({"description": description, "content": {"application/json": {"schema": {"$ref": "#/components/schemas/Error"}}}}));
    }
    json!({"summary": summary, "responses": responses})
}

pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": {"title": "prism", "version": env!("CARGO_PKG_VERSION")},
        "components": {
            "securitySchemes": {"bearer": {"type": "http", "scheme": "bearer"}},
            "schemas": {
                "Error": {
                    "type": "object",
                    "properties": {"error": {"type": "object", "properties": {
                        "code": {"type": "string"},
                        "message": {"type": "string"},
                        "causes": {"type": "array", "items": {"type": "string"}}
                    }}}
                },
                "Answer": {
                    "type": "object",
                    "required": ["kind"],
                    "properties": {
                        "kind": {"type": "string", "enum": ["option", "free_text", "skipped"]},
                        "value": {"type": "string", "nullable": true}
                    }
                },
                "UserResponse": {
                    "type": "object",
                    "required": ["turn_index", "answers"],
                    "properties": {
                        "turn_index": {"type": "integer", "minimum": 1},
                        "answers": {"type": "object", "additionalProperties": {"$ref": "#/components/schemas/Answer"}}
                    }
                },
                "ClarificationTable": {
                    "type": "object",
                    "properties": {
                        "turn_index": {"type": "integer"},
                        "layer_index": {"type": "integer"},
                        "questions": {"type": "array", "items": {"type": "object", "properties": {
                            "element_id": {"type": "string"},
                            "question_text": {"type": "string"},
                            "options": {"type": "array", "items": {"type": "string"}},
                            "allow_free_text": {"type": "boolean"}
                        }}}
                    }
                },
                "SessionResource": {
                    "type": "object",
                    "properties": {
                        "id": {"type": "string"},
                        "status": {"type": "string", "enum": ["clarifying", "finalizing", "completed", "aborted"]},
                        "domain": {"type": "string"},
                        "intent": {"type": "string"},
                        "turn_index": {"type": "integer"},
                        "depth": {"type": "integer"},
                        "table": {"$ref": "#/components/schemas/ClarificationTable"},
                        "resolved": {"type": "object", "additionalProperties": {"type": "string"}},
                        "no_preference": {"type": "array", "items": {"type": "string"}},
                        "final_output": {"type": "string", "nullable": true},
                        "links": {"type": "object"}
                    }
                }
            }
        },
        "security": [{"bearer": []}],
        "paths": {
            "/v1/sessions": {"post": op("Create a session from an instruction; returns the first table", "201", &["400", "401", "502"])},
            "/v1/sessions/{id}": {"get": op("Current session state", "200", &["401", "404"])},
            "/v1/sessions/{id}/responses": {"post": op("Answer the pending table; honours Idempotency-Key", "200", &["400", "401", "404", "409", "502"])},
            "/v1/sessions/{id}/advance": {"post": op("Retry table generation or finalization", "200", &["401", "404", "409", "502"])},
            "/v1/sessions/{id}/abort": {"post": op("Abort the session", "200", &["401", "404", "409"])},
            "/v1/sessions/{id}/trajectory": {"get": op("Trajectory record", "200", &["401", "404"])},
            "/v1/sessions/{id}/rewards": {"get": op("Reward trace of the final output", "200", &["401", "404", "409", "502"])},
            "/v1/datasets/cid": {
                "get": op("Export the dataset", "200", &["401"]),
                "put": op("Replace the dataset", "200", &["401", "422"])
            },
            "/v1/jobs/generate": {"post": op("Start a data-generation round", "202", &["400", "401"])},
            "/v1/jobs/{id}": {"get": op("Job status and manifest", "200", &["401", "404"])},
            "/v1/evaluate": {"post": op("Metric report for trajectories", "200", &["400", "401", "422", "502"])},
            "/v1/openapi.json": {"get": {"summary": "This document", "security": [], "responses": {"200": {"description": "success"}}}}
        }
    })
}
