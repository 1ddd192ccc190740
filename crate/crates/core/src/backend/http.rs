//! OpenAI-compatible HTTP adapter.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, Capabilities, ChatBackend, ChatMessage, ChatRequest, ChatResponse, ResponseFormat,
    ScoredContinuation, Usage,
};

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    250
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g.
    /// `http://localhost:8000/v1`.
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    /// The server implements `/completions` with `echo` and `logprobs`.
    #[serde(default)]
    pub scoring: bool,
    #[serde(default)]
    pub embedding: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            embedding_model: None,
            scoring: false,
            embedding: false,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
        }
    }

    /// `PRISM_BACKEND_URL`, `PRISM_API_KEY`, `PRISM_MODEL`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("PRISM_BACKEND_URL").ok()?;
        let model = std::env::var("PRISM_MODEL").unwrap_or_else(|_| "default".to_owned());
        let mut cfg = HttpConfig::new(url, model);
        cfg.api_key = std::env::var("PRISM_API_KEY").ok();
        Some(cfg)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST with exponential backoff on transport errors, 429 and 5xx.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.url(path);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = self.post_once(&url, body);
            match outcome {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if attempts > self.config.max_retries {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempts - 1).min(16));
                    log::warn!("{url}: {message}; retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::InvalidResponse(format!(
                "HTTP {status}: {text}"
            ))));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::InvalidResponse(format!("body is not JSON: {e}"))))
    }
}

pub(crate) fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": request.messages,
        "temperature": request.decoding.temperature,
        "top_p": request.decoding.top_p,
        "max_tokens": request.decoding.max_tokens,
        "logprobs": true,
    });
    if let Some(seed) = request.decoding.seed {
        body["seed"] = json!(seed);
    }
    if request.response_format == ResponseFormat::Json {
        body["response_format"] = json!({"type": "json_object"});
    }
    body
}

pub(crate) fn parse_chat(v: &Value) -> Result<ChatResponse, BackendError> {
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::InvalidResponse("no message content".into()))?
        .to_owned();
    let (tokens, probs) = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        Some(items) => {
            let mut tokens = Vec::with_capacity(items.len());
            let mut probs = Vec::with_capacity(items.len());
            for it in items {
                tokens.push(it.get("token").and_then(Value::as_str).unwrap_or("").to_owned());
                probs.push(it.get("logprob").and_then(Value::as_f64).unwrap_or(f64::NEG_INFINITY).exp());
            }
            (tokens, Some(probs))
        }
        None => (text.split_whitespace().map(str::to_owned).collect(), None),
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok(ChatResponse {
        text,
        tokens,
        token_probs: probs,
        usage,
    })
}

fn render_context(context: &[ChatMessage]) -> String {
    context
        .iter()
        .map(|m| format!("{}: {}\n", serde_json::to_value(m.role).unwrap().as_str().unwrap_or(""), m.content))
        .collect::<String>()
        + "assistant: "
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}@{}", self.config.model, self.config.base_url)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            chat: true,
            scoring: self.config.scoring,
            embedding: self.config.embedding,
        }
    }

    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let v = self.post("chat/completions", &chat_body(&self.config.model, request))?;
        parse_chat(&v)
    }

    /// Echo scoring through the legacy completions endpoint: the prompt is
    /// the rendered context plus the continuation, and the continuation's
    /// tokens are those whose text offset falls at or after the context.
    fn score_continuation(
        &self,
        context: &[ChatMessage],
        continuation: &str,
    ) -> Result<ScoredContinuation, BackendError> {
        if !self.config.scoring {
            return Err(BackendError::Capability("scoring"));
        }
        if continuation.is_empty() {
            return Ok(ScoredContinuation::default());
        }
        let prefix = render_context(context);
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prefix}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let v = self.post("completions", &body)?;
        let lp = v
            .pointer("/choices/0/logprobs")
            .ok_or_else(|| BackendError::InvalidResponse("no logprobs".into()))?;
        let tokens = lp.get("tokens").and_then(Value::as_array).cloned().unwrap_or_default();
        let logprobs = lp.get("token_logprobs").and_then(Value::as_array).cloned().unwrap_or_default();
        let offsets = lp.get("text_offset").and_then(Value::as_array).cloned().unwrap_or_default();
        let mut out = ScoredContinuation::default();
        for ((t, p), o) in tokens.iter().zip(&logprobs).zip(&offsets) {
            if o.as_u64().unwrap_or(0) as usize >= prefix.len() {
                out.tokens.push(t.as_str().unwrap_or("").to_owned());
                out.probs.push(p.as_f64().unwrap_or(f64::NEG_INFINITY).exp());
            }
        }
        out.validate()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if !self.config.embedding {
            return Err(BackendError::Capability("embedding"));
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let model = self.config.embedding_model.as_deref().unwrap_or(&self.config.model);
        let v = self.post("embeddings", &json!({"model": model, "input": texts}))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::InvalidResponse("no embedding data".into()))?;
        data.iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .map(|xs| xs.iter().filter_map(Value::as_f64).collect())
                    .ok_or_else(|| BackendError::InvalidResponse("embedding is not an array".into()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Decoding;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serve canned HTTP responses, one per connection, returning the
    /// request bodies seen.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut sock, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = sock.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(h) = text.find("\r\n\r\n") {
                        let len = text[..h]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= h + 4 + len {
                            bodies.push(text[h + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                sock.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    #[test]
    fn chat_wire_shape_round_trip() {
        let reply = json!({
            "choices": [{"message": {"role": "assistant", "content": "Okinawa"},
                "logprobs": {"content": [{"token": "Okinawa", "logprob": -0.5}]}}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 1}
        })
        .to_string();
        let (url, handle) = serve(vec![(200, reply)]);
        let backend = HttpBackend::new(HttpConfig::new(url, "m")).unwrap();
        let req = ChatRequest {
            messages: vec![ChatMessage::user("where?")],
            decoding: Decoding::sampled(0.7, 9),
            response_format: ResponseFormat::Json,
            task: None,
        };
        let resp = backend.chat_complete(&req).unwrap();
        assert_eq!(resp.text, "Okinawa");
        assert!((resp.token_probs.unwrap()[0] - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(resp.usage.prompt_tokens, 5);
        let sent: Value = serde_json::from_str(&handle.join().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["seed"], 9);
        assert_eq!(sent["response_format"]["type"], "json_object");
        assert_eq!(sent["messages"][0]["role"], "user");
        assert!(sent.get("task").is_none());
    }

    #[test]
    fn server_errors_are_retried() {
        let ok = json!({"choices": [{"message": {"content": "fine"}}]}).to_string();
        let (url, handle) = serve(vec![(503, "{}".into()), (200, ok)]);
        let mut cfg = HttpConfig::new(url, "m");
        cfg.backoff_base_ms = 1;
        let backend = HttpBackend::new(cfg).unwrap();
        let req = ChatRequest {
            messages: vec![ChatMessage::user("x")],
            decoding: Decoding::default(),
            response_format: ResponseFormat::Text,
            task: None,
        };
        assert_eq!(backend.chat_complete(&req).unwrap().text, "fine");
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn endpoint_down_fails_after_three_retries() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = HttpConfig::new(format!("http://127.0.0.1:{port}/v1"), "m");
        cfg.backoff_base_ms = 1;
        let backend = HttpBackend::new(cfg).unwrap();
        let req = ChatRequest {
            messages: vec![ChatMessage::user("x")],
            decoding: Decoding::default(),
            response_format: ResponseFormat::Text,
            task: None,
        };
        match backend.chat_complete(&req) {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn scoring_requires_capability() {
        let backend = HttpBackend::new(HttpConfig::new("http://127.0.0.1:9/v1", "m")).unwrap();
        assert!(matches!(
            backend.score_continuation(&[], "x"),
            Err(BackendError::Capability("scoring"))
        ));
    }

    #[test]
    fn echo_scoring_keeps_continuation_tokens() {
        let ctx = [ChatMessage::user("hi")];
        let prefix_len = render_context(&ctx).len();
        let reply = json!({"choices": [{"logprobs": {
            "tokens": ["user", "Visit", " Okinawa"],
            "token_logprobs": [null, -1.0, -0.1],
            "text_offset": [0, prefix_len, prefix_len + 5]
        }}]})
        .to_string();
        let (url, _h) = serve(vec![(200, reply)]);
        let mut cfg = HttpConfig::new(url, "m");
        cfg.scoring = true;
        let s = HttpBackend::new(cfg).unwrap().score_continuation(&ctx, "Visit Okinawa").unwrap();
        assert_eq!(s.tokens, vec!["Visit", " Okinawa"]);
        assert!((s.probs[1] - (-0.1f64).exp()).abs() < 1e-12);
    }
}
