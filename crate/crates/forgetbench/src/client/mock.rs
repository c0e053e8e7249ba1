//! Scriptable mock model server for offline runs and tests.
//!
//! The script is a JSON list of rules, evaluated in order; the first match
//! answers the request:
//!
//! ```json
//! [
//!   {"match": {"prompt_regex": "number in the image", "has_image": true},
//!    "reply": "The number in the image is 8",
//!    "status_sequence": [429, 200],
//!    "delay_ms": 5}
//! ]
//! ```
//!
//! * `match` may constrain a regex over the prompt text and/or the presence
//!   of an image part; an empty match is a catch-all.
//! * `status_sequence` serves one status per hit, repeating the last entry
//!   once exhausted (non-2xx hits get an error body).
//! * `reply` supports two placeholders: `{image_text}` expands to the
//!   request's image bytes decoded as UTF-8 (handy for fixtures whose
//!   "images" are text files naming their class), and `{judge_verdict}`
//!   expands to `Yes`/`No` by checking whether the label named in a judge
//!   prompt occurs in its prediction.
//! * On the embeddings route a reply that parses as a JSON number array is
//!   returned as the vector; otherwise a deterministic pseudo-embedding of
//!   the input text is served.
//!
//! Served routes: POST `/v1/chat/completions`, POST `/v1/embeddings`,
//! GET `/health`. Anything else is a 404.

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("failed to read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed script {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid prompt_regex {pattern:?}: {source}")]
    BadRegex {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("failed to bind port {port}: {source}")]
    Bind {
        port: u16,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MatchSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_image: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match", default)]
    pub matcher: MatchSpec,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_sequence: Option<Vec<u16>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

/// A parsed script: an ordered rule list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, MockError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| MockError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

struct CompiledRule {
    regex: Option<Regex>,
    has_image: Option<bool>,
    reply: String,
    status_sequence: Option<Vec<u16>>,
    delay_ms: Option<u64>,
    hits: AtomicUsize,
}

struct ServerState {
    rules: Vec<CompiledRule>,
    /// Total chat + embedding requests served (any status).
    request_count: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    shutdown: AtomicBool,
}

/// Handle to a running mock server. Dropping it (or calling
/// [`MockServer::shutdown`]) stops the accept loop.
pub struct MockServer {
    state: Arc<ServerState>,
    port: u16,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

/// Start the mock server on `port` (0 picks a free port).
pub fn mock_serve(script: &MockScript, port: u16) -> Result<MockServer, MockError> {
    let rules = script
        .rules
        .iter()
        .map(|rule| {
            let regex = match &rule.matcher.prompt_regex {
                Some(pattern) => {
                    Some(Regex::new(pattern).map_err(|source| MockError::BadRegex {
                        pattern: pattern.clone(),
                        source,
                    })?)
                }
                None => None,
            };
            Ok(CompiledRule {
                regex,
                has_image: rule.matcher.has_image,
                reply: rule.reply.clone(),
                status_sequence: rule.status_sequence.clone(),
                delay_ms: rule.delay_ms,
                hits: AtomicUsize::new(0),
            })
        })
        .collect::<Result<Vec<_>, MockError>>()?;

    let listener = TcpListener::bind(("127.0.0.1", port))
        .map_err(|source| MockError::Bind { port, source })?;
    let actual_port = listener.local_addr().expect("local addr").port();
    listener
        .set_nonblocking(true)
        .expect("nonblocking listener");

    let state = Arc::new(ServerState {
        rules,
        request_count: AtomicUsize::new(0),
        in_flight: AtomicUsize::new(0),
        peak_in_flight: AtomicUsize::new(0),
        shutdown: AtomicBool::new(false),
    });

    let accept_state = Arc::clone(&state);
    let accept_thread = std::thread::spawn(move || loop {
        if accept_state.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let conn_state = Arc::clone(&accept_state);
                std::thread::spawn(move || handle_connection(stream, conn_state));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(_) => break,
        }
    });

    Ok(MockServer {
        state,
        port: actual_port,
        accept_thread: Some(accept_thread),
    })
}

impl MockServer {
    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    /// Total chat + embedding requests served so far.
    pub fn request_count(&self) -> usize {
        self.state.request_count.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously in-flight chat/embedding requests
    /// observed. Used to assert client-side concurrency bounds.
    pub fn peak_in_flight(&self) -> usize {
        self.state.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn shutdown(&mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }

    /// Block until the process is signalled. Used by the serve command.
    pub fn wait(mut self) {
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct ParsedRequest {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<Option<ParsedRequest>> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(None);
    }
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok(Some(ParsedRequest { method, path, body }))
}

fn handle_connection(mut stream: TcpStream, state: Arc<ServerState>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let request = match read_request(&mut stream) {
        Ok(Some(request)) => request,
        _ => return,
    };
    let (status, body) = route(&request, &state);
    let response = format!(
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        status_text(status),
        body.len(),
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.write_all(body.as_bytes());
    let _ = stream.flush();
}

fn status_text(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

fn route(request: &ParsedRequest, state: &Arc<ServerState>) -> (u16, String) {
    match (request.method.as_str(), request.path.as_str()) {
        ("GET", "/health") => (200, json!({"status": "ok"}).to_string()),
        ("POST", "/v1/chat/completions") => answer(request, state, false),
        ("POST", "/v1/embeddings") => answer(request, state, true),
        _ => (
            404,
            json!({"error": {"message": "unknown route"}}).to_string(),
        ),
    }
}

fn answer(request: &ParsedRequest, state: &Arc<ServerState>, embedding: bool) -> (u16, String) {
    let in_flight = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak_in_flight.fetch_max(in_flight, Ordering::SeqCst);
    state.request_count.fetch_add(1, Ordering::SeqCst);
    let result = answer_inner(request, state, embedding);
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    result
}

fn answer_inner(
    request: &ParsedRequest,
    state: &Arc<ServerState>,
    embedding: bool,
) -> (u16, String) {
    let body: Value = match serde_json::from_slice(&request.body) {
        Ok(value) => value,
        Err(e) => {
            return (
                400,
                json!({"error": {"message": format!("invalid JSON body: {e}")}}).to_string(),
            )
        }
    };
    let (prompt, image_bytes) = if embedding {
        (
            body.get("input")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            None,
        )
    } else {
        extract_chat(&body)
    };

    let rule = state.rules.iter().find(|rule| {
        if let Some(regex) = &rule.regex {
            if !regex.is_match(&prompt) {
                return false;
            }
        }
        if let Some(wants_image) = rule.has_image {
            if wants_image != image_bytes.is_some() {
                return false;
            }
        }
        true
    });
    let Some(rule) = rule else {
        return (
            404,
            json!({"error": {"message": "no scripted rule matches"}}).to_string(),
        );
    };

    if let Some(delay) = rule.delay_ms {
        std::thread::sleep(Duration::from_millis(delay));
    }
    let hit = rule.hits.fetch_add(1, Ordering::SeqCst);
    let status = match &rule.status_sequence {
        Some(sequence) if !sequence.is_empty() => sequence[hit.min(sequence.len() - 1)],
        _ => 200,
    };
    if !(200..300).contains(&status) {
        return (
            status,
            json!({"error": {"message": "scripted status", "code": status}}).to_string(),
        );
    }

    let reply = substitute(&rule.reply, &prompt, image_bytes.as_deref());
    if embedding {
        let vector =
            serde_json::from_str::<Vec<f64>>(&reply).unwrap_or_else(|_| pseudo_embedding(&prompt));
        (
            200,
            json!({"data": [{"embedding": vector, "index": 0}], "model": "mock"}).to_string(),
        )
    } else {
        let completion_tokens = (reply.len() / 4).max(1) as u64;
        let prompt_tokens = (prompt.len() / 4).max(1) as u64;
        (
            200,
            json!({
                "id": format!("mock-{hit}"),
                "object": "chat.completion",
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": reply},
                    "finish_reason": "stop"
                }],
                "usage": {
                    "prompt_tokens": prompt_tokens,
                    "completion_tokens": completion_tokens,
                    "total_tokens": prompt_tokens + completion_tokens
                }
            })
            .to_string(),
        )
    }
}

/// Pull the concatenated text parts and decoded image bytes out of a chat
/// body. String-valued content is accepted as plain text.
fn extract_chat(body: &Value) -> (String, Option<Vec<u8>>) {
    let mut prompt = String::new();
    let mut image = None;
    if let Some(messages) = body.get("messages").and_then(Value::as_array) {
        for message in messages {
            match message.get("content") {
                Some(Value::String(text)) => prompt.push_str(text),
                Some(Value::Array(parts)) => {
                    for part in parts {
                        match part.get("type").and_then(Value::as_str) {
                            Some("text") => {
                                if let Some(text) = part.get("text").and_then(Value::as_str) {
                                    prompt.push_str(text);
                                }
                            }
                            Some("image_url") => {
                                let url = part
                                    .get("image_url")
                                    .and_then(|u| u.get("url"))
                                    .and_then(Value::as_str)
                                    .unwrap_or_default();
                                if let Some(b64) = url.split(";base64,").nth(1) {
                                    image =
                                        base64::engine::general_purpose::STANDARD.decode(b64).ok();
                                }
                            }
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
    }
    (prompt, image)
}

fn substitute(reply: &str, prompt: &str, image: Option<&[u8]>) -> String {
    let mut out = reply.to_string();
    if out.contains("{image_text}") {
        let text = image
            .map(|bytes| String::from_utf8_lossy(bytes).trim().to_string())
            .unwrap_or_default();
        out = out.replace("{image_text}", &text);
    }
    if out.contains("{judge_verdict}") {
        out = out.replace("{judge_verdict}", judge_verdict(prompt));
    }
    out
}

/// Decide a judge prompt by checking whether the label occurs in the
/// prediction (case-insensitive, underscores equal spaces).
fn judge_verdict(prompt: &str) -> &'static str {
    let parsed = prompt
        .split_once("Label: ")
        .and_then(|(_, rest)| rest.split_once("; Prediction: "))
        .map(|(label, rest)| (label, rest.strip_suffix('.').unwrap_or(rest)));
    match parsed {
        Some((label, prediction)) => {
            let norm = |s: &str| s.to_lowercase().replace('_', " ");
            if norm(prediction).contains(&norm(label)) {
                "Yes"
            } else {
                "No"
            }
        }
        None => "No",
    }
}

/// Deterministic fallback embedding: 8 dims derived from the input digest.
fn pseudo_embedding(text: &str) -> Vec<f64> {
    let digest = crate::util::sha256_hex(text.as_bytes());
    digest
        .as_bytes()
        .chunks(8)
        .take(8)
        .map(|chunk| {
            let sum: u32 = chunk.iter().map(|&b| b as u32).sum();
            (sum % 1000) as f64 / 1000.0
        })
        .collect()
}
