//! Shared test backends: scripted completions, request recorders, and a
//! minimal HTTP stub server for adapter contract tests.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use vqqa::agents::sim::SimVlm;
use vqqa::backend::{BackendError, CompletionRequest, RoleTag, VlmClient};

/// Serves canned responses per role, in order, and records every request.
pub struct ScriptedVlm {
    responses: Mutex<Vec<(RoleTag, String)>>,
    pub requests: Arc<Mutex<Vec<CompletionRequest>>>,
}

impl ScriptedVlm {
    pub fn new(responses: Vec<(RoleTag, String)>) -> Self {
        Self {
            responses: Mutex::new(responses),
            requests: Arc::new(Mutex::new(Vec::new())),
        }
    }
}

impl VlmClient for ScriptedVlm {
    fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        request.validate()?;
        self.requests.lock().unwrap().push(request.clone());
        let mut responses = self.responses.lock().unwrap();
        let position = responses
            .iter()
            .position(|(role, _)| *role == request.role_tag)
            .ok_or_else(|| {
                BackendError::Unavailable(format!("no scripted response for {:?}", request.role_tag))
            })?;
        Ok(responses.remove(position).1)
    }
}

/// Simulated agents with the global ratings overridden by a script.
pub struct ScriptedRater {
    inner: SimVlm,
    ratings: Mutex<VecDeque<String>>,
    pub requests: Arc<Mutex<Vec<CompletionRequest>>>,
}

impl ScriptedRater {
    pub fn new(ratings: &[&str]) -> Self {
        Self {
            inner: SimVlm,
            ratings: Mutex::new(ratings.iter().map(|s| s.to_string()).collect()),
            requests: Arc::new(Mutex::new(Vec::new())),
        }
    }
}

impl VlmClient for ScriptedRater {
    fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        if request.role_tag == RoleTag::GlobalRate {
            request.validate()?;
            return self
                .ratings
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| BackendError::Unavailable("rating script exhausted".into()));
        }
        self.inner.vlm_complete(request)
    }
}

/// Wraps any client and records the requests it sees.
pub struct RecordingVlm<T: VlmClient> {
    inner: T,
    pub requests: Arc<Mutex<Vec<CompletionRequest>>>,
}

impl<T: VlmClient> RecordingVlm<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            requests: Arc::new(Mutex::new(Vec::new())),
        }
    }
}

impl<T: VlmClient> VlmClient for RecordingVlm<T> {
    fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.vlm_complete(request)
    }
}

/// One recorded HTTP exchange.
#[derive(Debug, Clone)]
pub struct StubExchange {
    pub path: String,
    pub body: String,
}

/// Minimal blocking HTTP/1.1 stub: answers each request with the next
/// scripted `(status, body)` pair, falling back to the last one.
pub struct StubServer {
    pub base_url: String,
    pub exchanges: Arc<Mutex<Vec<StubExchange>>>,
}

impl StubServer {
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let exchanges: Arc<Mutex<Vec<StubExchange>>> = Arc::new(Mutex::new(Vec::new()));
        let recorded = exchanges.clone();
        std::thread::spawn(move || {
            let mut queue: VecDeque<(u16, String)> = responses.into();
            let mut last = queue.back().cloned().unwrap_or((200, String::new()));
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let Some(exchange) = read_request(&mut stream) else {
                    continue;
                };
                recorded.lock().unwrap().push(exchange);
                let (status, body) = queue.pop_front().unwrap_or_else(|| last.clone());
                last = (status, body.clone());
                let reason = match status {
                    200 => "OK",
                    403 => "Forbidden",
                    429 => "Too Many Requests",
                    _ => "Error",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\n\
                     Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        Self {
            base_url,
            exchanges,
        }
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<StubExchange> {
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buffer.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_subsequence(&buffer, b"\r\n\r\n") {
            break pos + 4;
        }
        if buffer.len() > 1 << 20 {
            return None;
        }
    };
    let headers = String::from_utf8_lossy(&buffer[..header_end]).to_string();
    let path = headers
        .lines()
        .next()?
        .split_whitespace()
        .nth(1)?
        .to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(str::trim).map(String::from))
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    while buffer.len() < header_end + content_length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        buffer.extend_from_slice(&chunk[..n]);
    }
    let body = String::from_utf8_lossy(&buffer[header_end..]).to_string();
    Some(StubExchange { path, body })
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}
