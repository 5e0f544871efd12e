//! Scripted mock chat-completion server for offline tests.
//!
//! A script is an ordered list of steps, each pairing a request matcher
//! with a canned reply. Requests are checked against the current step
//! only: the matcher's substrings must all occur in the decoded message
//! list (one `role: content` line per message). A matching request
//! consumes one use of the step and receives its reply; a request that
//! does not match the current step is answered with status 400 and
//! recorded, so tests can assert that every exchange followed the script.
//!
//! Scripts can be embedded in tests or loaded from a JSON fixture file:
//! an array of `{"match_contains": [...], "reply": "...", "status": 200,
//! "times": 1}` objects (`status` and `times` optional).

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::Result;

/// One scripted exchange: a request matcher and the reply it earns.
#[derive(Debug, Clone, Deserialize)]
pub struct MockStep {
    /// Substrings that must all occur in the decoded request (messages
    /// rendered as `role: content` lines). Empty matches anything.
    #[serde(default)]
    pub match_contains: Vec<String>,
    /// Assistant reply content (for 2xx) or raw response body (otherwise).
    pub reply: String,
    /// HTTP status to answer with.
    #[serde(default = "default_status")]
    pub status: u16,
    /// How many consecutive requests this step serves.
    #[serde(default = "default_times")]
    pub times: usize,
}

fn default_status() -> u16 {
    200
}

fn default_times() -> usize {
    1
}

impl MockStep {
    /// A step answering one matching request with an assistant reply.
    pub fn reply(match_contains: &[&str], reply: &str) -> Self {
        MockStep {
            match_contains: match_contains.iter().map(|s| s.to_string()).collect(),
            reply: reply.to_string(),
            status: 200,
            times: 1,
        }
    }

    /// A step answering `times` matching requests with a bare status.
    pub fn status(match_contains: &[&str], status: u16, body: &str, times: usize) -> Self {
        MockStep {
            match_contains: match_contains.iter().map(|s| s.to_string()).collect(),
            reply: body.to_string(),
            status,
            times,
        }
    }

    fn matches(&self, decoded: &str) -> bool {
        self.match_contains.iter().all(|m| decoded.contains(m))
    }
}

struct Script {
    steps: VecDeque<MockStep>,
    errors: Vec<String>,
}

/// A live mock endpoint bound to a loopback port.
///
/// The server runs on a background thread until dropped. After a test
/// drives its client calls, [`MockServer::remaining`] and
/// [`MockServer::errors`] expose whether the script was fully consumed
/// and whether any request failed to match.
pub struct MockServer {
    addr: SocketAddr,
    script: Arc<Mutex<Script>>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Starts a server scripted with `steps`.
    pub fn start(steps: Vec<MockStep>) -> Result<MockServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let steps: VecDeque<MockStep> = steps.into_iter().filter(|s| s.times > 0).collect();
        let script = Arc::new(Mutex::new(Script {
            steps,
            errors: Vec::new(),
        }));
        let shutdown = Arc::new(AtomicBool::new(false));
        let handle = {
            let script = Arc::clone(&script);
            let shutdown = Arc::clone(&shutdown);
            std::thread::spawn(move || serve(listener, script, shutdown))
        };
        Ok(MockServer {
            addr,
            script,
            shutdown,
            handle: Some(handle),
        })
    }

    /// Starts a server scripted from a JSON fixture file.
    pub fn from_fixture(path: &Path) -> Result<MockServer> {
        let raw = std::fs::read_to_string(path)?;
        let steps: Vec<MockStep> = serde_json::from_str(&raw)?;
        MockServer::start(steps)
    }

    /// URL of the chat-completion route.
    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Total request count the remaining steps would still serve.
    pub fn remaining(&self) -> usize {
        let script = self.script.lock().unwrap();
        script.steps.iter().map(|s| s.times).sum()
    }

    /// Descriptions of requests that did not match the script.
    pub fn errors(&self) -> Vec<String> {
        self.script.lock().unwrap().errors.clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve(listener: TcpListener, script: Arc<Mutex<Script>>, shutdown: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
        let _ = handle_connection(stream, &script);
    }
}

fn handle_connection(stream: TcpStream, script: &Mutex<Script>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let Some(body) = read_request(&mut reader)? else {
        return Ok(());
    };
    let decoded = decode_messages(&body);
    let (status, response_body) = {
        let mut script = script.lock().unwrap();
        let matched = script
            .steps
            .front()
            .is_some_and(|step| step.matches(&decoded));
        if matched {
            let step = if script.steps[0].times > 1 {
                script.steps[0].times -= 1;
                script.steps[0].clone()
            } else {
                script.steps.pop_front().unwrap()
            };
            let body = if (200..300).contains(&step.status) {
                json!({
                    "choices": [
                        { "message": { "role": "assistant", "content": step.reply } }
                    ]
                })
                .to_string()
            } else {
                step.reply
            };
            (step.status, body)
        } else {
            let expected = script.steps.front().map_or_else(
                || "script exhausted".to_string(),
                |s| format!("expected substrings {:?}", s.match_contains),
            );
            script
                .errors
                .push(format!("unmatched request ({expected}): {decoded}"));
            (
                400,
                json!({ "error": format!("request does not match the script: {expected}") })
                    .to_string(),
            )
        }
    };
    write_response(reader.into_inner(), status, &response_body)
}

/// Reads one HTTP request and returns its body, or None on an empty
/// connection (such as the wake-up ping on shutdown).
fn read_request(reader: &mut BufReader<TcpStream>) -> std::io::Result<Option<String>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 || line.trim().is_empty() {
        return Ok(None);
    }
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 {
            return Ok(None);
        }
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok(Some(String::from_utf8_lossy(&body).into_owned()))
}

/// Renders a request body's messages as one `role: content` line each, so
/// matchers can pin full prompts byte for byte.
fn decode_messages(body: &str) -> String {
    let Ok(payload) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    let Some(messages) = payload.get("messages").and_then(|m| m.as_array()) else {
        return body.to_string();
    };
    messages
        .iter()
        .map(|m| {
            format!(
                "{}: {}",
                m.get("role").and_then(|r| r.as_str()).unwrap_or("?"),
                m.get("content").and_then(|c| c.as_str()).unwrap_or("?"),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn write_response(mut stream: TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Mock",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len(),
    )?;
    stream.flush()
}

/// Convenience: the path of the bundled sentiment fixture at
/// `fixtures/bundled_sentiment.json` relative to the crate root.
pub fn bundled_sentiment_fixture() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/bundled_sentiment.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_deserialize_with_defaults() {
        let raw = r#"[
            { "match_contains": ["user: hi"], "reply": "hello" },
            { "reply": "boom", "status": 500, "times": 3 }
        ]"#;
        let steps: Vec<MockStep> = serde_json::from_str(raw).unwrap();
        assert_eq!(steps[0].status, 200);
        assert_eq!(steps[0].times, 1);
        assert_eq!(steps[1].status, 500);
        assert_eq!(steps[1].times, 3);
        assert!(steps[1].match_contains.is_empty());
    }

    #[test]
    fn decoding_renders_role_content_lines() {
        let body = r#"{"model":"m","messages":[
            {"role":"user","content":"line one"},
            {"role":"assistant","content":"line two"}
        ],"temperature":0.0}"#;
        assert_eq!(decode_messages(body), "user: line one\nassistant: line two");
    }

    #[test]
    fn matching_requires_every_substring() {
        let step = MockStep::reply(&["user: a", "assistant: b"], "r");
        assert!(step.matches("user: a\nassistant: b"));
        assert!(!step.matches("user: a"));
        assert!(MockStep::reply(&[], "r").matches("anything"));
    }
}
