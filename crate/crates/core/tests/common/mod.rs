#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

use promptevo::runner::{RunConfig, SeedInstruction};

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Recorded {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

type Handler = dyn Fn(usize, &Recorded) -> (u16, String) + Send + Sync;

/// One-connection-per-request HTTP/1.1 server on an ephemeral local port.
pub struct StubServer {
    pub base_url: String,
    requests: Arc<Mutex<Vec<Recorded>>>,
}

impl StubServer {
    /// `handler(n, request)` answers the n-th request (0-based) with a status and body.
    pub fn start(handler: impl Fn(usize, &Recorded) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let seen = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let seen = Arc::clone(&seen);
                let handler = Arc::clone(&handler);
                thread::spawn(move || serve(stream, &seen, handler.as_ref()));
            }
        });
        Self { base_url, requests }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, seen: &Mutex<Vec<Recorded>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_owned();
    let path = parts.next().unwrap_or_default().to_owned();
    let mut headers = Vec::new();
    let mut length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if k.eq_ignore_ascii_case("content-length") {
                length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).unwrap();
    let recorded = Recorded {
        method,
        path,
        headers,
        body: String::from_utf8(body).unwrap(),
    };
    let n = {
        let mut seen = seen.lock().unwrap();
        seen.push(recorded.clone());
        seen.len() - 1
    };
    let (status, body) = handler(n, &recorded);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

/// Minimal chat-completions response carrying `content`.
pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "id": "cmpl-stub",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop"
        }]
    })
    .to_string()
}

pub const SEED_SHORT: &str = "Determine whether the review sentiment is favorable, unfavorable or indifferent.";
pub const SEED_LONG: &str = "Carefully classify each given review text and write whether the opinion expressed is favorable, unfavorable or indifferent.";

/// Offline configuration: seeded-edit mock, bundled keyword task, trigram scorer.
pub fn offline_config(dir: &Path, seed: u64, m: usize, n: u32) -> RunConfig {
    let mut c = RunConfig::offline(
        "sentiment analysis",
        vec![
            SeedInstruction {
                definition: SEED_SHORT.into(),
                example: String::new(),
            },
            SeedInstruction {
                definition: SEED_LONG.into(),
                example: "Review: the battery died in a day -> unfavorable".into(),
            },
        ],
        dir.to_owned(),
    );
    c.seed = seed;
    c.population_size = m;
    c.generations = n;
    c
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

pub fn log_events(dir: &Path) -> Vec<Value> {
    read(&dir.join("run.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
