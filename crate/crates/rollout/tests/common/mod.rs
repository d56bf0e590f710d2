#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rollout::config::HttpBackendConfig;
use rollout::http::{HttpBackend, Sleeper};
use rollout_core::message::template_literals;
use rollout_core::Tokenizer;

/// A canned-response HTTP server on an ephemeral port. Each connection gets
/// the next `(status, body)` and the request body is kept for inspection.
pub struct StubServer {
    pub endpoint: String,
    pub requests: Arc<Mutex<Vec<String>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
        });
        Self { endpoint, requests, handle: Some(handle) }
    }

    pub fn join(mut self) -> Vec<String> {
        self.handle.take().unwrap().join().unwrap();
        self.requests.lock().unwrap().clone()
    }
}

pub fn http_config(endpoint: &str) -> HttpBackendConfig {
    serde_json::from_value(serde_json::json!({"endpoint": endpoint, "model": "stub-model", "timeout_secs": 5}))
        .unwrap()
}

/// Backend whose sleeps are recorded instead of taken.
pub fn backend(endpoint: &str, corpus: &[&str]) -> (HttpBackend, Arc<Mutex<Vec<Duration>>>) {
    let mut words = template_literals();
    words.extend(corpus.iter().map(|s| s.to_string()));
    let tok = Arc::new(Tokenizer::from_corpus(words));
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let s2 = sleeps.clone();
    let sleeper: Sleeper = Arc::new(move |d| s2.lock().unwrap().push(d));
    (HttpBackend::new(&http_config(endpoint), tok).unwrap().with_sleeper(sleeper), sleeps)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

pub fn workspace_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}
