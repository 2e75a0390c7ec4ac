//! Shared helpers for integration tests: the reference corpus layout and a
//! minimal in-process HTTP stub server.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use chrono::TimeZone;
use itemsim::config::RunConfig;
use itemsim::corpus::{seed_topics, EpaTopic, ItemBank, Provenance, Strategy};
use itemsim::genharness::ProviderConfig;
use itemsim::parser::{parse_bank, BankSource};
use itemsim::pipeline::Workspace;

pub const REFERENCE_RUN_ID: &str = "reference";
pub const REFERENCE_PROVIDER: &str = "gpt-4o";

/// Expected answer keys per reference corpus, in Q1..Q10 order.
pub const EXPECTED_KEYS: [(&str, usize, Strategy, [char; 10]); 8] = [
    ("naive_fever_cough.txt", 0, Strategy::Naive,
     ['C', 'C', 'B', 'C', 'A', 'B', 'C', 'B', 'D', 'B']),
    ("naive_high_blood_pressure.txt", 1, Strategy::Naive,
     ['C', 'A', 'B', 'B', 'B', 'B', 'C', 'B', 'C', 'C']),
    ("naive_emotional_distress.txt", 2, Strategy::Naive,
     ['C', 'D', 'C', 'C', 'C', 'B', 'C', 'C', 'B', 'C']),
    ("naive_well_adult.txt", 3, Strategy::Naive,
     ['C', 'B', 'C', 'C', 'B', 'C', 'B', 'B', 'C', 'B']),
    ("guided_viral_pneumonia.txt", 0, Strategy::Guided,
     ['B', 'B', 'B', 'B', 'B', 'B', 'B', 'A', 'B', 'B']),
    ("guided_hypertension.txt", 1, Strategy::Guided,
     ['C', 'A', 'B', 'B', 'B', 'B', 'B', 'A', 'B', 'B']),
    ("guided_mental_health.txt", 2, Strategy::Guided,
     ['D', 'D', 'C', 'C', 'D', 'D', 'C', 'C', 'B', 'B']),
    ("guided_immunization.txt", 3, Strategy::Guided,
     ['B', 'B', 'C', 'C', 'B', 'A', 'C', 'C', 'B', 'C']),
];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join("reference_corpus")
}

/// (fixture file, topic index, strategy) for the eight reference corpora.
pub fn reference_layout() -> Vec<(&'static str, usize, Strategy)> {
    vec![
        ("naive_fever_cough.txt", 0, Strategy::Naive),
        ("naive_high_blood_pressure.txt", 1, Strategy::Naive),
        ("naive_emotional_distress.txt", 2, Strategy::Naive),
        ("naive_well_adult.txt", 3, Strategy::Naive),
        ("guided_viral_pneumonia.txt", 0, Strategy::Guided),
        ("guided_hypertension.txt", 1, Strategy::Guided),
        ("guided_mental_health.txt", 2, Strategy::Guided),
        ("guided_immunization.txt", 3, Strategy::Guided),
    ]
}

pub fn reference_provenance(strategy: Strategy) -> Provenance {
    Provenance {
        provider_id: REFERENCE_PROVIDER.to_string(),
        strategy,
        temperature: 1.0,
        max_tokens: 2000,
        run_id: REFERENCE_RUN_ID.to_string(),
        created_at: chrono::Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
    }
}

/// Bank sources pointing straight at the checked-in fixture files.
pub fn reference_sources() -> Vec<BankSource> {
    let topics = seed_topics();
    reference_layout()
        .into_iter()
        .map(|(file, topic_idx, strategy)| BankSource {
            path: fixture_dir().join(file),
            topic: topics[topic_idx].clone(),
            provenance: reference_provenance(strategy),
        })
        .collect()
}

/// Parses the eight fixture corpora into one bank, asserting a clean build.
pub fn reference_bank() -> ItemBank {
    let build = parse_bank(&reference_sources());
    assert!(
        build.file_errors.is_empty(),
        "file errors: {:?}",
        build.file_errors
    );
    assert!(
        build.rejected.is_empty(),
        "rejected blocks: {:?}",
        build
            .rejected
            .iter()
            .map(|(p, r)| format!("{}: {}", p.display(), r.reason))
            .collect::<Vec<_>>()
    );
    build.bank
}

/// A run config describing the reference corpus (one provider, both
/// strategies), for driving ingest/analyze over staged fixture files.
pub fn reference_config(seed: u64) -> RunConfig {
    let mut config = RunConfig::default();
    config.run_id = REFERENCE_RUN_ID.to_string();
    config.providers = vec![ProviderConfig::mock(REFERENCE_PROVIDER, seed)];
    config.seed = Some(seed);
    config
}

/// Copies the fixture corpora into a workspace's generated-file layout so
/// the CLI stages can ingest them.
pub fn stage_reference_workspace(root: &Path) -> Workspace {
    let ws = Workspace::new(root);
    let topics: Vec<EpaTopic> = seed_topics();
    for (file, topic_idx, strategy) in reference_layout() {
        let destination =
            ws.generation_file(REFERENCE_RUN_ID, REFERENCE_PROVIDER, strategy, &topics[topic_idx]);
        std::fs::create_dir_all(destination.parent().unwrap()).unwrap();
        std::fs::copy(fixture_dir().join(file), &destination).unwrap();
    }
    ws
}

/// One canned response the stub HTTP server plays back.
#[derive(Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
}

impl StubResponse {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
        }
    }
}

/// Captured request: first line, headers, body.
#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl CapturedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }
}

/// Spawns a single-threaded HTTP/1.1 stub that plays back the given
/// responses in order and records every request. Returns
/// (base URL, captured requests, join handle).
pub fn spawn_stub_server(
    responses: Vec<StubResponse>,
) -> (String, Arc<Mutex<Vec<CapturedRequest>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
    let addr = listener.local_addr().unwrap();
    let captured = Arc::new(Mutex::new(Vec::new()));
    let captured_handle = Arc::clone(&captured);
    let expected = responses.len();
    let handle = std::thread::spawn(move || {
        for response in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(pair) => pair,
                Err(_) => return,
            };
            let request = read_request(&mut stream);
            captured_handle.lock().unwrap().push(request);
            let reason = match response.status {
                200 => "OK",
                400 => "Bad Request",
                401 => "Unauthorized",
                500 => "Internal Server Error",
                503 => "Service Unavailable",
                _ => "Response",
            };
            let payload = format!(
                "HTTP/1.1 {} {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                response.status,
                reason,
                response.body.len(),
                response.body
            );
            let _ = stream.write_all(payload.as_bytes());
        }
        let _ = expected;
    });
    (format!("http://{addr}"), captured, handle)
}

fn read_request(stream: &mut std::net::TcpStream) -> CapturedRequest {
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 4096];
    let mut header_end = None;
    loop {
        let n = stream.read(&mut chunk).expect("read request");
        if n == 0 {
            break;
        }
        buffer.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buffer) {
            header_end = Some(pos);
            break;
        }
    }
    let header_end = header_end.expect("request headers");
    let header_text = String::from_utf8_lossy(&buffer[..header_end]).to_string();
    let mut lines = header_text.split("\r\n");
    let request_line = lines.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    let mut content_length = 0usize;
    for line in lines {
        if let Some((name, value)) = line.split_once(':') {
            let value = value.trim().to_string();
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.parse().unwrap_or(0);
            }
            headers.push((name.to_string(), value));
        }
    }
    let mut body = buffer[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).expect("read body");
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    CapturedRequest {
        request_line,
        headers,
        body: String::from_utf8_lossy(&body).to_string(),
    }
}

fn find_header_end(buffer: &[u8]) -> Option<usize> {
    buffer.windows(4).position(|w| w == b"\r\n\r\n")
}
