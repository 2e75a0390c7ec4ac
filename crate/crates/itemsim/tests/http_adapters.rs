//! Wire-level tests for the remote embedding backend and the HTTP provider
//! adapters, against an in-process stub server.

mod common;

use common::{spawn_stub_server, StubResponse};
use itemsim::corpus::Strategy;
use itemsim::embedder::{
    embed_texts, make_backend, BackendKind, BackendSpec, EmbedError,
};
use itemsim::genharness::{
    generate_batch, GenerationPlan, GeminiProvider, OpenAiChatProvider, PromptBundle,
    Provider, ProviderConfig, ProviderKind, RequestStatus,
};
use itemsim::corpus::EpaTopic;

fn remote_spec(endpoint: &str, dimension: usize) -> BackendSpec {
    BackendSpec {
        dimension,
        ..BackendSpec::biobert(BackendKind::Remote {
            endpoint: endpoint.to_string(),
        })
    }
}

fn ctx() -> itemsim::genharness::RequestContext {
    itemsim::genharness::RequestContext {
        provider_id: "gpt-4o".into(),
        strategy: Strategy::Naive,
        topic_descriptor: "t".into(),
        question_number: 1,
    }
}

fn prompt() -> PromptBundle {
    PromptBundle {
        system: "system text".into(),
        user: "user text".into(),
    }
}

#[test]
fn remote_backend_posts_protocol_shape() {
    let body = serde_json::json!({
        "model": itemsim::embedder::BIOBERT_MODEL,
        "dimension": 3,
        "vectors": [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
    });
    let (url, captured, handle) =
        spawn_stub_server(vec![StubResponse::json(200, body.to_string())]);
    let spec = remote_spec(&url, 3);
    let backend = make_backend(&spec, None);
    let texts = vec!["first".to_string(), "second".to_string()];
    let vectors = embed_texts(backend.as_ref(), &texts).unwrap();
    handle.join().unwrap();

    assert_eq!(vectors.len(), 2);
    // normalize_output is set on the shipped specs.
    assert!((vectors[0].norm() - 1.0).abs() < 1e-6);
    assert_eq!(vectors[0].values, vec![1.0, 0.0, 0.0]);
    assert_eq!(vectors[1].values, vec![0.0, 1.0, 0.0]);

    let requests = captured.lock().unwrap();
    assert_eq!(requests.len(), 1);
    assert!(requests[0].request_line.starts_with("POST /embed"));
    let payload = requests[0].json();
    assert_eq!(payload["model"], itemsim::embedder::BIOBERT_MODEL);
    assert_eq!(payload["texts"], serde_json::json!(["first", "second"]));
}

#[test]
fn remote_backend_dimension_mismatch_is_hard_error() {
    let body = serde_json::json!({
        "model": itemsim::embedder::BIOBERT_MODEL,
        "dimension": 5,
        "vectors": [[1.0, 0.0, 0.0, 0.0, 0.0]],
    });
    let (url, _captured, handle) =
        spawn_stub_server(vec![StubResponse::json(200, body.to_string())]);
    let spec = remote_spec(&url, 3);
    let backend = make_backend(&spec, None);
    let err = embed_texts(backend.as_ref(), &["x".to_string()]).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(
        err,
        EmbedError::DimensionMismatch {
            expected: 3,
            got: 5,
            ..
        }
    ));
}

#[test]
fn remote_backend_non_200_is_unavailable() {
    let (url, _captured, handle) =
        spawn_stub_server(vec![StubResponse::json(503, "{}".to_string())]);
    let spec = remote_spec(&url, 3);
    let backend = make_backend(&spec, None);
    let err = embed_texts(backend.as_ref(), &["x".to_string()]).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, EmbedError::BackendUnavailable { .. }));
}

#[test]
fn openai_adapter_sends_bearer_and_messages() {
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": "  the item text  "}}]
    });
    let (url, captured, handle) =
        spawn_stub_server(vec![StubResponse::json(200, body.to_string())]);
    let cfg = ProviderConfig {
        provider_id: "gpt-4o".into(),
        kind: ProviderKind::OpenAiChat,
        endpoint: format!("{url}/v1/chat/completions"),
        model: "gpt-4o".into(),
        auth_env: None,
        ..ProviderConfig::mock("gpt-4o", 0)
    };
    let provider = OpenAiChatProvider::new(cfg, "secret-token".into());
    let text = provider.complete(&prompt(), &ctx()).unwrap();
    handle.join().unwrap();
    assert_eq!(text, "the item text");

    let requests = captured.lock().unwrap();
    assert_eq!(
        requests[0].header("authorization"),
        Some("Bearer secret-token")
    );
    let payload = requests[0].json();
    assert_eq!(payload["model"], "gpt-4o");
    assert_eq!(payload["temperature"], 1.0);
    assert_eq!(payload["max_tokens"], 2000);
    assert_eq!(payload["messages"][0]["role"], "system");
    assert_eq!(payload["messages"][0]["content"], "system text");
    assert_eq!(payload["messages"][1]["role"], "user");
    assert_eq!(payload["messages"][1]["content"], "user text");
}

#[test]
fn gemini_adapter_serializes_safety_overrides() {
    let candidate = serde_json::json!({
        "candidates": [{"content": {"parts": [{"text": "generated"}]}}]
    });
    let (url, captured, handle) = spawn_stub_server(vec![
        StubResponse::json(200, candidate.to_string()),
        StubResponse::json(200, candidate.to_string()),
    ]);
    let mut cfg = ProviderConfig {
        provider_id: "gemini-2.5-flash".into(),
        kind: ProviderKind::Gemini,
        endpoint: format!("{url}/v1beta/models/gemini-2.5-flash:generateContent"),
        model: "gemini-2.5-flash".into(),
        auth_env: None,
        safety_overrides: true,
        ..ProviderConfig::mock("gemini-2.5-flash", 0)
    };
    let provider = GeminiProvider::new(cfg.clone(), "gkey".into());
    assert_eq!(provider.complete(&prompt(), &ctx()).unwrap(), "generated");

    cfg.safety_overrides = false;
    let provider = GeminiProvider::new(cfg, "gkey".into());
    provider.complete(&prompt(), &ctx()).unwrap();
    handle.join().unwrap();

    let requests = captured.lock().unwrap();
    assert!(requests[0].request_line.contains("key=gkey"));
    let with_overrides = requests[0].json();
    let settings = with_overrides["safetySettings"].as_array().unwrap();
    assert_eq!(settings.len(), 5);
    assert!(settings
        .iter()
        .all(|s| s["threshold"] == "BLOCK_NONE"));
    assert!(settings
        .iter()
        .any(|s| s["category"] == "HARM_CATEGORY_CIVIC_INTEGRITY"));
    assert_eq!(with_overrides["generationConfig"]["maxOutputTokens"], 2000);
    assert_eq!(with_overrides["systemInstruction"]["parts"][0]["text"], "system text");

    let without_overrides = requests[1].json();
    assert!(without_overrides.get("safetySettings").is_none());
}

#[test]
fn transient_http_failure_retries_then_succeeds() {
    let ok_body = serde_json::json!({
        "choices": [{"message": {"content": "Question: S?\nA) a\nB) b\nC) c\nD) d\n\nAnswer: A"}}]
    });
    let (url, captured, handle) = spawn_stub_server(vec![
        StubResponse::json(503, "{}".to_string()),
        StubResponse::json(200, ok_body.to_string()),
    ]);
    let cfg = ProviderConfig {
        provider_id: "gpt-4o".into(),
        kind: ProviderKind::OpenAiChat,
        endpoint: format!("{url}/v1/chat/completions"),
        model: "gpt-4o".into(),
        auth_env: None,
        max_retries: 2,
        retry_backoff_ms: 0,
        max_in_flight: 1,
        ..ProviderConfig::mock("gpt-4o", 0)
    };
    let provider = OpenAiChatProvider::new(cfg.clone(), "k".into());
    let plan = GenerationPlan {
        topics: vec![EpaTopic::new("Some activity", None).unwrap()],
        questions_per_topic: 1,
        provider: cfg,
        strategy: Strategy::Naive,
        guided_context: None,
    };
    let now = chrono::Utc::now;
    let out = generate_batch(&plan, &provider, &now).unwrap();
    handle.join().unwrap();
    assert_eq!(out.records[0].status, RequestStatus::Ok);
    assert_eq!(out.records[0].attempts, 2);
    assert_eq!(captured.lock().unwrap().len(), 2);
}

#[test]
fn auth_rejection_aborts_the_batch() {
    let (url, _captured, handle) =
        spawn_stub_server(vec![StubResponse::json(401, "{}".to_string())]);
    let cfg = ProviderConfig {
        provider_id: "gpt-4o".into(),
        kind: ProviderKind::OpenAiChat,
        endpoint: format!("{url}/v1/chat/completions"),
        model: "gpt-4o".into(),
        auth_env: None,
        max_in_flight: 1,
        retry_backoff_ms: 0,
        ..ProviderConfig::mock("gpt-4o", 0)
    };
    let provider = OpenAiChatProvider::new(cfg.clone(), "bad".into());
    let plan = GenerationPlan {
        topics: vec![EpaTopic::new("Some activity", None).unwrap()],
        questions_per_topic: 2,
        provider: cfg,
        strategy: Strategy::Naive,
        guided_context: None,
    };
    let now = chrono::Utc::now;
    let err = generate_batch(&plan, &provider, &now).unwrap_err();
    handle.join().unwrap();
    assert!(err.to_string().contains("authentication failed"));
}
