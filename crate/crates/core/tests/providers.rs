//! Remote provider clients against a local stub server.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use cdr_agent::provider::RemoteConfig;
use cdr_agent::{
    CdrStatus, CompletionRequest, EmbeddingProvider, LlmProvider, MockEmbedder, NoteMeta, Pipeline,
    PipelineConfig, ProviderError, RemoteEmbedder, RemoteLlm, RetryPolicy, SessionStatus,
};
use serde_json::{json, Value};

#[derive(Clone, Copy)]
enum Mode {
    Ok,
    /// 503 for the first two calls.
    Flaky,
    Hang,
    BadRequest,
    Garbage,
    /// Hang only for prompts that mention the Canadian C-spine rule.
    HangOnCanadian,
}

#[derive(Clone)]
struct Stub {
    mode: Mode,
    calls: Arc<AtomicUsize>,
    last: Arc<parking_lot::Mutex<Option<(HeaderMap, Value)>>>,
}

async fn embeddings(State(s): State<Stub>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.calls.fetch_add(1, Ordering::SeqCst);
    *s.last.lock() = Some((headers, body.clone()));
    if let Some(r) = fault(s.mode, n).await {
        return r;
    }
    let inputs = body["input"].as_array().unwrap();
    // Reverse order with explicit indices: the client must reorder.
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, t)| json!({"index": i, "embedding": [t.as_str().unwrap().len() as f64, 1.0]}))
        .collect();
    (StatusCode::OK, Json(json!({"data": data})))
}

async fn chat(State(s): State<Stub>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.calls.fetch_add(1, Ordering::SeqCst);
    *s.last.lock() = Some((headers, body.clone()));
    let user = body["messages"][1]["content"].as_str().unwrap_or_default().to_string();
    let mode = match s.mode {
        Mode::HangOnCanadian if user.contains("Canadian") => Mode::Hang,
        Mode::HangOnCanadian => Mode::Ok,
        m => m,
    };
    if let Some(r) = fault(mode, n).await {
        return r;
    }
    let answer = if user.contains("nexus_cspine") {
        "midline_tenderness: yes"
    } else {
        "pong"
    };
    (
        StatusCode::OK,
        Json(json!({"choices": [{"message": {"role": "assistant", "content": answer}}]})),
    )
}

async fn fault(mode: Mode, call: usize) -> Option<(StatusCode, Json<Value>)> {
    match mode {
        Mode::Ok | Mode::HangOnCanadian => None,
        Mode::Flaky if call >= 2 => None,
        Mode::Flaky => Some((StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "busy"})))),
        Mode::Hang => {
            tokio::time::sleep(Duration::from_secs(5)).await;
            None
        }
        Mode::BadRequest => Some((StatusCode::BAD_REQUEST, Json(json!({"error": "bad"})))),
        Mode::Garbage => Some((StatusCode::OK, Json(json!({"unexpected": true})))),
    }
}

async fn serve(mode: Mode) -> (String, Stub) {
    let stub = Stub {
        mode,
        calls: Arc::new(AtomicUsize::new(0)),
        last: Arc::new(parking_lot::Mutex::new(None)),
    };
    let app = Router::new()
        .route("/embeddings", post(embeddings))
        .route("/chat", post(chat))
        .with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), stub)
}

fn config(url: String) -> RemoteConfig {
    RemoteConfig {
        url,
        model: "test-model".into(),
        api_key: Some("secret".into()),
        retry: RetryPolicy {
            max_retries: 2,
            timeout: Duration::from_millis(300),
            backoff: Duration::from_millis(5),
        },
    }
}

#[tokio::test]
async fn embeddings_are_reordered_by_index() {
    let (base, stub) = serve(Mode::Ok).await;
    let e = RemoteEmbedder::new(config(format!("{base}/embeddings")));
    let texts = vec!["a".to_string(), "abc".to_string(), "ab".to_string()];
    let out = e.embed_batch(&texts).await.unwrap();
    let lens: Vec<f64> = out.iter().map(|v| v.values()[0]).collect();
    assert_eq!(lens, [1.0, 3.0, 2.0]);
    let (headers, body) = stub.last.lock().clone().unwrap();
    assert_eq!(headers["authorization"], "Bearer secret");
    assert_eq!(body["model"], "test-model");
    assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn transient_errors_are_retried() {
    let (base, stub) = serve(Mode::Flaky).await;
    let e = RemoteEmbedder::new(config(format!("{base}/embeddings")));
    assert!(e.embed_batch(&["x".to_string()]).await.is_ok());
    assert_eq!(stub.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn timeouts_become_transport_errors_after_retries() {
    let (base, stub) = serve(Mode::Hang).await;
    let llm = RemoteLlm::new(config(format!("{base}/chat")));
    let err = llm.complete(&CompletionRequest::new("s", "u")).await.unwrap_err();
    assert!(matches!(err, ProviderError::Transport { attempts: 3, .. }), "{err}");
    assert_eq!(stub.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let (base, stub) = serve(Mode::BadRequest).await;
    let llm = RemoteLlm::new(config(format!("{base}/chat")));
    let err = llm.complete(&CompletionRequest::new("s", "u")).await.unwrap_err();
    assert!(matches!(err, ProviderError::Status { status: 400, .. }), "{err}");
    assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn malformed_responses_are_decode_errors() {
    let (base, _) = serve(Mode::Garbage).await;
    let llm = RemoteLlm::new(config(format!("{base}/chat")));
    assert!(matches!(
        llm.complete(&CompletionRequest::new("s", "u")).await,
        Err(ProviderError::Decode(_))
    ));
    let e = RemoteEmbedder::new(config(format!("{base}/embeddings")));
    assert!(matches!(e.embed_batch(&["x".to_string()]).await, Err(ProviderError::Decode(_))));
}

#[tokio::test]
async fn chat_request_carries_both_messages_at_temperature_zero() {
    let (base, stub) = serve(Mode::Ok).await;
    let llm = RemoteLlm::new(config(format!("{base}/chat")));
    assert_eq!(llm.complete(&CompletionRequest::new("sys", "ping")).await.unwrap(), "pong");
    let (_, body) = stub.last.lock().clone().unwrap();
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "sys"}));
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["temperature"], 0.0);
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/chat", listener.local_addr().unwrap());
    drop(listener);
    let llm = RemoteLlm::new(config(url));
    let err = llm.complete(&CompletionRequest::new("s", "u")).await.unwrap_err();
    assert!(matches!(err, ProviderError::Transport { attempts: 3, .. }), "{err}");
}

#[tokio::test]
async fn hanging_extraction_fails_only_its_rule() {
    let (base, _) = serve(Mode::HangOnCanadian).await;
    let pipeline = Pipeline::new(
        Arc::new(common::registry15()),
        Arc::new(MockEmbedder::default()),
        Arc::new(RemoteLlm::new(config(format!("{base}/chat")))),
        PipelineConfig::default(),
    )
    .unwrap();
    let note = &common::mini_dataset()[0];
    let s = pipeline.analyze(&note.note, &NoteMeta::default()).await.unwrap();
    assert_eq!(s.selected(), ["nexus_cspine", "canadian_cspine"]);
    assert_eq!(s.status, SessionStatus::Error);
    assert_eq!(s.report.per_cdr[0].outcome().unwrap().label, "imaging recommended");
    match &s.report.per_cdr[1].status {
        CdrStatus::Error { stage, message, .. } => {
            assert_eq!(stage, "extraction");
            assert!(message.contains("timed out"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}
