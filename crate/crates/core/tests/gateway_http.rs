use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use faithpref_core::gateway::{BackendConfig, ChatRequest, Gateway, GatewayError};
use faithpref_core::GenerationParams;
use serde_json::{json, Value};

#[derive(Clone)]
struct Server {
    calls: Arc<AtomicUsize>,
    /// Status codes returned before the first success.
    failures: Arc<Vec<u16>>,
    bodies: Arc<std::sync::Mutex<Vec<Value>>>,
}

async fn handler(State(s): State<Server>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let call = s.calls.fetch_add(1, Ordering::SeqCst);
    s.bodies.lock().unwrap().push(body);
    if let Some(code) = s.failures.get(call) {
        return (
            StatusCode::from_u16(*code).unwrap(),
            Json(json!({"error": "try later"})),
        );
    }
    (
        StatusCode::OK,
        Json(json!({
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": " Yes"},
                "logprobs": {"content": [{
                    "token": "Yes",
                    "logprob": -0.1,
                    "top_logprobs": [
                        {"token": "Yes", "logprob": -0.1},
                        {"token": " yes", "logprob": -3.0},
                        {"token": "No", "logprob": -2.5}
                    ]
                }]}
            }]
        })),
    )
}

async fn serve(failures: Vec<u16>) -> (String, Server) {
    let state = Server {
        calls: Arc::new(AtomicUsize::new(0)),
        failures: Arc::new(failures),
        bodies: Arc::default(),
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(handler))
        .with_state(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), state)
}

fn gateway(url: &str, max_retries: u32) -> Gateway {
    let config = BackendConfig {
        max_retries,
        retry_base_s: 0.01,
        ..BackendConfig::openai(url, "toy-model")
    };
    Gateway::from_config(&config).unwrap()
}

fn verdict_request() -> ChatRequest {
    ChatRequest::new(
        "critique/d/0",
        "Is it hallucinated?",
        GenerationParams::greedy(1),
    )
    .with_logprobs(20)
}

#[tokio::test]
async fn retries_server_errors_then_succeeds() {
    let (url, server) = serve(vec![500, 500]).await;
    let gw = gateway(&url, 2);
    let (yes, no) = gw.yes_no_logprobs(&verdict_request()).await.unwrap();
    assert_eq!((yes, no), (-0.1, -2.5));
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn gives_up_after_max_retries() {
    let (url, server) = serve(vec![503, 503, 503]).await;
    let gw = gateway(&url, 2);
    let err = gw.complete(&verdict_request()).await.unwrap_err();
    assert!(err.is_transport(), "{err}");
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let (url, server) = serve(vec![400]).await;
    let gw = gateway(&url, 3);
    let err = gw.complete(&verdict_request()).await.unwrap_err();
    assert!(matches!(err, GatewayError::BadResponse(_)), "{err}");
    assert_eq!(server.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn wire_request_carries_decoding_parameters() {
    let (url, server) = serve(vec![]).await;
    let gw = gateway(&url, 0);
    let params = GenerationParams {
        seed: Some(42),
        ..GenerationParams::default()
    };
    let completion = gw
        .complete(&ChatRequest::new("summ/d/0", "Summarize.", params))
        .await
        .unwrap();
    assert_eq!(completion.choices[0].text, " Yes");
    let body = server.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "toy-model");
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["top_p"], 0.95);
    assert_eq!(body["max_tokens"], 160);
    assert_eq!(body["seed"], 42);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Summarize.");
}

#[tokio::test]
async fn unreachable_host_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = gateway(&url, 1)
        .complete(&verdict_request())
        .await
        .unwrap_err();
    assert!(err.is_transport(), "{err}");
}
