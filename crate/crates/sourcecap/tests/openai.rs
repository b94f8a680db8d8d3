use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use sourcecap::llm::{OpenAiClient, OpenAiConfig};
use sourcecap_core::{CallKind, Llm, LlmError, LlmRequest};

#[derive(Default)]
struct Mock {
    replies: Mutex<VecDeque<(u16, Value)>>,
    seen: Mutex<Vec<(Option<String>, Value)>>,
}

async fn completions(State(mock): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    mock.seen.lock().unwrap().push((auth, body));
    let (status, reply) = mock.replies.lock().unwrap().pop_front().unwrap_or((500, json!({"error": "exhausted"})));
    (StatusCode::from_u16(status).unwrap(), Json(reply))
}

/// Serves the scripted replies on an ephemeral port for the life of the test.
fn mock_server(replies: Vec<(u16, Value)>) -> (String, Arc<Mock>) {
    let mock = Arc::new(Mock { replies: Mutex::new(replies.into()), ..Default::default() });
    let state = mock.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(state);
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    (format!("http://{addr}/v1"), mock)
}

fn client(endpoint: &str) -> OpenAiClient {
    let mut cfg = OpenAiConfig::new(endpoint, "test-model", Some("sk-test".into()));
    cfg.initial_backoff = Duration::from_millis(5);
    OpenAiClient::new(cfg).unwrap()
}

fn ok_body(text: &str, usage: Option<(u64, u64)>) -> Value {
    let mut body = json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
    if let Some((p, c)) = usage {
        body["usage"] = json!({"prompt_tokens": p, "completion_tokens": c, "total_tokens": p + c});
    }
    body
}

fn request() -> LlmRequest {
    let mut r = LlmRequest::new(CallKind::Generate, "What is two plus two?".into(), 64);
    r.system = "Be brief.".into();
    r
}

#[test]
fn sends_chat_request_and_reads_usage() {
    let (endpoint, mock) = mock_server(vec![(200, ok_body("four", Some((17, 1))))]);
    let reply = client(&endpoint).complete(&request()).unwrap();
    assert_eq!(reply.text, "four");
    let usage = reply.usage.unwrap();
    assert_eq!((usage.prompt_tokens, usage.completion_tokens), (17, 1));

    let seen = mock.seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "Be brief."}));
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "What is two plus two?"}));
}

#[test]
fn missing_usage_falls_back_to_local_count() {
    let (endpoint, _mock) = mock_server(vec![(200, ok_body("four apples", None))]);
    let usage = client(&endpoint).complete(&request()).unwrap().usage.unwrap();
    assert_eq!(usage.completion_tokens, 2);
    assert!(usage.prompt_tokens > 0);
}

#[test]
fn retries_server_errors_and_rate_limits() {
    let (endpoint, mock) = mock_server(vec![
        (503, json!({"error": "busy"})),
        (429, json!({"error": "slow down"})),
        (200, ok_body("four", None)),
    ]);
    assert_eq!(client(&endpoint).complete(&request()).unwrap().text, "four");
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let (endpoint, mock) = mock_server(vec![]);
    let err = client(&endpoint).complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 500, .. }), "{err:?}");
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, mock) = mock_server(vec![(401, json!({"error": "bad key"})), (200, ok_body("never", None))]);
    let err = client(&endpoint).complete(&request()).unwrap_err();
    match err {
        LlmError::Http { status, body } => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(mock.seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_responses_are_reported() {
    let (endpoint, _mock) = mock_server(vec![(200, json!({"choices": []}))]);
    assert!(matches!(client(&endpoint).complete(&request()), Err(LlmError::Malformed(_))));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = client(&format!("http://{addr}/v1")).complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Transport(_)), "{err:?}");
}
