mod common;

use std::time::Duration;

use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tidepool::caption::{Captioner, SimilarityBackend};
use tidepool::clients::{ClientError, HttpCaptioner, HttpEmbedder, HttpLlm};
use tidepool::instruct::LlmClient;

fn bearer(h: &HeaderMap) -> bool {
    h.get("authorization").and_then(|v| v.to_str().ok()) == Some("Bearer s3cret")
}

fn server() -> String {
    let app = Router::new()
        .route(
            "/v1/caption",
            post(|h: HeaderMap, Json(b): Json<Value>| async move {
                if !bearer(&h) {
                    return Err(StatusCode::UNAUTHORIZED);
                }
                let n = b["n"].as_u64().unwrap() as usize;
                let caps: Vec<String> =
                    (0..n).map(|i| format!("{} caption {i}", b["record_id"].as_str().unwrap())).collect();
                Ok(Json(json!({"captions": caps})))
            }),
        )
        .route(
            "/v1/similarity",
            post(|Json(b): Json<Value>| async move {
                let pairs = b["pairs"].as_array().unwrap();
                let scores: Vec<f64> = pairs.iter().map(|p| if p[0] == p[1] { 1.0 } else { 0.25 }).collect();
                Json(json!({"scores": scores}))
            }),
        )
        .route(
            "/v1/complete",
            post(|Json(b): Json<Value>| async move {
                Json(json!({"completion": format!("echo: {}", b["user"].as_str().unwrap())}))
            }),
        )
        .route("/bad/v1/similarity", post(|| async { Json(json!({"scores": [0.5, 0.5]})) }))
        .route("/down/v1/complete", post(|| async { StatusCode::BAD_GATEWAY }));
    common::spawn_server(app)
}

const T: Duration = Duration::from_secs(5);

#[test]
fn captioner_round_trip() {
    let base = server();
    let c = HttpCaptioner::new(&base, Some("s3cret".into()), T).unwrap();
    let caps = c.sample_captions("r1", "data:image/png;base64,AAAA", 3).unwrap();
    assert_eq!(caps, vec!["r1 caption 0", "r1 caption 1", "r1 caption 2"]);
    let anon = HttpCaptioner::new(&base, None, T).unwrap();
    assert_eq!(anon.sample_captions("r1", "x", 1).unwrap_err(), ClientError::Status(401));
}

#[test]
fn embedder_scores_and_checks_shape() {
    let base = server();
    let e = HttpEmbedder::new(&base, None, T).unwrap();
    assert_eq!(e.similarity("a fish", "a reef").unwrap(), 0.25);
    assert_eq!(e.similarity("same", "same").unwrap(), 1.0);
    let bad = HttpEmbedder::new(&format!("{base}/bad"), None, T).unwrap();
    assert!(matches!(bad.batch(vec![("a".into(), "b".into())]), Err(ClientError::Malformed(_))));
}

#[test]
fn llm_round_trip_and_status_errors() {
    let base = server();
    assert_eq!(HttpLlm::new(&base, None, T).unwrap().complete("sys", "hello").unwrap(), "echo: hello");
    let down = HttpLlm::new(&format!("{base}/down"), None, T).unwrap();
    assert_eq!(down.complete("s", "u").unwrap_err(), ClientError::Status(502));
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let c = HttpLlm::new("http://127.0.0.1:9", None, Duration::from_millis(500)).unwrap();
    assert!(matches!(c.complete("s", "u"), Err(ClientError::Transport(_))));
}
