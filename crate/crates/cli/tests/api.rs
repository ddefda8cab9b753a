//! HTTP contract of the labeling service, exercised in-process.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pbrl::envs::{Action, Cell, Trajectory, Transition};
use pbrl::oracle::{QueryPayload, QueryQueue};
use pbrl_cli::server::{router, AppState, StatusSnapshot};
use serde_json::Value;
use tower::ServiceExt;

fn trajectory(id: u64, action: Action) -> Arc<Trajectory> {
    let c = Cell::new(2, 3);
    Arc::new(Trajectory::new(id, 0, vec![Transition::new(c, action, c, false, 0.0); 4], c))
}

fn app(max_feedback: usize, queries: usize) -> (Router, AppState) {
    let queue = QueryQueue::shared(8, max_feedback);
    for k in 0..queries as u64 {
        queue
            .lock()
            .unwrap()
            .enqueue(trajectory(2 * k, Action::Up), trajectory(2 * k + 1, Action::Left))
            .unwrap();
    }
    let state = AppState {
        queue,
        global_step: Arc::new(AtomicU64::new(1234)),
    };
    (router(state.clone(), None), state)
}

async fn send(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn status(app: &Router) -> StatusSnapshot {
    let (code, body) = send(app, "GET", "/api/status", "").await;
    assert_eq!(code, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn next(app: &Router) -> Option<QueryPayload> {
    let (code, body) = send(app, "GET", "/api/queries/next", "").await;
    match code {
        StatusCode::OK => Some(serde_json::from_slice(&body).unwrap()),
        StatusCode::NO_CONTENT => None,
        other => panic!("unexpected {other}"),
    }
}

fn label_uri(id: u64) -> String {
    format!("/api/queries/{id}/label")
}

#[tokio::test]
async fn empty_queue_returns_no_content() {
    let (app, _) = app(10, 0);
    assert!(next(&app).await.is_none());
    let s = status(&app).await;
    assert_eq!(
        s,
        StatusSnapshot {
            feedback_used: 0,
            max_feedback: 10,
            pending_count: 0,
            global_step: 1234
        }
    );
}

#[tokio::test]
async fn payload_renders_both_trajectories() {
    let (app, _) = app(10, 1);
    let q = next(&app).await.unwrap();
    assert_eq!(q.tau0.cells.len(), 4);
    assert_eq!(q.tau1.cells[0].action, Action::Left);
    assert_eq!((q.tau0.cells[0].x, q.tau0.cells[0].y), (2, 3));

    let (_, body) = send(&app, "GET", "/api/queries/next", "").await;
    let raw: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(raw["status"], "pending");
    assert_eq!(raw["tau0"]["cells"][0]["action"], "up");
}

#[tokio::test]
async fn label_then_relabel_conflicts() {
    let (app, state) = app(10, 2);
    let id = next(&app).await.unwrap().id;
    let (code, body) = send(&app, "POST", &label_uri(id), r#"{"choice":"prefer1"}"#).await;
    assert_eq!(code, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "labeled");

    let s = status(&app).await;
    assert_eq!((s.feedback_used, s.pending_count), (1, 1));
    assert_eq!(state.queue.lock().unwrap().drain_labeled().len(), 1);

    let (code, body) = send(&app, "POST", &label_uri(id), r#"{"choice":"prefer0"}"#).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("already resolved"));
    assert_eq!(status(&app).await.feedback_used, 1);

    // The next pending query is the other one.
    assert_ne!(next(&app).await.unwrap().id, id);
}

#[tokio::test]
async fn skip_consumes_no_budget() {
    let (app, _) = app(10, 1);
    let id = next(&app).await.unwrap().id;
    let (code, _) = send(&app, "POST", &label_uri(id), r#"{"choice":"skip"}"#).await;
    assert_eq!(code, StatusCode::OK);
    let s = status(&app).await;
    assert_eq!((s.feedback_used, s.pending_count), (0, 0));
    assert!(next(&app).await.is_none());
}

#[tokio::test]
async fn exhausted_budget_conflicts() {
    let (app, _) = app(1, 2);
    let first = next(&app).await.unwrap().id;
    assert_eq!(send(&app, "POST", &label_uri(first), r#"{"choice":"prefer0"}"#).await.0, StatusCode::OK);
    let second = next(&app).await.unwrap().id;
    let (code, _) = send(&app, "POST", &label_uri(second), r#"{"choice":"prefer0"}"#).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(status(&app).await.feedback_used, 1);
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let (app, _) = app(10, 1);
    for uri in [label_uri(999), "/api/queries/abc/label".to_owned()] {
        let (code, body) = send(&app, "POST", &uri, r#"{"choice":"prefer0"}"#).await;
        assert_eq!(code, StatusCode::NOT_FOUND, "{uri}");
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn malformed_bodies_are_rejected() {
    let (app, _) = app(10, 1);
    let id = next(&app).await.unwrap().id;
    for body in ["", "not json", r#"{"choice":"both"}"#, r#"{"choice":"prefer0","extra":1}"#, r#"{}"#] {
        let (code, out) = send(&app, "POST", &label_uri(id), body).await;
        assert_eq!(code, StatusCode::BAD_REQUEST, "{body}");
        let v: Value = serde_json::from_slice(&out).unwrap();
        assert!(v["error"].is_string());
    }
    // Rejected bodies leave the query pending.
    assert_eq!(status(&app).await.pending_count, 1);
}

#[tokio::test]
async fn static_bundle_is_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>labels</p>").unwrap();
    let state = AppState {
        queue: QueryQueue::shared(4, 4),
        global_step: Arc::new(AtomicU64::new(0)),
    };
    let app = router(state, Some(dir.path().to_path_buf()));
    let (code, body) = send(&app, "GET", "/index.html", "").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, b"<p>labels</p>");
    assert_eq!(send(&app, "GET", "/api/queries/next", "").await.0, StatusCode::NO_CONTENT);
}
