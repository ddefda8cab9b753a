//! JSON API for the labeling UI. Handlers only touch the shared query queue
//! and the trainer's published step counter.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pbrl::oracle::{LabelChoice, QueueError, SharedQueue};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

#[derive(Clone)]
pub struct AppState {
    pub queue: SharedQueue,
    pub global_step: Arc<AtomicU64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    choice: LabelChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub feedback_used: usize,
    pub max_feedback: usize,
    pub pending_count: usize,
    pub global_step: u64,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn next_query(State(state): State<AppState>) -> Response {
    let queue = state.queue.lock().expect("queue lock");
    match queue.next_pending() {
        Some(record) => Json(record.payload()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn label_query(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::NOT_FOUND, format!("unknown query id {id}"));
    };
    let body: LabelBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => {
            return error(
                StatusCode::BAD_REQUEST,
                format!("expected {{\"choice\": \"prefer0\" | \"prefer1\" | \"skip\"}}: {e}"),
            )
        }
    };
    let mut queue = state.queue.lock().expect("queue lock");
    match queue.submit_label(id, body.choice) {
        Ok(_) => {
            let status = queue.get(id).map(|r| r.status);
            Json(json!({ "id": id, "status": status })).into_response()
        }
        Err(e @ QueueError::UnknownId(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ (QueueError::AlreadyResolved(_) | QueueError::BudgetExhausted(_))) => {
            error(StatusCode::CONFLICT, e.to_string())
        }
        Err(e @ QueueError::Full(_)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn status_snapshot(state: &AppState) -> StatusSnapshot {
    let queue = state.queue.lock().expect("queue lock");
    StatusSnapshot {
        feedback_used: queue.feedback_used(),
        max_feedback: queue.max_feedback(),
        pending_count: queue.pending_count(),
        global_step: state.global_step.load(Ordering::Relaxed),
    }
}

async fn status(State(state): State<AppState>) -> Json<StatusSnapshot> {
    Json(status_snapshot(&state))
}

/// The API routes, plus the UI bundle from `static_dir` at `/` if given.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queries/next", get(next_query))
        .route("/api/queries/{id}/label", post(label_query))
        .route("/api/status", get(status))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
