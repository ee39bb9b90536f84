//! HTTP API over the feedback queue, consumed by the annotation console.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use fsmqa_core::feedback::{FeedbackStore, QueueStatus, StoreError, Verdict};
use fsmqa_core::jsonl;

/// Header carrying the shared token when the service is started with one.
pub const TOKEN_HEADER: &str = "x-api-token";

const DEFAULT_LIMIT: usize = 50;
const MAX_LIMIT: usize = 500;

#[derive(Clone)]
struct AppState {
    store: Arc<FeedbackStore>,
    token: Option<Arc<str>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::NotFound(_) | StoreError::StepNotFound { .. } => {
                Self::new(StatusCode::NOT_FOUND, message)
            }
            StoreError::ToolStep { .. } | StoreError::Invalid(_) => {
                Self::new(StatusCode::BAD_REQUEST, message)
            }
            StoreError::Finalized(_) => Self::new(StatusCode::CONFLICT, message),
            StoreError::Pending { pending, .. } => Self {
                status: StatusCode::CONFLICT,
                body: json!({ "error": message, "pending": pending }),
            },
            StoreError::Io(_) | StoreError::Log(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a store call off the async workers; writes fsync before returning.
async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&FeedbackStore) -> Result<T, StoreError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(store: Arc<FeedbackStore>, token: Option<String>) -> Router {
    let state = AppState {
        store,
        token: token.map(Into::into),
    };
    Router::new()
        .route("/api/trajectories", get(list))
        .route("/api/trajectories/{id}", get(detail))
        .route("/api/trajectories/{id}/steps/{k}/feedback", post(feedback))
        .route("/api/trajectories/{id}/finalize", post(finalize))
        .route("/api/trajectories/{id}/skip", post(skip))
        .route("/api/export", get(export))
        .route("/api/audit", get(audit))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn require_token(
    State(state): State<AppState>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(want) = &state.token {
        let got = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if got != Some(want.as_ref()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong api token")
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<QueueStatus>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list(
    State(state): State<AppState>,
    q: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let status = q.status;
    let all = blocking(&state, move |s| {
        s.refresh()?;
        Ok(s.list(status))
    })
    .await?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT).clamp(1, MAX_LIMIT);
    let items: Vec<_> = all.iter().skip(offset).take(limit).collect();
    Ok(Json(json!({
        "total": all.len(),
        "offset": offset,
        "limit": limit,
        "items": items,
    })))
}

async fn detail(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = blocking(&state, move |s| s.get(&id)).await?;
    let mut body = serde_json::to_value(&entry).expect("serializable");
    body["trajectory_id"] = json!(entry.trajectory.trajectory_id);
    body["pending"] = json!(entry.pending_steps());
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
struct FeedbackBody {
    verdict: Verdict,
    #[serde(default)]
    refinement: Option<String>,
}

async fn feedback(
    State(state): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let (fb, pending) = blocking(&state, move |s| {
        let fb = s.submit(&id, k, body.verdict, body.refinement.as_deref())?;
        Ok((fb, s.get(&id)?.pending_steps()))
    })
    .await?;
    Ok(Json(
        json!({ "step": k, "feedback": fb, "pending": pending }),
    ))
}

async fn finalize(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = blocking(&state, move |s| {
        s.finalize(&id)?;
        s.get(&id)
    })
    .await?;
    Ok(Json(json!({
        "trajectory_id": entry.trajectory.trajectory_id,
        "status": entry.status,
        "labeled_steps": entry.labels().map_or(0, |l| l.len()),
    })))
}

async fn skip(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = blocking(&state, move |s| {
        s.skip(&id)?;
        s.get(&id)
    })
    .await?;
    Ok(Json(
        json!({ "trajectory_id": entry.trajectory.trajectory_id, "status": entry.status }),
    ))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    iteration: Option<usize>,
}

async fn export(
    State(state): State<AppState>,
    q: Result<Query<ExportQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let labels = blocking(&state, move |s| {
        s.refresh()?;
        Ok(s.export(q.iteration))
    })
    .await?;
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        jsonl::to_string(&labels),
    )
        .into_response())
}

async fn audit(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let entries = blocking(&state, |s| {
        s.refresh()?;
        Ok(s.audit())
    })
    .await?;
    Ok(Json(json!({ "items": entries })))
}
