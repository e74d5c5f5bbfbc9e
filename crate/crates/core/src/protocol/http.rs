//! HTTP transport: a reqwest-backed [`Endpoint`] and an axum router that
//! serves any [`Endpoint`] for one role.
//!
//! Errors travel as `{"error": {"code": "...", "message": "..."}}` with a
//! non-2xx status. Timeouts are reported as 504 / `timeout` and exhausted
//! scripts as 409 / `script_exhausted`, so both survive the round trip.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use super::{validate_request_body, BackendRole, CallContext, Endpoint, TransportError};

pub const TRAJECTORY_HEADER: &str = "x-trajectory-id";
pub const CORRELATION_HEADER: &str = "x-correlation-id";

#[derive(Clone, Debug)]
pub struct HttpEndpoint {
    base_url: String,
    client: reqwest::Client,
}

impl HttpEndpoint {
    /// `timeout` bounds the whole request; the role client applies its own timeout as well.
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        Ok(HttpEndpoint {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn url_for(&self, role: BackendRole) -> String {
        format!("{}/v1/{}", self.base_url, role.path())
    }
}

fn envelope(status: StatusCode, code: &str, message: &str) -> Response {
    (status, Json(json!({ "error": { "code": code, "message": message } }))).into_response()
}

#[async_trait]
impl Endpoint for HttpEndpoint {
    fn identity(&self) -> String {
        self.base_url.clone()
    }

    async fn invoke(&self, role: BackendRole, body: Value, ctx: &CallContext) -> Result<Value, TransportError> {
        let resp = self
            .client
            .post(self.url_for(role))
            .header(TRAJECTORY_HEADER, &ctx.trajectory_id)
            .header(CORRELATION_HEADER, ctx.correlation_id.to_string())
            .json(&body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Connection(e.to_string())
                }
            })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connection(e.to_string())
            }
        })?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| TransportError::Malformed(e.to_string()));
        }
        let parsed: Option<Value> = serde_json::from_slice(&bytes).ok();
        let field = |k: &str| parsed.as_ref().and_then(|v| v["error"][k].as_str()).map(str::to_string);
        let code = field("code").unwrap_or_else(|| "http_error".into());
        let message = field("message").unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
        match (status.as_u16(), code.as_str()) {
            (504, "timeout") => Err(TransportError::Timeout),
            (409, "script_exhausted") => Err(TransportError::ScriptExhausted),
            (status, _) => Err(TransportError::Status { status, code, message }),
        }
    }
}

#[derive(Clone)]
struct ServeState {
    role: BackendRole,
    endpoint: Arc<dyn Endpoint>,
}

async fn handle(State(state): State<ServeState>, headers: HeaderMap, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return envelope(StatusCode::BAD_REQUEST, "invalid_json", &e.to_string()),
    };
    if let Err(reason) = validate_request_body(state.role, &value) {
        return envelope(StatusCode::BAD_REQUEST, "invalid_request", &reason);
    }
    let header = |k: &str| headers.get(k).and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    let ctx = CallContext {
        trajectory_id: header(TRAJECTORY_HEADER),
        correlation_id: header(CORRELATION_HEADER).parse().unwrap_or(0),
    };
    tracing::debug!(role = %state.role, trajectory = %ctx.trajectory_id, correlation = ctx.correlation_id, "serving");
    match state.endpoint.invoke(state.role, value, &ctx).await {
        Ok(v) => (StatusCode::OK, Json(v)).into_response(),
        Err(TransportError::Timeout) => envelope(StatusCode::GATEWAY_TIMEOUT, "timeout", "backend timed out"),
        Err(TransportError::ScriptExhausted) => {
            envelope(StatusCode::CONFLICT, "script_exhausted", "no script entry left")
        }
        Err(TransportError::Status { status, code, message }) => envelope(
            StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            &code,
            &message,
        ),
        Err(e) => envelope(StatusCode::INTERNAL_SERVER_ERROR, "internal", &e.to_string()),
    }
}

/// Router serving `endpoint` as `role` at `/v1/<path>`, plus `GET /healthz`.
/// Paths of other roles answer 404.
pub fn router(role: BackendRole, endpoint: Arc<dyn Endpoint>) -> Router {
    let identity = endpoint.identity();
    let state = ServeState { role, endpoint };
    Router::new()
        .route(&format!("/v1/{}", role.path()), post(handle))
        .route(
            "/healthz",
            get(move || async move { Json(json!({ "status": "ok", "role": role.name(), "backend": identity })) }),
        )
        .fallback(|| async { envelope(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}
