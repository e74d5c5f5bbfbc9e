//! Protocol fixture checks shared by the protocol tests and the acceptance runner.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use cotscale::protocol::http::{router, HttpEndpoint};
use cotscale::protocol::mock::{Script, ScriptEntry, ScriptedMock};
use cotscale::protocol::{
    validate_request_body, BackendError, BackendRole, ClientOptions, DistanceRequest, EditRequest, Endpoint,
    GenerateRequest, JudgeRequest, ReasonRequest, RoleClient, ScoreRequest, WireRequest,
};
use serde_json::Value;

use super::*;

pub fn fixture_dir(kind: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/protocol")
        .join(kind)
}

pub fn load(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn fixtures(kind: &str) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = std::fs::read_dir(fixture_dir(kind))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), load(&p)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn class(e: &BackendError) -> &'static str {
    match e {
        BackendError::RoleNotConfigured(_) => "RoleNotConfigured",
        BackendError::InvalidRequest { .. } => "InvalidRequest",
        BackendError::Timeout { .. } => "Timeout",
        BackendError::ProtocolViolation { .. } => "ProtocolViolation",
        BackendError::Backend { .. } => "Backend",
        BackendError::ScriptExhausted { .. } => "ScriptExhausted",
        BackendError::RetriesExhausted { .. } => "RetriesExhausted",
        BackendError::Blob(_) => "Blob",
    }
}

pub fn round_trip<T: serde::Serialize + serde::de::DeserializeOwned>(value: &Value) -> Value {
    let typed: T = serde_json::from_value(value.clone()).unwrap();
    serde_json::to_value(&typed).unwrap()
}

/// Decodes and re-encodes a fixture through its wire type.
pub fn round_trip_named(name: &str, value: &Value) -> Value {
    let role: BackendRole = name.split('.').next().unwrap().parse().unwrap();
    let request = name.split('.').nth(1) == Some("request");
    macro_rules! pick {
        ($t:ty) => {
            if request {
                let typed: $t = serde_json::from_value(value.clone()).unwrap();
                typed.validate().unwrap();
                round_trip::<$t>(value)
            } else {
                round_trip::<<$t as WireRequest>::Response>(value)
            }
        };
    }
    match role {
        BackendRole::Generator => pick!(GenerateRequest),
        BackendRole::Editor => pick!(EditRequest),
        BackendRole::Reasoner => pick!(ReasonRequest),
        BackendRole::Scorer => pick!(ScoreRequest),
        BackendRole::DistanceMetric => pick!(DistanceRequest),
        BackendRole::Judge => pick!(JudgeRequest),
    }
}

/// Sends a raw request body through a typed client and returns the raw response.
pub async fn call_raw(client: &RoleClient, request: &Value) -> Result<Value, BackendError> {
    async fn go<R: WireRequest>(client: &RoleClient, request: &Value) -> Result<Value, BackendError> {
        let typed: R = serde_json::from_value(request.clone()).map_err(|e| BackendError::InvalidRequest {
            role: R::ROLE,
            reason: e.to_string(),
        })?;
        Ok(serde_json::to_value(client.call(&typed, "fixture").await?).unwrap())
    }
    match client.role() {
        BackendRole::Generator => go::<GenerateRequest>(client, request).await,
        BackendRole::Editor => go::<EditRequest>(client, request).await,
        BackendRole::Reasoner => go::<ReasonRequest>(client, request).await,
        BackendRole::Scorer => go::<ScoreRequest>(client, request).await,
        BackendRole::DistanceMetric => go::<DistanceRequest>(client, request).await,
        BackendRole::Judge => go::<JudgeRequest>(client, request).await,
    }
}

pub async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

pub fn http_client(role: BackendRole, base: &str, options: ClientOptions) -> RoleClient {
    let endpoint: Arc<dyn Endpoint> = Arc::new(HttpEndpoint::new(base, Duration::from_secs(5)).unwrap());
    RoleClient::new(role, endpoint, options)
}

/// Every valid fixture decodes, validates and re-encodes unchanged.
pub fn check_valid_round_trip() {
    let all = fixtures("valid");
    assert_eq!(all.len(), 18);
    for (name, value) in &all {
        assert_eq!(&round_trip_named(name, value), value, "{name}");
    }
}

/// Each valid request, served by a mock replying with its paired response,
/// comes back intact over HTTP.
pub async fn check_valid_over_http() {
    let all = fixtures("valid");
    for (name, request) in all.iter().filter(|(n, _)| n.contains(".request")) {
        let role: BackendRole = name.split('.').next().unwrap().parse().unwrap();
        let response_name = name.replacen(".request", ".response", 1).replace(".minimal", "");
        let response = &all
            .iter()
            .find(|(n, _)| *n == response_name)
            .unwrap_or_else(|| panic!("{response_name}"))
            .1;
        let dir = tempfile::tempdir().unwrap();
        let script = Script::new().push(role, ScriptEntry::reply(response.clone()));
        let mock: Arc<dyn Endpoint> = Arc::new(ScriptedMock::new(script, store(dir.path())));
        let base = serve(router(role, mock)).await;
        let got = call_raw(&http_client(role, &base, fast()), request).await.unwrap();
        assert_eq!(&got, response, "{name}");
    }
}

/// Each malformed fixture fails with the error class it names.
pub async fn check_malformed() {
    let all = fixtures("malformed");
    assert_eq!(all.len(), 16);
    for (name, case) in &all {
        let role: BackendRole = case["role"].as_str().unwrap().parse().unwrap();
        let expected = case["error"].as_str().unwrap();
        let body = case["body"].clone();
        if case["side"] == "request" {
            assert!(validate_request_body(role, &body).is_err(), "{name}");
            let dir = tempfile::tempdir().unwrap();
            let mock: Arc<dyn Endpoint> = Arc::new(ScriptedMock::new(Script::new(), store(dir.path())));
            let client = RoleClient::new(role, mock, fast());
            let err = call_raw(&client, &body).await.unwrap_err();
            assert_eq!(class(&err), expected, "{name}: {err}");

            // A server rejects the raw body the same way.
            let dir = tempfile::tempdir().unwrap();
            let mock: Arc<dyn Endpoint> = Arc::new(ScriptedMock::new(Script::new(), store(dir.path())));
            let base = serve(router(role, mock)).await;
            let resp = reqwest::Client::new()
                .post(format!("{base}/v1/{}", role.path()))
                .json(&body)
                .send()
                .await
                .unwrap();
            assert_eq!(resp.status(), 400, "{name}");
            let envelope: Value = resp.json().await.unwrap();
            assert_eq!(envelope["error"]["code"], "invalid_request", "{name}");
        } else {
            let status = StatusCode::from_u16(case["status"].as_u64().unwrap_or(200) as u16).unwrap();
            let app = Router::new().route(
                &format!("/v1/{}", role.path()),
                post(move || {
                    let body = body.clone();
                    async move { (status, Json(body)) }
                }),
            );
            let base = serve(app).await;
            let err = call_raw(&http_client(role, &base, fast()), &case["request"])
                .await
                .unwrap_err();
            assert_eq!(class(&err), expected, "{name}: {err}");
        }
    }
}
