use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;

use super::{
    BackendRole, DistanceRequest, EditRequest, EditResponse, GenerateRequest, GenerateResponse, JudgeRequest,
    JudgeResponse, ReasonRequest, ReasonResponse, ScoreRequest, ScoreResponse, WireRequest,
};
use crate::blob_store::{sha256_hex, BlobStore};
use crate::trajectory::ImageRef;

/// Failure reported by an [`Endpoint`] before any decoding happens.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("backend returned {status} {code}: {message}")]
    Status { status: u16, code: String, message: String },
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("malformed response body: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("no backend configured for role {0}")]
    RoleNotConfigured(BackendRole),
    #[error("invalid {role} request: {reason}")]
    InvalidRequest { role: BackendRole, reason: String },
    #[error("{role} call timed out")]
    Timeout { role: BackendRole },
    #[error("{role} response violates the protocol: {reason}")]
    ProtocolViolation { role: BackendRole, reason: String },
    #[error("{role} backend error {status} {code}: {message}")]
    Backend {
        role: BackendRole,
        status: u16,
        code: String,
        message: String,
    },
    #[error("{role} script exhausted")]
    ScriptExhausted { role: BackendRole },
    #[error("{role} failed after {attempts} attempts: {last}")]
    RetriesExhausted {
        role: BackendRole,
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("blob store: {0}")]
    Blob(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Timeout { .. } => true,
            BackendError::Backend { status, .. } => *status >= 500,
            _ => false,
        }
    }

    pub fn role(&self) -> Option<BackendRole> {
        match self {
            BackendError::RoleNotConfigured(role)
            | BackendError::InvalidRequest { role, .. }
            | BackendError::Timeout { role }
            | BackendError::ProtocolViolation { role, .. }
            | BackendError::Backend { role, .. }
            | BackendError::ScriptExhausted { role }
            | BackendError::RetriesExhausted { role, .. } => Some(*role),
            BackendError::Blob(_) => None,
        }
    }

    fn from_transport(role: BackendRole, e: TransportError) -> Self {
        match e {
            TransportError::Timeout => BackendError::Timeout { role },
            TransportError::Status { status, code, message } => BackendError::Backend {
                role,
                status,
                code,
                message,
            },
            TransportError::ScriptExhausted => BackendError::ScriptExhausted { role },
            // Unreachable backends are treated like a 503 so they get retried.
            TransportError::Connection(message) => BackendError::Backend {
                role,
                status: 503,
                code: "unavailable".into(),
                message,
            },
            TransportError::Malformed(reason) => BackendError::ProtocolViolation { role, reason },
        }
    }
}

/// Request metadata carried alongside every call for tracing.
#[derive(Clone, Debug, Default)]
pub struct CallContext {
    pub trajectory_id: String,
    pub correlation_id: u64,
}

/// One backend transport: in-process mock, HTTP client, ...
#[async_trait]
pub trait Endpoint: Send + Sync {
    /// Stable identity recorded in trajectory provenance.
    fn identity(&self) -> String;

    async fn invoke(&self, role: BackendRole, body: Value, ctx: &CallContext) -> Result<Value, TransportError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(50),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientOptions {
    pub timeout: Duration,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            timeout: Duration::from_secs(60),
            max_concurrency: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Role-bound handle: validation, concurrency limit, timeout and retry around an endpoint.
#[derive(Clone)]
pub struct RoleClient {
    role: BackendRole,
    endpoint: Arc<dyn Endpoint>,
    limiter: Arc<Semaphore>,
    options: ClientOptions,
    next_correlation: Arc<AtomicU64>,
}

impl std::fmt::Debug for RoleClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoleClient")
            .field("role", &self.role)
            .field("endpoint", &self.endpoint.identity())
            .field("options", &self.options)
            .finish()
    }
}

impl RoleClient {
    pub fn new(role: BackendRole, endpoint: Arc<dyn Endpoint>, options: ClientOptions) -> Self {
        RoleClient {
            role,
            endpoint,
            limiter: Arc::new(Semaphore::new(options.max_concurrency.max(1))),
            options,
            next_correlation: Arc::new(AtomicU64::new(1)),
        }
    }

    pub fn role(&self) -> BackendRole {
        self.role
    }

    pub fn identity(&self) -> String {
        self.endpoint.identity()
    }

    pub async fn call<R: WireRequest>(&self, request: &R, trajectory_id: &str) -> Result<R::Response, BackendError> {
        let role = R::ROLE;
        if role != self.role {
            return Err(BackendError::InvalidRequest {
                role,
                reason: format!("client is bound to role {}", self.role),
            });
        }
        request
            .validate()
            .map_err(|reason| BackendError::InvalidRequest { role, reason })?;
        let body = serde_json::to_value(request).map_err(|e| BackendError::InvalidRequest {
            role,
            reason: e.to_string(),
        })?;

        let attempts = self.options.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                tokio::time::sleep(self.options.retry.delay_before(attempt - 1)).await;
            }
            let ctx = CallContext {
                trajectory_id: trajectory_id.to_string(),
                correlation_id: self.next_correlation.fetch_add(1, Ordering::Relaxed),
            };
            match self.attempt::<R>(request, body.clone(), &ctx).await {
                Ok(resp) => return Ok(resp),
                Err(e) if e.retryable() => {
                    tracing::warn!(%role, attempt, trajectory = trajectory_id, error = %e, "retrying backend call");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        let last = last.expect("at least one attempt ran");
        if attempts == 1 {
            return Err(last);
        }
        Err(BackendError::RetriesExhausted {
            role,
            attempts,
            last: Box::new(last),
        })
    }

    async fn attempt<R: WireRequest>(
        &self,
        request: &R,
        body: Value,
        ctx: &CallContext,
    ) -> Result<R::Response, BackendError> {
        let role = R::ROLE;
        let _permit = self.limiter.acquire().await.expect("semaphore is never closed");
        tracing::debug!(%role, trajectory = %ctx.trajectory_id, correlation = ctx.correlation_id, "backend call");
        let reply = tokio::time::timeout(self.options.timeout, self.endpoint.invoke(role, body, ctx))
            .await
            .map_err(|_| BackendError::Timeout { role })?
            .map_err(|e| BackendError::from_transport(role, e))?;
        let response: R::Response = serde_json::from_value(reply).map_err(|e| BackendError::ProtocolViolation {
            role,
            reason: e.to_string(),
        })?;
        request
            .check_response(&response)
            .map_err(|reason| BackendError::ProtocolViolation { role, reason })?;
        Ok(response)
    }
}

/// How an edit call picks among several configured editors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorSelection {
    #[default]
    Fixed,
    RoundRobin,
}

/// The configured role clients plus the shared blob store.
#[derive(Clone)]
pub struct Backends {
    store: Arc<BlobStore>,
    clients: BTreeMap<BackendRole, Vec<RoleClient>>,
    evaluator: Option<RoleClient>,
    editor_selection: EditorSelection,
    next_editor: Arc<AtomicUsize>,
}

impl Backends {
    pub fn new(store: Arc<BlobStore>) -> Self {
        Backends {
            store,
            clients: BTreeMap::new(),
            evaluator: None,
            editor_selection: EditorSelection::Fixed,
            next_editor: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Adds an endpoint for `role`. Several editors may be registered.
    pub fn with(mut self, role: BackendRole, endpoint: Arc<dyn Endpoint>, options: ClientOptions) -> Self {
        self.clients
            .entry(role)
            .or_default()
            .push(RoleClient::new(role, endpoint, options));
        self
    }

    /// Registers the same endpoint for every role.
    pub fn with_all(mut self, endpoint: Arc<dyn Endpoint>, options: ClientOptions) -> Self {
        for role in BackendRole::ALL {
            self = self.with(role, endpoint.clone(), options);
        }
        self
    }

    /// A scorer used only for evaluation, kept apart from the engine's own scorer.
    pub fn with_evaluator(mut self, endpoint: Arc<dyn Endpoint>, options: ClientOptions) -> Self {
        self.evaluator = Some(RoleClient::new(BackendRole::Scorer, endpoint, options));
        self
    }

    pub fn with_editor_selection(mut self, selection: EditorSelection) -> Self {
        self.editor_selection = selection;
        self
    }

    pub fn store(&self) -> &Arc<BlobStore> {
        &self.store
    }

    pub fn has(&self, role: BackendRole) -> bool {
        self.clients.get(&role).is_some_and(|c| !c.is_empty())
    }

    pub fn require(&self, roles: &[BackendRole]) -> Result<(), BackendError> {
        match roles.iter().find(|r| !self.has(**r)) {
            Some(r) => Err(BackendError::RoleNotConfigured(*r)),
            None => Ok(()),
        }
    }

    pub fn client(&self, role: BackendRole) -> Result<&RoleClient, BackendError> {
        self.clients
            .get(&role)
            .and_then(|c| c.first())
            .ok_or(BackendError::RoleNotConfigured(role))
    }

    /// The evaluation scorer, falling back to the engine scorer.
    pub fn evaluator(&self) -> Result<&RoleClient, BackendError> {
        match &self.evaluator {
            Some(c) => Ok(c),
            None => self.client(BackendRole::Scorer),
        }
    }

    fn editor(&self) -> Result<&RoleClient, BackendError> {
        let editors = self
            .clients
            .get(&BackendRole::Editor)
            .filter(|c| !c.is_empty())
            .ok_or(BackendError::RoleNotConfigured(BackendRole::Editor))?;
        let k = match self.editor_selection {
            EditorSelection::Fixed => 0,
            EditorSelection::RoundRobin => self.next_editor.fetch_add(1, Ordering::Relaxed) % editors.len(),
        };
        Ok(&editors[k])
    }

    /// Role name to endpoint identity, for provenance.
    pub fn identities(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (role, clients) in &self.clients {
            let ids: Vec<String> = clients.iter().map(RoleClient::identity).collect();
            out.insert(role.name().to_string(), ids.join(","));
        }
        if let Some(e) = &self.evaluator {
            out.insert("evaluator".into(), e.identity());
        }
        out
    }

    /// Stores inline bytes if present and checks the referenced blob exists.
    fn settle_image(&self, role: BackendRole, image: &ImageRef, inline: Option<&str>) -> Result<(), BackendError> {
        if let Some(b64) = inline {
            let bytes =
                base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| BackendError::ProtocolViolation {
                        role,
                        reason: format!("image_b64: {e}"),
                    })?;
            let actual = sha256_hex(&bytes);
            if actual != image.digest {
                return Err(BackendError::ProtocolViolation {
                    role,
                    reason: format!("inline image hashes to {actual}, not {}", image.digest),
                });
            }
            self.store
                .put(&bytes, &image.media_type)
                .map_err(|e| BackendError::Blob(e.to_string()))?;
        }
        if !self.store.contains(image) {
            return Err(BackendError::ProtocolViolation {
                role,
                reason: format!("image {} is not in the blob store", image.digest),
            });
        }
        Ok(())
    }

    pub async fn generate(
        &self,
        request: &GenerateRequest,
        trajectory_id: &str,
    ) -> Result<GenerateResponse, BackendError> {
        let resp = self
            .client(BackendRole::Generator)?
            .call(request, trajectory_id)
            .await?;
        self.settle_image(BackendRole::Generator, &resp.image_ref, resp.image_b64.as_deref())?;
        Ok(resp)
    }

    pub async fn edit(&self, request: &EditRequest, trajectory_id: &str) -> Result<EditResponse, BackendError> {
        let resp = self.editor()?.call(request, trajectory_id).await?;
        self.settle_image(BackendRole::Editor, &resp.image_ref, resp.image_b64.as_deref())?;
        Ok(resp)
    }

    pub async fn reason(&self, request: &ReasonRequest, trajectory_id: &str) -> Result<ReasonResponse, BackendError> {
        self.client(BackendRole::Reasoner)?.call(request, trajectory_id).await
    }

    pub async fn score(&self, request: &ScoreRequest, trajectory_id: &str) -> Result<ScoreResponse, BackendError> {
        self.client(BackendRole::Scorer)?.call(request, trajectory_id).await
    }

    pub async fn evaluate(&self, request: &ScoreRequest, trajectory_id: &str) -> Result<ScoreResponse, BackendError> {
        self.evaluator()?.call(request, trajectory_id).await
    }

    pub async fn distance(&self, a: &ImageRef, b: &ImageRef, trajectory_id: &str) -> Result<f64, BackendError> {
        let request = DistanceRequest {
            image_ref_a: a.clone(),
            image_ref_b: b.clone(),
        };
        Ok(self
            .client(BackendRole::DistanceMetric)?
            .call(&request, trajectory_id)
            .await?
            .distance)
    }

    pub async fn judge(&self, request: &JudgeRequest, trajectory_id: &str) -> Result<JudgeResponse, BackendError> {
        self.client(BackendRole::Judge)?.call(request, trajectory_id).await
    }
}
