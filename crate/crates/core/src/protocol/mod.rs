//! Six-role backend wire protocol.
//!
//! Every model role sits behind one JSON endpoint (`POST /v1/<path>`). Request
//! and response bodies are exactly the typed objects below; images travel as
//! [`ImageRef`] digests against a blob store shared by engine and backends.

mod client;
pub mod http;
pub mod mock;

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::trajectory::ImageRef;

pub use client::{
    BackendError, Backends, CallContext, ClientOptions, EditorSelection, Endpoint, RetryPolicy, RoleClient,
    TransportError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Generator,
    Editor,
    Reasoner,
    Scorer,
    DistanceMetric,
    Judge,
}

impl BackendRole {
    pub const ALL: [BackendRole; 6] = [
        BackendRole::Generator,
        BackendRole::Editor,
        BackendRole::Reasoner,
        BackendRole::Scorer,
        BackendRole::DistanceMetric,
        BackendRole::Judge,
    ];

    /// Final path segment of the role's endpoint.
    pub fn path(self) -> &'static str {
        match self {
            BackendRole::Generator => "generate",
            BackendRole::Editor => "edit",
            BackendRole::Reasoner => "reason",
            BackendRole::Scorer => "score",
            BackendRole::DistanceMetric => "distance",
            BackendRole::Judge => "judge",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendRole::Generator => "generator",
            BackendRole::Editor => "editor",
            BackendRole::Reasoner => "reasoner",
            BackendRole::Scorer => "scorer",
            BackendRole::DistanceMetric => "distance_metric",
            BackendRole::Judge => "judge",
        }
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackendRole::ALL
            .into_iter()
            .find(|r| r.name() == s || r.path() == s)
            .ok_or_else(|| format!("unknown backend role {s:?}"))
    }
}

/// A typed request bound to its role and response type.
pub trait WireRequest: Serialize + DeserializeOwned + Clone + Send + Sync + 'static {
    const ROLE: BackendRole;
    type Response: Serialize + DeserializeOwned + Clone + Send + 'static;

    /// Schema-level checks run before dispatch.
    fn validate(&self) -> Result<(), String>;

    /// Checks a decoded response against this request.
    fn check_response(&self, _response: &Self::Response) -> Result<(), String> {
        Ok(())
    }
}

fn non_blank(field: &str, value: &str) -> Result<(), String> {
    if value.trim().is_empty() {
        Err(format!("{field} must not be empty"))
    } else {
        Ok(())
    }
}

fn finite_opt(field: &str, value: Option<f64>) -> Result<(), String> {
    match value {
        Some(v) if !v.is_finite() => Err(format!("{field} must be finite")),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_i: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_ref: ImageRef,
    /// Inline image bytes for adapters that do not share the blob store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

impl WireRequest for GenerateRequest {
    const ROLE: BackendRole = BackendRole::Generator;
    type Response = GenerateResponse;

    fn validate(&self) -> Result<(), String> {
        non_blank("prompt", &self.prompt)?;
        if self.width == 0 || self.height == 0 {
            return Err("width and height must be positive".into());
        }
        finite_opt("s_t", self.s_t)?;
        finite_opt("s_i", self.s_i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub image_ref: ImageRef,
    pub instruction: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub image_ref: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

impl WireRequest for EditRequest {
    const ROLE: BackendRole = BackendRole::Editor;
    type Response = EditResponse;

    fn validate(&self) -> Result<(), String> {
        non_blank("instruction", &self.instruction)?;
        finite_opt("s_t", self.s_t)?;
        finite_opt("s_i", self.s_i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonRequest {
    pub rendered_prompt: String,
    pub image_refs: Vec<ImageRef>,
    pub suppress_termination: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_continuation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonResponse {
    pub raw_text: String,
    pub terminated: bool,
}

impl WireRequest for ReasonRequest {
    const ROLE: BackendRole = BackendRole::Reasoner;
    type Response = ReasonResponse;

    fn validate(&self) -> Result<(), String> {
        non_blank("rendered_prompt", &self.rendered_prompt)?;
        if self.forced_continuation.is_some() && !self.suppress_termination {
            return Err("forced_continuation requires suppress_termination".into());
        }
        Ok(())
    }

    fn check_response(&self, response: &ReasonResponse) -> Result<(), String> {
        if self.suppress_termination && response.terminated {
            return Err("backend terminated although termination was suppressed".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub image_ref: ImageRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

impl WireRequest for ScoreRequest {
    const ROLE: BackendRole = BackendRole::Scorer;
    type Response = ScoreResponse;

    fn validate(&self) -> Result<(), String> {
        non_blank("prompt", &self.prompt)
    }

    fn check_response(&self, response: &ScoreResponse) -> Result<(), String> {
        if response.score.is_finite() {
            Ok(())
        } else {
            Err("score must be finite".into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRequest {
    pub image_ref_a: ImageRef,
    pub image_ref_b: ImageRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceResponse {
    pub distance: f64,
}

impl WireRequest for DistanceRequest {
    const ROLE: BackendRole = BackendRole::DistanceMetric;
    type Response = DistanceResponse;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }

    fn check_response(&self, response: &DistanceResponse) -> Result<(), String> {
        if response.distance.is_finite() && response.distance >= 0.0 {
            Ok(())
        } else {
            Err("distance must be finite and non-negative".into())
        }
    }
}

/// What a judge call asks for. Relevance is the default and the only task
/// that appears on the wire without an explicit `task` field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTask {
    #[default]
    Relevance,
    AuthorPrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub original_prompt: String,
    pub edit_instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<JudgeTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub relevant: bool,
    pub rationale: String,
    /// Authored text for [`JudgeTask::AuthorPrompt`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl WireRequest for JudgeRequest {
    const ROLE: BackendRole = BackendRole::Judge;
    type Response = JudgeResponse;

    fn validate(&self) -> Result<(), String> {
        non_blank("original_prompt", &self.original_prompt)?;
        if self.task.unwrap_or_default() == JudgeTask::Relevance {
            non_blank("edit_instruction", &self.edit_instruction)?;
        }
        Ok(())
    }

    fn check_response(&self, response: &JudgeResponse) -> Result<(), String> {
        if self.task == Some(JudgeTask::AuthorPrompt) && response.text.as_deref().is_none_or(|t| t.trim().is_empty()) {
            return Err("prompt authoring response carries no text".into());
        }
        Ok(())
    }
}

/// Decodes a request body for `role` and runs its schema checks. Used by servers.
pub fn validate_request_body(role: BackendRole, body: &serde_json::Value) -> Result<(), String> {
    fn check<R: WireRequest>(body: &serde_json::Value) -> Result<(), String> {
        let req: R = serde_json::from_value(body.clone()).map_err(|e| e.to_string())?;
        req.validate()
    }
    match role {
        BackendRole::Generator => check::<GenerateRequest>(body),
        BackendRole::Editor => check::<EditRequest>(body),
        BackendRole::Reasoner => check::<ReasonRequest>(body),
        BackendRole::Scorer => check::<ScoreRequest>(body),
        BackendRole::DistanceMetric => check::<DistanceRequest>(body),
        BackendRole::Judge => check::<JudgeRequest>(body),
    }
}
