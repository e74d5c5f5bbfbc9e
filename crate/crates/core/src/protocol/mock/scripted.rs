//! Replays a recorded script of replies per role.
//!
//! A script is a JSON object mapping role names to entry lists:
//!
//! ```json
//! {
//!   "reasoner": [
//!     {"reply": {"raw_text": "ACTION: SATISFIED_COMPLETE", "terminated": true}},
//!     {"match": {"suppress_termination": true}, "reply": {"raw_text": "...", "terminated": false}},
//!     {"error": {"status": 503, "code": "busy"}},
//!     {"timeout": true}
//!   ]
//! }
//! ```
//!
//! Each call consumes the first unconsumed entry whose `match` pattern (a
//! subset of the request body) fits. `sticky` entries are never consumed.
//! Pattern objects may use `{"$contains": "text"}` on strings and
//! `{"$len": n}` on arrays or strings. Generator and editor calls for roles
//! without entries synthesize a deterministic image instead.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{MockImage, MOCK_MEDIA_TYPE};
use crate::blob_store::BlobStore;
use crate::protocol::{BackendRole, CallContext, EditRequest, Endpoint, GenerateRequest, TransportError};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading script: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing script: {0}")]
    Parse(String),
    #[error("{role} entry {index}: {reason}")]
    Invalid {
        role: BackendRole,
        index: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFailure {
    pub status: u16,
    pub code: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Value>,
    #[serde(default)]
    pub sticky: bool,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFailure>,
    #[serde(default)]
    pub timeout: bool,
}

impl ScriptEntry {
    pub fn reply(value: Value) -> Self {
        ScriptEntry {
            reply: Some(value),
            ..Default::default()
        }
    }

    pub fn failure(status: u16, code: &str) -> Self {
        ScriptEntry {
            error: Some(ScriptedFailure {
                status,
                code: code.into(),
                message: String::new(),
            }),
            ..Default::default()
        }
    }

    pub fn timeout() -> Self {
        ScriptEntry {
            timeout: true,
            ..Default::default()
        }
    }

    pub fn when(mut self, pattern: Value) -> Self {
        self.pattern = Some(pattern);
        self
    }

    pub fn sticky(mut self) -> Self {
        self.sticky = true;
        self
    }

    fn check(&self) -> Result<(), String> {
        let outcomes =
            usize::from(self.reply.is_some()) + usize::from(self.error.is_some()) + usize::from(self.timeout);
        if outcomes != 1 {
            return Err("exactly one of reply, error, timeout is required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub roles: BTreeMap<BackendRole, Vec<ScriptEntry>>,
}

impl Script {
    pub fn new() -> Self {
        Script::default()
    }

    pub fn push(mut self, role: BackendRole, entry: ScriptEntry) -> Self {
        self.roles.entry(role).or_default().push(entry);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let script: Script = serde_json::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    /// Loads a script file. A bare entry list is accepted when `role` is given.
    pub fn load(path: &Path, role: Option<BackendRole>) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        let script = match (value, role) {
            (Value::Array(_), None) => return Err(ScriptError::Parse("entry list needs a role".into())),
            (list @ Value::Array(_), Some(role)) => {
                let entries: Vec<ScriptEntry> =
                    serde_json::from_value(list).map_err(|e| ScriptError::Parse(e.to_string()))?;
                Script {
                    roles: BTreeMap::from([(role, entries)]),
                }
            }
            (other, _) => serde_json::from_value(other).map_err(|e| ScriptError::Parse(e.to_string()))?,
        };
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        for (role, entries) in &self.roles {
            for (index, e) in entries.iter().enumerate() {
                e.check().map_err(|reason| ScriptError::Invalid {
                    role: *role,
                    index,
                    reason,
                })?;
            }
        }
        Ok(())
    }
}

/// Subset match of a request body against a script pattern.
fn matches(pattern: &Value, value: &Value) -> bool {
    match pattern {
        Value::Object(p) => {
            if let Some(needle) = p.get("$contains") {
                return matches!((value, needle), (Value::String(v), Value::String(n)) if v.contains(n.as_str()));
            }
            if let Some(n) = p.get("$len") {
                let len = match value {
                    Value::Array(a) => a.len(),
                    Value::String(s) => s.chars().count(),
                    _ => return false,
                };
                return n.as_u64() == Some(len as u64);
            }
            let Value::Object(v) = value else {
                return false;
            };
            p.iter().all(|(k, pv)| matches(pv, v.get(k).unwrap_or(&Value::Null)))
        }
        _ => pattern == value,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: BackendRole,
    pub request: Value,
    /// The reply body, or `{"error": ...}` for failures.
    pub outcome: Value,
}

struct Slot {
    entry: ScriptEntry,
    consumed: bool,
}

pub struct ScriptedMock {
    name: String,
    store: Arc<BlobStore>,
    slots: Mutex<BTreeMap<BackendRole, Vec<Slot>>>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl ScriptedMock {
    pub fn new(script: Script, store: Arc<BlobStore>) -> Self {
        let slots = script
            .roles
            .into_iter()
            .map(|(role, entries)| {
                let slots = entries
                    .into_iter()
                    .map(|entry| Slot { entry, consumed: false })
                    .collect();
                (role, slots)
            })
            .collect();
        ScriptedMock {
            name: "scripted-mock".into(),
            store,
            slots: Mutex::new(slots),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }

    /// Entries of `role` not yet consumed (sticky entries are never counted).
    pub fn remaining(&self, role: BackendRole) -> usize {
        self.slots
            .lock()
            .unwrap()
            .get(&role)
            .map_or(0, |s| s.iter().filter(|s| !s.consumed && !s.entry.sticky).count())
    }

    /// `None` when the role has no entries at all.
    fn take(&self, role: BackendRole, body: &Value) -> Option<Option<ScriptEntry>> {
        let mut slots = self.slots.lock().unwrap();
        let list = slots.get_mut(&role).filter(|l| !l.is_empty())?;
        let hit = list
            .iter_mut()
            .find(|s| !s.consumed && s.entry.pattern.as_ref().is_none_or(|p| matches(p, body)));
        Some(hit.map(|s| {
            if !s.entry.sticky {
                s.consumed = true;
            }
            s.entry.clone()
        }))
    }

    fn synthesize(&self, role: BackendRole, body: &Value) -> Result<Value, TransportError> {
        let bad = |e: serde_json::Error| TransportError::Status {
            status: 400,
            code: "invalid_request".into(),
            message: e.to_string(),
        };
        let image = match role {
            BackendRole::Generator => {
                let req: GenerateRequest = serde_json::from_value(body.clone()).map_err(bad)?;
                MockImage::synthesize(req.seed, req.prompt.as_bytes(), 0.5)
            }
            BackendRole::Editor => {
                let req: EditRequest = serde_json::from_value(body.clone()).map_err(bad)?;
                let label = [req.image_ref.digest.as_bytes(), req.instruction.as_bytes()].concat();
                match self
                    .store
                    .get(&req.image_ref)
                    .ok()
                    .as_deref()
                    .and_then(MockImage::decode)
                {
                    Some(src) => MockImage {
                        quality: src.quality,
                        pixels: src.perturb(req.seed, &label, 0.1),
                    },
                    None => MockImage::synthesize(req.seed, &label, 0.5),
                }
            }
            _ => return Err(TransportError::ScriptExhausted),
        };
        let image_ref = self
            .store
            .put(&image.encode(), MOCK_MEDIA_TYPE)
            .map_err(|e| TransportError::Status {
                status: 500,
                code: "blob_store".into(),
                message: e.to_string(),
            })?;
        Ok(json!({ "image_ref": image_ref }))
    }

    fn record(&self, role: BackendRole, request: &Value, outcome: Value) {
        self.transcript.lock().unwrap().push(TranscriptEntry {
            role,
            request: request.clone(),
            outcome,
        });
    }
}

#[async_trait]
impl Endpoint for ScriptedMock {
    fn identity(&self) -> String {
        self.name.clone()
    }

    async fn invoke(&self, role: BackendRole, body: Value, _ctx: &CallContext) -> Result<Value, TransportError> {
        let result = match self.take(role, &body) {
            None => self.synthesize(role, &body),
            Some(None) => Err(TransportError::ScriptExhausted),
            Some(Some(entry)) => {
                if entry.delay_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(entry.delay_ms)).await;
                }
                if let Some(reply) = entry.reply {
                    Ok(reply)
                } else if let Some(f) = entry.error {
                    Err(TransportError::Status {
                        status: f.status,
                        code: f.code,
                        message: f.message,
                    })
                } else {
                    Err(TransportError::Timeout)
                }
            }
        };
        let outcome = match &result {
            Ok(v) => v.clone(),
            Err(e) => json!({ "error": e.to_string() }),
        };
        self.record(role, &body, outcome);
        result
    }
}
