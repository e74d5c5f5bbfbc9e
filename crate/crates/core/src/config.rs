//! Unified engine configuration: one JSON file, overridable per key through
//! `ENGINE_<SECTION>_<KEY>` environment variables.
//!
//! Loading merges built-in defaults, the file, then the environment. Relative
//! paths in the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::blob_store::BlobStore;
use crate::controller::{ControllerConfig, ParallelConfig};
use crate::filter::FilterConfig;
use crate::guidance::GuidanceConfig;
use crate::harness::HarnessConfig;
use crate::protocol::http::HttpEndpoint;
use crate::protocol::mock::{Script, ScriptedMock, StochasticMock, StochasticPolicy};
use crate::protocol::{BackendRole, Backends, ClientOptions, EditorSelection, Endpoint, RetryPolicy};
use crate::synthesis::SynthesisConfig;

pub const ENV_PREFIX: &str = "ENGINE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MockSpec {
    /// Replays a script file. Roles naming the same file share one instance.
    Scripted { script: PathBuf },
    Stochastic {
        seed: u64,
        #[serde(default)]
        policy: StochasticPolicy,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub url: Option<String>,
    pub mock: Option<MockSpec>,
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    /// Extra attempts after the first for retryable failures.
    pub retries: u32,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            url: None,
            mock: None,
            timeout_ms: 60_000,
            max_concurrency: 8,
            retries: 2,
        }
    }
}

impl BackendSpec {
    pub fn options(&self) -> ClientOptions {
        ClientOptions {
            timeout: Duration::from_millis(self.timeout_ms),
            max_concurrency: self.max_concurrency,
            retry: RetryPolicy {
                max_attempts: self.retries + 1,
                ..RetryPolicy::default()
            },
        }
    }
}

/// A role served by one backend, or by several (editors only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSpecs {
    One(BackendSpec),
    Many(Vec<BackendSpec>),
}

impl BackendSpecs {
    pub fn as_slice(&self) -> &[BackendSpec] {
        match self {
            BackendSpecs::One(s) => std::slice::from_ref(s),
            BackendSpecs::Many(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backends: BTreeMap<BackendRole, BackendSpecs>,
    /// Outcome scorer for sweeps; the engine scorer when absent.
    pub evaluator: Option<BackendSpec>,
    pub editor_selection: EditorSelection,
    pub store_root: PathBuf,
    /// Default seed for every section that does not set its own.
    pub seed: u64,
    /// Default guidance for every section that does not set its own.
    pub guidance: Option<GuidanceConfig>,
    pub controller: ControllerConfig,
    pub parallel: ParallelConfig,
    pub synthesis: SynthesisConfig,
    pub filter: FilterConfig,
    pub harness: HarnessConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            backends: BTreeMap::new(),
            evaluator: None,
            editor_selection: EditorSelection::Fixed,
            store_root: PathBuf::from("blobs"),
            seed: 0,
            guidance: None,
            controller: ControllerConfig::default(),
            parallel: ParallelConfig::default(),
            synthesis: SynthesisConfig::default(),
            filter: FilterConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("backend setup for {role}: {reason}")]
    Backend { role: String, reason: String },
}

/// Sections that inherit the top-level seed, with their seed field name.
const SEEDED_SECTIONS: [(&str, &str); 4] = [
    ("controller", "seed"),
    ("parallel", "base_seed"),
    ("synthesis", "seed"),
    ("harness", "seed"),
];
const GUIDED_SECTIONS: [&str; 3] = ["controller", "parallel", "synthesis"];

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves `tokens` (lowercased, split on `_`) to a key path in `shape`,
/// taking the longest key that matches at each level.
fn key_path(shape: &Value, tokens: &[&str]) -> Option<Vec<String>> {
    if tokens.is_empty() {
        return Some(Vec::new());
    }
    let Value::Object(map) = shape else {
        return None;
    };
    for take in (1..=tokens.len()).rev() {
        let key = tokens[..take].join("_");
        if let Some(child) = map.get(&key) {
            if let Some(mut rest) = key_path(child, &tokens[take..]) {
                rest.insert(0, key);
                return Some(rest);
            }
        }
    }
    None
}

fn set_path(target: &mut Value, path: &[String], value: Value) {
    let mut cur = target;
    for key in &path[..path.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut().unwrap().insert(path[path.len() - 1].clone(), value);
}

fn resolve_relative(user: &mut Value, base: &Path) {
    let fix = |v: &mut Value| {
        if let Value::String(s) = v {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    };
    let Value::Object(top) = user else {
        return;
    };
    let mut specs: Vec<&mut Value> = Vec::new();
    for (key, v) in top.iter_mut() {
        match (key.as_str(), v) {
            ("store_root", v) => fix(v),
            ("backends", Value::Object(roles)) => {
                for v in roles.values_mut() {
                    match v {
                        Value::Array(list) => specs.extend(list.iter_mut()),
                        other => specs.push(other),
                    }
                }
            }
            ("evaluator", v) => specs.push(v),
            _ => {}
        }
    }
    for spec in specs {
        if let Some(script) = spec.pointer_mut("/mock/script") {
            fix(script);
        }
    }
}

impl EngineConfig {
    /// Defaults, then `file` (if any), then overrides from `env`.
    pub fn load<I>(file: Option<&Path>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_path_buf(),
                    source,
                })?;
                let mut v: Value =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
                if !v.is_object() {
                    return Err(ConfigError::Parse(format!(
                        "{}: top level must be an object",
                        path.display()
                    )));
                }
                let dir = path.parent().unwrap_or(Path::new("."));
                resolve_relative(&mut v, dir);
                v
            }
            None => Value::Object(Map::new()),
        };
        Self::from_user_value(&mut user, env)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut user: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_user_value(&mut user, std::iter::empty())
    }

    fn from_user_value<I>(user: &mut Value, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let defaults = serde_json::to_value(EngineConfig::default()).expect("defaults serialize");
        // Env keys may address any role's backend, configured in the file or not.
        let mut env_shape = defaults.clone();
        let spec = serde_json::to_value(BackendSpec::default()).expect("defaults serialize");
        for role in BackendRole::ALL {
            set_path(&mut env_shape, &["backends".into(), role.name().into()], spec.clone());
        }
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (var, raw) in vars {
            let mut shape = env_shape.clone();
            merge(&mut shape, user.clone());
            let lowered = var[ENV_PREFIX.len()..].to_ascii_lowercase();
            let tokens: Vec<&str> = lowered.split('_').collect();
            let path = key_path(&shape, &tokens).ok_or_else(|| ConfigError::Env {
                var: var.clone(),
                reason: "does not name a config key".into(),
            })?;
            // Numbers, booleans and JSON literals parse as such; anything else is a string.
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            set_path(user, &path, value);
        }
        if let Some(seed) = user.get("seed").cloned() {
            for (section, field) in SEEDED_SECTIONS {
                if user.pointer(&format!("/{section}/{field}")).is_none() {
                    set_path(user, &[section.into(), field.into()], seed.clone());
                }
            }
        }
        if let Some(guidance) = user.get("guidance").filter(|g| !g.is_null()).cloned() {
            for section in GUIDED_SECTIONS {
                if user.pointer(&format!("/{section}/guidance")).is_none() {
                    set_path(user, &[section.into(), "guidance".into()], guidance.clone());
                }
            }
        }
        let mut merged = defaults;
        merge(&mut merged, user.clone());
        let config: EngineConfig = serde_path_to_error::deserialize(merged)
            .map_err(|e| ConfigError::Parse(format!("{}: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        for (role, specs) in &self.backends {
            let list = specs.as_slice();
            if list.is_empty() {
                return Err(invalid(format!("backends.{role}: empty list")));
            }
            if list.len() > 1 && *role != BackendRole::Editor {
                return Err(invalid(format!(
                    "backends.{role}: only the editor role accepts several backends"
                )));
            }
            for spec in list {
                check_spec(&role.to_string(), spec)?;
            }
        }
        if let Some(e) = &self.evaluator {
            check_spec("evaluator", e)?;
        }
        self.controller
            .validate()
            .map_err(|m| invalid(format!("controller: {m}")))?;
        self.synthesis
            .validate()
            .map_err(|e| invalid(format!("synthesis: {e}")))?;
        self.filter.validate().map_err(|e| invalid(format!("filter: {e}")))?;
        Ok(())
    }

    /// Opens the blob store and builds every configured role client. No
    /// network traffic happens here.
    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        let store =
            Arc::new(BlobStore::open(&self.store_root).map_err(|e| ConfigError::Invalid(format!("store_root: {e}")))?);
        let mut factory = EndpointFactory {
            store: store.clone(),
            scripted: BTreeMap::new(),
            stochastic: BTreeMap::new(),
        };
        let mut backends = Backends::new(store).with_editor_selection(self.editor_selection);
        for (role, specs) in &self.backends {
            for spec in specs.as_slice() {
                let endpoint = factory.endpoint(&role.to_string(), spec)?;
                backends = backends.with(*role, endpoint, spec.options());
            }
        }
        if let Some(spec) = &self.evaluator {
            let endpoint = factory.endpoint("evaluator", spec)?;
            backends = backends.with_evaluator(endpoint, spec.options());
        }
        Ok(backends)
    }
}

fn check_spec(name: &str, spec: &BackendSpec) -> Result<(), ConfigError> {
    let err = |reason: &str| ConfigError::Backend {
        role: name.into(),
        reason: reason.into(),
    };
    match (&spec.url, &spec.mock) {
        (Some(_), Some(_)) => Err(err("set either url or mock, not both")),
        (None, None) => Err(err("missing url")),
        (Some(u), None) if !(u.starts_with("http://") || u.starts_with("https://")) => Err(err("url must be http(s)")),
        _ if spec.timeout_ms == 0 => Err(err("timeout_ms must be positive")),
        _ if spec.max_concurrency == 0 => Err(err("max_concurrency must be positive")),
        _ => Ok(()),
    }
}

struct EndpointFactory {
    store: Arc<BlobStore>,
    scripted: BTreeMap<PathBuf, Arc<ScriptedMock>>,
    stochastic: BTreeMap<String, Arc<StochasticMock>>,
}

impl EndpointFactory {
    fn endpoint(&mut self, name: &str, spec: &BackendSpec) -> Result<Arc<dyn Endpoint>, ConfigError> {
        let err = |reason: String| ConfigError::Backend {
            role: name.into(),
            reason,
        };
        if let Some(url) = &spec.url {
            let endpoint = HttpEndpoint::new(url.clone(), Duration::from_millis(spec.timeout_ms))
                .map_err(|e| err(e.to_string()))?;
            return Ok(Arc::new(endpoint));
        }
        match spec.mock.as_ref().expect("validated spec has url or mock") {
            MockSpec::Scripted { script } => {
                if let Some(m) = self.scripted.get(script) {
                    return Ok(m.clone());
                }
                let loaded = Script::load(script, None).map_err(|e| err(format!("{}: {e}", script.display())))?;
                let mock = Arc::new(ScriptedMock::new(loaded, self.store.clone()));
                self.scripted.insert(script.clone(), mock.clone());
                Ok(mock)
            }
            MockSpec::Stochastic { seed, policy } => {
                let key = format!("{seed}:{}", serde_json::to_string(policy).expect("policy serializes"));
                if let Some(m) = self.stochastic.get(&key) {
                    return Ok(m.clone());
                }
                let mock = Arc::new(
                    StochasticMock::new(*seed, policy.clone(), self.store.clone()).map_err(|e| err(e.to_string()))?,
                );
                self.stochastic.insert(key, mock.clone());
                Ok(mock)
            }
        }
    }
}
