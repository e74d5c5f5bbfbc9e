//! Seeded stochastic backends.
//!
//! Every decision is a pure function of the mock seed and the request content
//! (never of call order), so concurrent runs and resumed runs see identical
//! replies. Images carry a latent quality that edits raise toward 1.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{unit, MockImage, MOCK_MEDIA_TYPE};
use crate::blob_store::BlobStore;
use crate::protocol::{
    BackendRole, CallContext, DistanceRequest, EditRequest, Endpoint, GenerateRequest, JudgeRequest, JudgeTask,
    ReasonRequest, ScoreRequest, TransportError,
};
use crate::trajectory::{normalize_feature, FeatureLedger, ImageRef};
use crate::verdict::{emit_verdict_text, VerdictAction};

const REQUEST_MARKER: &str = "ORIGINAL USER REQUEST: ";
const COMPLEXITY_MARKER: &str = "COMPLEXITY CHECK FOR REQUEST: ";
const QUALITY_MARKER: &str = "INSTRUCTION-FOLLOWING SCORE FOR REQUEST: ";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid stochastic policy: {0}")]
pub struct InvalidPolicy(pub String);

/// When the mock reasoner declares a trajectory complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Satisfaction {
    /// Independent chance per evaluated image.
    PerRound { p: f64 },
    /// Each prompt draws a target image count from `distribution`
    /// (weights, normalized) and is satisfied once that many images exist.
    TargetRounds { distribution: BTreeMap<u32, f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StochasticPolicy {
    pub satisfaction: Satisfaction,
    pub backtrack_prob: f64,
    pub malformed_prob: f64,
    /// Range of latent quality for fresh generations.
    pub initial_quality: (f64, f64),
    /// Largest fraction of the remaining quality gap one edit closes.
    pub edit_gain: f64,
    /// Range of per-pixel change magnitude of an edit (fraction of full scale).
    pub edit_change: (f64, f64),
    pub relevance_prob: f64,
    pub complex_prob: f64,
    pub score_noise: f64,
    pub max_latency_ms: u64,
    pub latency_salt: u64,
}

impl Default for StochasticPolicy {
    fn default() -> Self {
        StochasticPolicy {
            satisfaction: Satisfaction::PerRound { p: 0.3 },
            backtrack_prob: 0.0,
            malformed_prob: 0.0,
            initial_quality: (0.2, 0.6),
            edit_gain: 0.35,
            edit_change: (0.02, 0.2),
            relevance_prob: 1.0,
            complex_prob: 0.0,
            score_noise: 0.0,
            max_latency_ms: 0,
            latency_salt: 0,
        }
    }
}

fn probability(name: &str, p: f64) -> Result<(), InvalidPolicy> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(InvalidPolicy(format!("{name} must lie in [0, 1], got {p}")))
    }
}

fn range(name: &str, (lo, hi): (f64, f64)) -> Result<(), InvalidPolicy> {
    probability(name, lo)?;
    probability(name, hi)?;
    if lo > hi {
        return Err(InvalidPolicy(format!("{name} range is inverted")));
    }
    Ok(())
}

impl StochasticPolicy {
    pub fn validate(&self) -> Result<(), InvalidPolicy> {
        match &self.satisfaction {
            Satisfaction::PerRound { p } => probability("satisfaction.p", *p)?,
            Satisfaction::TargetRounds { distribution } => {
                if distribution.is_empty() {
                    return Err(InvalidPolicy("target distribution is empty".into()));
                }
                if distribution.contains_key(&0) {
                    return Err(InvalidPolicy("target image counts start at 1".into()));
                }
                if distribution.values().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(InvalidPolicy("target weights must be finite and non-negative".into()));
                }
                if distribution.values().sum::<f64>() <= 0.0 {
                    return Err(InvalidPolicy("target weights sum to zero".into()));
                }
            }
        }
        probability("backtrack_prob", self.backtrack_prob)?;
        probability("malformed_prob", self.malformed_prob)?;
        probability("edit_gain", self.edit_gain)?;
        probability("relevance_prob", self.relevance_prob)?;
        probability("complex_prob", self.complex_prob)?;
        range("initial_quality", self.initial_quality)?;
        range("edit_change", self.edit_change)?;
        if !self.score_noise.is_finite() || self.score_noise < 0.0 {
            return Err(InvalidPolicy("score_noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Weighted mean of the target distribution, if one is configured.
    pub fn expected_target(&self) -> Option<f64> {
        match &self.satisfaction {
            Satisfaction::TargetRounds { distribution } => {
                let total: f64 = distribution.values().sum();
                Some(distribution.iter().map(|(k, w)| f64::from(*k) * w).sum::<f64>() / total)
            }
            Satisfaction::PerRound { .. } => None,
        }
    }
}

pub struct StochasticMock {
    seed: u64,
    policy: StochasticPolicy,
    store: Arc<BlobStore>,
}

fn after_marker<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.find(marker)? + marker.len();
    Some(text[start..].lines().next().unwrap_or("").trim())
}

/// Splits a prompt into feature phrases on commas and "and".
fn features(prompt: &str) -> Vec<String> {
    let mut seen = Vec::<String>::new();
    let mut out = Vec::new();
    for part in prompt.split([',', ';', '.']).flat_map(|p| p.split(" and ")) {
        let part = part.trim();
        let key = normalize_feature(part);
        if key.is_empty() || key == "none" || seen.contains(&key) {
            continue;
        }
        seen.push(key);
        out.push(part.to_string());
    }
    if out.is_empty() {
        out.push("requested content".into());
    }
    out
}

const VERBS: [&str; 6] = ["adjust", "refine", "emphasize", "reposition", "recolor", "sharpen"];
const COUNTS: [&str; 5] = ["a single", "two", "three", "four", "five"];
const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"];
const OBJECTS: [&str; 12] = [
    "apples",
    "books",
    "cups",
    "chairs",
    "cats",
    "lamps",
    "bicycles",
    "clocks",
    "vases",
    "birds",
    "candles",
    "umbrellas",
];
const RELATIONS: [&str; 6] = [
    "to the left of",
    "to the right of",
    "on top of",
    "beneath",
    "next to",
    "behind",
];
const SCENES: [&str; 6] = [
    "on a wooden table",
    "in a sunlit kitchen",
    "on a city street",
    "in a quiet library",
    "on a sandy beach",
    "in a snowy garden",
];

impl StochasticMock {
    pub fn new(seed: u64, policy: StochasticPolicy, store: Arc<BlobStore>) -> Result<Self, InvalidPolicy> {
        policy.validate()?;
        Ok(StochasticMock { seed, policy, store })
    }

    pub fn policy(&self) -> &StochasticPolicy {
        &self.policy
    }

    fn u(&self, parts: &[&[u8]]) -> f64 {
        unit(self.seed, parts)
    }

    fn pick<'a>(&self, options: &[&'a str], parts: &[&[u8]]) -> &'a str {
        options[((self.u(parts) * options.len() as f64) as usize).min(options.len() - 1)]
    }

    fn load(&self, image: &ImageRef) -> Option<MockImage> {
        self.store.get(image).ok().as_deref().and_then(MockImage::decode)
    }

    fn publish(&self, image: &MockImage) -> Result<Value, TransportError> {
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

    /// Target image count for a prompt under [`Satisfaction::TargetRounds`].
    pub fn target_rounds(&self, user_prompt: &str) -> Option<u32> {
        let Satisfaction::TargetRounds { distribution } = &self.policy.satisfaction else {
            return None;
        };
        let total: f64 = distribution.values().sum();
        let mut x = self.u(&[b"target", user_prompt.as_bytes()]) * total;
        let mut last = None;
        for (k, w) in distribution {
            if *w <= 0.0 {
                continue;
            }
            last = Some(*k);
            if x < *w {
                return Some(*k);
            }
            x -= w;
        }
        last
    }

    fn generate(&self, req: GenerateRequest) -> Result<Value, TransportError> {
        let (lo, hi) = self.policy.initial_quality;
        let seed = req.seed.to_be_bytes();
        let quality = lo + (hi - lo) * self.u(&[b"quality", req.prompt.as_bytes(), &seed]);
        let label = [&self.seed.to_be_bytes()[..], req.prompt.as_bytes()].concat();
        self.publish(&MockImage::synthesize(req.seed, &label, quality))
    }

    fn edit(&self, req: EditRequest) -> Result<Value, TransportError> {
        let seed = req.seed.to_be_bytes();
        let parts: [&[u8]; 3] = [req.image_ref.digest.as_bytes(), req.instruction.as_bytes(), &seed];
        let src = self.load(&req.image_ref).unwrap_or_else(|| {
            MockImage::synthesize(
                self.seed,
                req.image_ref.digest.as_bytes(),
                self.policy.initial_quality.0,
            )
        });
        let gain = self.policy.edit_gain * self.u(&[b"gain", parts[0], parts[1], parts[2]]);
        let (lo, hi) = self.policy.edit_change;
        let change = lo + (hi - lo) * self.u(&[b"change", parts[0], parts[1], parts[2]]);
        let label = parts.concat();
        let out = MockImage {
            quality: src.quality + gain * (1.0 - src.quality),
            pixels: src.perturb(self.seed ^ req.seed, &label, change),
        };
        self.publish(&out)
    }

    fn instruction(&self, todo: &[String], salt: &[u8]) -> String {
        let target = todo.first().map_or("the main subject".to_string(), |t| {
            t.split_whitespace().take(6).collect::<Vec<_>>().join(" ")
        });
        let verb = self.pick(&VERBS, &[b"verb", salt]);
        format!("{verb} {target} so it matches the request more closely")
    }

    fn reason(&self, req: ReasonRequest) -> Result<Value, TransportError> {
        let prompt = &req.rendered_prompt;
        if let Some(user) = after_marker(prompt, COMPLEXITY_MARKER) {
            return Ok(json!({ "raw_text": self.decompose(user), "terminated": true }));
        }
        if let Some(user) = after_marker(prompt, QUALITY_MARKER) {
            let q = req
                .image_refs
                .last()
                .and_then(|r| self.load(r))
                .map_or(0.0, |m| m.quality.clamp(0.0, 1.0));
            let _ = user;
            return Ok(json!({ "raw_text": format!("SCORE: {q:.6}"), "terminated": true }));
        }

        let user = after_marker(prompt, REQUEST_MARKER).unwrap_or(prompt.as_str());
        let n = req.image_refs.len();
        let last = req.image_refs.last().map_or("", |r| r.digest.as_str());
        let salt = [user.as_bytes(), last.as_bytes(), &(n as u64).to_be_bytes()].concat();

        let feats = features(user);
        let target = self.target_rounds(user).unwrap_or(n as u32 + 1).max(1) as usize;
        let done = (feats.len() * n / target).min(feats.len());
        let ledger =
            FeatureLedger::new(feats[..done].to_vec(), feats[done..].to_vec()).expect("features are deduplicated");
        let think = format!("Image #{n} covers {done} of {} requested features.", feats.len());

        if req.suppress_termination {
            let instruction = self.instruction(&ledger.todo, &salt);
            let text = emit_verdict_text(&think, VerdictAction::EditImage, Some(&instruction), None, &ledger);
            return Ok(json!({ "raw_text": text, "terminated": false }));
        }
        if self.u(&[b"malformed", &salt]) < self.policy.malformed_prob {
            return Ok(
                json!({ "raw_text": "The image looks interesting but I cannot decide yet.", "terminated": true }),
            );
        }
        let satisfied = match &self.policy.satisfaction {
            Satisfaction::PerRound { p } => self.u(&[b"satisfied", &salt]) < *p,
            Satisfaction::TargetRounds { .. } => n >= target,
        };
        let text = if satisfied {
            let all = FeatureLedger::new(feats.clone(), Vec::new()).expect("features are deduplicated");
            emit_verdict_text(&think, VerdictAction::SatisfiedComplete, None, None, &all)
        } else if n >= 2 && self.u(&[b"backtrack", &salt]) < self.policy.backtrack_prob {
            let to = 1 + ((self.u(&[b"backtrack_to", &salt]) * (n - 1) as f64) as usize).min(n - 2);
            let instruction = self.instruction(&ledger.todo, &salt);
            emit_verdict_text(
                &think,
                VerdictAction::BacktrackToImage,
                Some(&instruction),
                Some(to as u32),
                &ledger,
            )
        } else {
            let instruction = self.instruction(&ledger.todo, &salt);
            emit_verdict_text(&think, VerdictAction::EditImage, Some(&instruction), None, &ledger)
        };
        Ok(json!({ "raw_text": text, "terminated": true }))
    }

    fn decompose(&self, user: &str) -> String {
        let feats = features(user);
        if feats.len() < 2 || self.u(&[b"complex", user.as_bytes()]) >= self.policy.complex_prob {
            return "COMPLEX: NO".into();
        }
        let mut out = String::from("COMPLEX: YES\nSUBGOALS:\n");
        for (i, f) in feats.iter().take(3).enumerate() {
            out.push_str(&format!("{}. {f}\n", i + 1));
        }
        out
    }

    fn score(&self, req: ScoreRequest) -> Result<Value, TransportError> {
        let q = self.load(&req.image_ref).map_or(0.0, |m| m.quality);
        let noise = self.policy.score_noise
            * (2.0 * self.u(&[b"noise", req.prompt.as_bytes(), req.image_ref.digest.as_bytes()]) - 1.0);
        Ok(json!({ "score": q + noise }))
    }

    fn distance(&self, req: DistanceRequest) -> Result<Value, TransportError> {
        let d = if req.image_ref_a == req.image_ref_b {
            0.0
        } else {
            match (self.load(&req.image_ref_a), self.load(&req.image_ref_b)) {
                (Some(a), Some(b)) => a.distance(&b),
                _ => 1.0,
            }
        };
        Ok(json!({ "distance": d }))
    }

    fn author(&self, brief: &str) -> String {
        let p = |label: &[u8]| [label, brief.as_bytes()].concat();
        let c1 = self.pick(&COUNTS, &[&p(b"c1")]);
        let k1 = self.pick(&COLORS, &[&p(b"k1")]);
        let o1 = self.pick(&OBJECTS, &[&p(b"o1")]);
        let rel = self.pick(&RELATIONS, &[&p(b"rel")]);
        let c2 = self.pick(&COUNTS, &[&p(b"c2")]);
        let k2 = self.pick(&COLORS, &[&p(b"k2")]);
        let o2 = self.pick(&OBJECTS, &[&p(b"o2")]);
        let scene = self.pick(&SCENES, &[&p(b"scene")]);
        format!("{c1} {k1} {o1} {rel} {c2} {k2} {o2}, {scene}")
    }

    fn judge(&self, req: JudgeRequest) -> Result<Value, TransportError> {
        match req.task.unwrap_or_default() {
            JudgeTask::AuthorPrompt => Ok(json!({
                "relevant": true,
                "rationale": "authored",
                "text": self.author(&req.original_prompt),
            })),
            JudgeTask::Relevance => {
                let u = self.u(&[
                    b"relevant",
                    req.original_prompt.as_bytes(),
                    req.edit_instruction.as_bytes(),
                ]);
                let relevant = u < self.policy.relevance_prob;
                let rationale = if relevant {
                    "instruction addresses the request"
                } else {
                    "instruction is unrelated to the request"
                };
                Ok(json!({ "relevant": relevant, "rationale": rationale }))
            }
        }
    }

    fn respond(&self, role: BackendRole, body: Value) -> Result<Value, TransportError> {
        fn parse<T: serde::de::DeserializeOwned>(body: Value) -> Result<T, TransportError> {
            serde_json::from_value(body).map_err(|e| TransportError::Status {
                status: 400,
                code: "invalid_request".into(),
                message: e.to_string(),
            })
        }
        match role {
            BackendRole::Generator => self.generate(parse(body)?),
            BackendRole::Editor => self.edit(parse(body)?),
            BackendRole::Reasoner => self.reason(parse(body)?),
            BackendRole::Scorer => self.score(parse(body)?),
            BackendRole::DistanceMetric => self.distance(parse(body)?),
            BackendRole::Judge => self.judge(parse(body)?),
        }
    }
}

#[async_trait]
impl Endpoint for StochasticMock {
    fn identity(&self) -> String {
        format!("stochastic-mock(seed={})", self.seed)
    }

    async fn invoke(&self, role: BackendRole, body: Value, _ctx: &CallContext) -> Result<Value, TransportError> {
        if self.policy.max_latency_ms > 0 {
            let key = serde_json::to_vec(&body).unwrap_or_default();
            let u = unit(self.policy.latency_salt, &[role.name().as_bytes(), &key]);
            tokio::time::sleep(Duration::from_micros(
                (u * self.policy.max_latency_ms as f64 * 1000.0) as u64,
            ))
            .await;
        }
        self.respond(role, body)
    }
}
