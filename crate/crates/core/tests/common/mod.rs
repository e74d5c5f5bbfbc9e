//! Shared helpers for the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod cli;
pub mod protocol;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use cotscale::blob_store::{sha256_hex, BlobStore};
use cotscale::protocol::mock::{
    MockImage, Script, ScriptEntry, ScriptedMock, StochasticMock, StochasticPolicy, MOCK_MEDIA_TYPE,
};
use cotscale::protocol::{
    BackendRole, Backends, CallContext, ClientOptions, DistanceRequest, Endpoint, GenerateRequest, JudgeRequest,
    ReasonRequest, RetryPolicy, ScoreRequest, TransportError,
};
use cotscale::trajectory::{FeatureLedger, ImageRef, Round, TerminalStatus, Trajectory};
use cotscale::verdict::{emit_verdict_text, VerdictAction};
use serde_json::{json, Value};

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap()
}

/// Short timeouts and near-zero retry backoff.
pub fn fast() -> ClientOptions {
    ClientOptions {
        timeout: Duration::from_secs(10),
        max_concurrency: 16,
        retry: RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            factor: 2,
        },
    }
}

pub fn single_attempt() -> ClientOptions {
    ClientOptions {
        retry: RetryPolicy {
            max_attempts: 1,
            ..fast().retry
        },
        ..fast()
    }
}

pub fn store(dir: &Path) -> Arc<BlobStore> {
    Arc::new(BlobStore::open(dir).unwrap())
}

pub fn scripted(script: Script, dir: &Path) -> (Backends, Arc<ScriptedMock>) {
    let store = store(dir);
    let mock = Arc::new(ScriptedMock::new(script, store.clone()));
    let backends = Backends::new(store).with_all(mock.clone(), fast());
    (backends, mock)
}

/// Scripted backends without a reasoner, for single-image runs.
pub fn scripted_without_reasoner(script: Script, dir: &Path) -> (Backends, Arc<ScriptedMock>) {
    let store = store(dir);
    let mock = Arc::new(ScriptedMock::new(script, store.clone()));
    let mut backends = Backends::new(store);
    for role in BackendRole::ALL.into_iter().filter(|r| *r != BackendRole::Reasoner) {
        backends = backends.with(role, mock.clone(), fast());
    }
    (backends, mock)
}

pub fn stochastic(seed: u64, policy: StochasticPolicy, dir: &Path) -> Backends {
    let store = store(dir);
    let mock = Arc::new(StochasticMock::new(seed, policy, store.clone()).unwrap());
    Backends::new(store).with_all(mock, fast())
}

fn ledger(todo: &[&str]) -> FeatureLedger {
    FeatureLedger::new(Vec::new(), todo.iter().map(|s| s.to_string()).collect()).unwrap()
}

pub fn edit_text(instruction: &str) -> String {
    emit_verdict_text(
        "The image is missing part of the request.",
        VerdictAction::EditImage,
        Some(instruction),
        None,
        &ledger(&["missing detail"]),
    )
}

pub fn satisfied_text() -> String {
    let all = FeatureLedger::new(vec!["everything requested".into()], Vec::new()).unwrap();
    emit_verdict_text(
        "Every requested element is present.",
        VerdictAction::SatisfiedComplete,
        None,
        None,
        &all,
    )
}

pub fn backtrack_text(target: u32, instruction: &str) -> String {
    emit_verdict_text(
        "The last edits went the wrong way.",
        VerdictAction::BacktrackToImage,
        Some(instruction),
        Some(target),
        &ledger(&["missing detail"]),
    )
}

pub fn reply(text: &str, terminated: bool) -> Value {
    json!({ "raw_text": text, "terminated": terminated })
}

/// A reasoner entry answering only unsuppressed calls.
pub fn decide(text: &str) -> ScriptEntry {
    ScriptEntry::reply(reply(text, true)).when(json!({ "suppress_termination": false }))
}

/// The sticky entry answering every suppressed (forced) call with an edit.
pub fn forced_reply() -> ScriptEntry {
    ScriptEntry::reply(reply(&edit_text("add more detail to the background scenery"), false))
        .when(json!({ "suppress_termination": true }))
        .sticky()
}

pub const EDIT: &str = "make the main subject larger and more centered";

/// Decisions a scripted reasoner makes at successive consults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Edit,
    Satisfied,
    /// No decision block, reply marked terminated.
    Premature,
}

pub fn decision_script(decisions: &[Decision]) -> Script {
    let mut script = Script::new();
    for d in decisions {
        let entry = match d {
            Decision::Edit => decide(&edit_text(EDIT)),
            Decision::Satisfied => decide(&satisfied_text()),
            Decision::Premature => decide("I think this is fine, stopping here."),
        };
        script = script.push(BackendRole::Reasoner, entry);
    }
    script.push(BackendRole::Reasoner, forced_reply())
}

/// Parsed `transcript` provenance of a sequential run.
pub fn transcript(t: &Trajectory) -> Vec<Value> {
    serde_json::from_str(&t.provenance["transcript"]).unwrap()
}

pub fn forced_requests(t: &Trajectory) -> usize {
    transcript(t)
        .iter()
        .filter(|e| e["request"]["forced_continuation"] == "Let's edit the image")
        .count()
}

/// Content-addressed fake image ref; nothing is stored.
pub fn image(label: &str) -> ImageRef {
    ImageRef::new(sha256_hex(label.as_bytes()), "image/png").unwrap()
}

/// Backend whose answers come from tables keyed by image digest, edit pair or
/// instruction. Serves the reasoner (quality prompts), scorer, distance metric
/// and judge.
#[derive(Default)]
pub struct LabelBackend {
    pub scores: HashMap<String, f64>,
    pub distances: HashMap<(String, String), f64>,
    pub irrelevant: HashSet<String>,
    pub broken: HashSet<String>,
}

impl LabelBackend {
    fn score_of(&self, image: &ImageRef) -> Result<f64, TransportError> {
        if self.broken.contains(&image.digest) {
            return Err(TransportError::Status {
                status: 500,
                code: "scorer_crashed".into(),
                message: "model failed to load".into(),
            });
        }
        Ok(*self.scores.get(&image.digest).unwrap_or(&0.5))
    }
}

fn decode<T: serde::de::DeserializeOwned>(body: Value) -> Result<T, TransportError> {
    serde_json::from_value(body).map_err(|e| TransportError::Status {
        status: 400,
        code: "invalid_request".into(),
        message: e.to_string(),
    })
}

#[async_trait]
impl Endpoint for LabelBackend {
    fn identity(&self) -> String {
        "label-backend".into()
    }

    async fn invoke(&self, role: BackendRole, body: Value, _ctx: &CallContext) -> Result<Value, TransportError> {
        match role {
            BackendRole::Reasoner => {
                let req: ReasonRequest = decode(body)?;
                let s = self.score_of(&req.image_refs[0])?;
                Ok(reply(&format!("SCORE: {s}"), true))
            }
            BackendRole::Scorer => {
                let req: ScoreRequest = decode(body)?;
                Ok(json!({ "score": self.score_of(&req.image_ref)? }))
            }
            BackendRole::DistanceMetric => {
                let req: DistanceRequest = decode(body)?;
                let key = (req.image_ref_a.digest, req.image_ref_b.digest);
                Ok(json!({ "distance": self.distances.get(&key).copied().unwrap_or(0.5) }))
            }
            BackendRole::Judge => {
                let req: JudgeRequest = decode(body)?;
                let relevant = !self.irrelevant.contains(&req.edit_instruction);
                Ok(json!({ "relevant": relevant, "rationale": if relevant { "on topic" } else { "off topic" } }))
            }
            _ => Err(TransportError::ScriptExhausted),
        }
    }
}

/// One step of a hand-built trajectory after the initial generation.
#[derive(Clone, Debug)]
pub enum Step {
    Edit {
        score: f64,
        distance: f64,
        relevant: bool,
    },
    /// Restores the output of the given round.
    Backtrack(u32),
}

pub fn edit(score: f64) -> Step {
    Step::Edit {
        score,
        distance: 0.2,
        relevant: true,
    }
}

pub fn low_change(score: f64, distance: f64) -> Step {
    Step::Edit {
        score,
        distance,
        relevant: true,
    }
}

pub fn off_topic(score: f64) -> Step {
    Step::Edit {
        score,
        distance: 0.2,
        relevant: false,
    }
}

/// Builds a valid trajectory and registers its labels with `labels`.
pub fn build(id: &str, prompt: &str, first_score: f64, steps: &[Step], labels: &mut LabelBackend) -> Trajectory {
    let mut t = Trajectory::new(id, prompt);
    let first = image(&format!("{id}/1"));
    labels.scores.insert(first.digest.clone(), first_score);
    t.push_round(Round::initial(first)).unwrap();
    for step in steps {
        let index = t.next_index();
        match step {
            Step::Edit {
                score,
                distance,
                relevant,
            } => {
                let input = t.current_image().unwrap().clone();
                let output = image(&format!("{id}/{index}"));
                let instruction = format!("{id} instruction for round {index}");
                labels.scores.insert(output.digest.clone(), *score);
                labels
                    .distances
                    .insert((input.digest.clone(), output.digest.clone()), *distance);
                if !relevant {
                    labels.irrelevant.insert(instruction.clone());
                }
                t.push_round(Round::edit(index, input, output, instruction)).unwrap();
            }
            Step::Backtrack(target) => {
                let restored = t.resolve_backtrack(*target).unwrap();
                t.push_round(Round::backtrack(index, restored)).unwrap();
            }
        }
    }
    t.terminal_status = TerminalStatus::SatisfiedComplete;
    t
}

/// Generator and scorer whose candidate `k` (seed `k`) scores `scores[k]`,
/// with per-candidate latency.
pub struct TableBackend {
    pub store: Arc<BlobStore>,
    pub scores: Vec<f64>,
    pub delays_ms: Vec<u64>,
}

#[async_trait]
impl Endpoint for TableBackend {
    fn identity(&self) -> String {
        "table-backend".into()
    }

    async fn invoke(&self, role: BackendRole, body: Value, _ctx: &CallContext) -> Result<Value, TransportError> {
        match role {
            BackendRole::Generator => {
                let req: GenerateRequest = decode(body)?;
                let k = req.seed as usize;
                tokio::time::sleep(Duration::from_millis(self.delays_ms[k])).await;
                let img = MockImage::synthesize(req.seed, b"table", self.scores[k]);
                let image_ref = self.store.put(&img.encode(), MOCK_MEDIA_TYPE).unwrap();
                Ok(json!({ "image_ref": image_ref }))
            }
            BackendRole::Scorer => {
                let req: ScoreRequest = decode(body)?;
                let img = MockImage::decode(&self.store.get(&req.image_ref).unwrap()).unwrap();
                let k = self.scores.iter().position(|s| *s == img.quality).unwrap_or(0);
                tokio::time::sleep(Duration::from_millis(self.delays_ms[self.delays_ms.len() - 1 - k])).await;
                Ok(json!({ "score": img.quality }))
            }
            _ => Err(TransportError::ScriptExhausted),
        }
    }
}

/// Hand-derived fate of one corpus trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum Fate {
    /// Retained with this many rounds and these splice log entries.
    Keep(usize, &'static [&'static str]),
    Drop(&'static str),
    Quarantine(&'static str),
}

pub const BENCHMARKS: [&str; 2] = ["a photo of three red apples on a wooden table", "two cats sleeping"];

/// The hand-labeled filter corpus. Each label was worked out by applying the
/// rules one at a time: error status, more than 8 images, final image scoring
/// strictly below the best of the first three, off-topic edits spliced, edits
/// with distance strictly below 0.03 spliced, fewer than 2 rounds left after
/// splicing, then 5-gram overlap with a benchmark prompt.
pub fn filter_corpus() -> (Vec<Trajectory>, LabelBackend, Vec<(String, Fate)>) {
    let mut labels = LabelBackend::default();
    let mut out = Vec::new();
    let mut fates = Vec::new();
    let mut add = |id: &str, prompt: &str, first: f64, steps: &[Step], fate: Fate, labels: &mut LabelBackend| {
        out.push(build(id, prompt, first, steps, labels));
        fates.push((id.to_string(), fate));
    };

    // Plain improving chain.
    add(
        "f01",
        "a lighthouse on a cliff at sunset",
        0.4,
        &[edit(0.5), edit(0.7)],
        Fate::Keep(3, &[]),
        &mut labels,
    );
    // Exactly eight images: the length rule keeps it.
    let eight: Vec<Step> = (1..8).map(|k| edit(0.3 + 0.05 * k as f64)).collect();
    add(
        "f02",
        "a market stall with five kinds of fruit",
        0.3,
        &eight,
        Fate::Keep(8, &[]),
        &mut labels,
    );
    // Nine images.
    let nine: Vec<Step> = (1..9).map(|k| edit(0.3 + 0.05 * k as f64)).collect();
    add(
        "f03",
        "a library with a spiral staircase",
        0.3,
        &nine,
        Fate::Drop("length"),
        &mut labels,
    );
    // Final 0.5 below the window best 0.8.
    add(
        "f04",
        "a fox jumping over a frozen stream",
        0.4,
        &[edit(0.8), edit(0.6), edit(0.5)],
        Fate::Drop("quality_regression"),
        &mut labels,
    );
    // Final ties the window best.
    add(
        "f05",
        "an astronaut riding a horse on the moon",
        0.4,
        &[edit(0.7), edit(0.6), edit(0.7)],
        Fate::Keep(4, &[]),
        &mut labels,
    );
    // The 0.9 peak is outside the window; final 0.5 ties the window best 0.5.
    add(
        "f06",
        "a child flying a kite on a beach",
        0.3,
        &[edit(0.4), edit(0.5), edit(0.9), edit(0.5)],
        Fate::Keep(5, &[]),
        &mut labels,
    );
    // A single image has nothing to compare or splice.
    add(
        "f07",
        "a single origami crane",
        0.2,
        &[],
        Fate::Keep(1, &[]),
        &mut labels,
    );
    // Off-topic round 3 is spliced; round 4 relinks to image 2.
    add(
        "f08",
        "a bakery window full of croissants",
        0.4,
        &[edit(0.5), off_topic(0.55), edit(0.6)],
        Fate::Keep(3, &["relevance:3"]),
        &mut labels,
    );
    // Round 2 barely changes the image.
    add(
        "f09",
        "a vintage car parked by a diner",
        0.4,
        &[low_change(0.45, 0.01), edit(0.5), edit(0.6)],
        Fate::Keep(3, &["min_visual_change:2"]),
        &mut labels,
    );
    // Distance exactly at the threshold is kept.
    add(
        "f10",
        "a robot watering house plants",
        0.4,
        &[low_change(0.5, 0.03), edit(0.6)],
        Fate::Keep(3, &[]),
        &mut labels,
    );
    // Distance just below the threshold is spliced.
    add(
        "f11",
        "a penguin wearing a scarf",
        0.4,
        &[low_change(0.5, 0.0299), edit(0.6)],
        Fate::Keep(2, &["min_visual_change:2"]),
        &mut labels,
    );
    // Splicing the only edit leaves one round.
    add(
        "f12",
        "a bridge over a misty river",
        0.4,
        &[off_topic(0.6)],
        Fate::Drop("post_splice_min_length"),
        &mut labels,
    );
    // Off-topic round 2 spliced first; old round 4 (now 3) then fails the change check.
    add(
        "f13",
        "a treehouse with a rope ladder",
        0.3,
        &[off_topic(0.4), edit(0.5), low_change(0.6, 0.01), edit(0.7)],
        Fate::Keep(3, &["relevance:2", "min_visual_change:3"]),
        &mut labels,
    );
    // Error status, marked below.
    add(
        "f14",
        "a snow globe with a tiny village",
        0.4,
        &[edit(0.6)],
        Fate::Drop("status"),
        &mut labels,
    );
    // Shares "three red apples on a" with a benchmark prompt.
    add(
        "f15",
        "three red apples on a marble counter",
        0.4,
        &[edit(0.6)],
        Fate::Drop("dedup"),
        &mut labels,
    );
    // Shorter than five tokens and identical to a benchmark prompt once normalized.
    add(
        "f16",
        "Two cats, sleeping!",
        0.4,
        &[edit(0.6)],
        Fate::Drop("dedup"),
        &mut labels,
    );
    // Off-topic round 2 is the backtrack target; splicing it breaks the backtrack.
    add(
        "f17",
        "a hot air balloon over a canyon",
        0.4,
        &[off_topic(0.5), edit(0.55), Step::Backtrack(2), edit(0.6)],
        Fate::Drop("splice_conflict"),
        &mut labels,
    );
    // Scoring image 2 fails.
    add(
        "f18",
        "a chess board mid game",
        0.4,
        &[edit(0.6), edit(0.7)],
        Fate::Quarantine("quality_regression"),
        &mut labels,
    );
    // Backtrack rounds produce no new image: the window is images 1, 2, 3.
    add(
        "f19",
        "a dog and a cat sharing a couch",
        0.3,
        &[edit(0.5), edit(0.4), Step::Backtrack(1), edit(0.6)],
        Fate::Keep(5, &[]),
        &mut labels,
    );
    // Splicing the last edit still leaves two rounds.
    add(
        "f20",
        "a windmill in a tulip field",
        0.4,
        &[edit(0.6), low_change(0.6, 0.0)],
        Fate::Keep(2, &["min_visual_change:3"]),
        &mut labels,
    );

    out[13].terminal_status = TerminalStatus::Error;
    labels.broken.insert(image("f18/2").digest);
    (out, labels, fates)
}

/// Compares filter output with the corpus labels; returns mismatch descriptions.
pub fn check_corpus(
    kept: &[Trajectory],
    report: &cotscale::filter::FilterReport,
    fates: &[(String, Fate)],
) -> Vec<String> {
    let mut problems = Vec::new();
    for (id, fate) in fates {
        let got = match kept.iter().find(|t| &t.id == id) {
            Some(t) => {
                let log: Vec<String> = t
                    .provenance
                    .get("spliced_rounds")
                    .map(|s| serde_json::from_str(s).unwrap())
                    .unwrap_or_default();
                if let Err(e) = t.validate() {
                    problems.push(format!("{id}: invalid after filtering: {e}"));
                }
                format!("keep {} {:?}", t.rounds.len(), log)
            }
            None => match report.drop_reasons.get(id) {
                Some(r) => match r.strip_prefix("quarantine:") {
                    Some(stage) => format!("quarantine {stage}"),
                    None => format!("drop {r}"),
                },
                None => "missing".to_string(),
            },
        };
        let want = match fate {
            Fate::Keep(n, log) => format!("keep {n} {:?}", log.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            Fate::Drop(stage) => format!("drop {stage}"),
            Fate::Quarantine(stage) => format!("quarantine {stage}"),
        };
        if got != want {
            problems.push(format!("{id}: expected {want}, got {got}"));
        }
    }
    problems
}
