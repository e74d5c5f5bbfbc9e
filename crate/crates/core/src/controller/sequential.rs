//! Budget-forced sequential refinement.
//!
//! Round 1 generates (or, in later turns of a multi-turn session, edits the
//! previous turn's answer). Every further round asks the reasoner for a
//! verdict and dispatches it. Under [`BudgetMode::ForceExact`] an early
//! `SATISFIED_COMPLETE` is not accepted: the reasoner is asked again with
//! termination suppressed and a forced continuation, and the resulting edit is
//! recorded as a forced round. The loop stops as soon as the budget is spent,
//! so the answer is always the output of the last budgeted round.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{derive_seed, stable_id};
use crate::guidance::GuidanceConfig;
use crate::protocol::{
    BackendError, BackendRole, Backends, EditRequest, GenerateRequest, ReasonRequest, ReasonResponse,
};
use crate::trajectory::{canonical_json, ImageRef, Round, TerminalStatus, Trajectory, TrajectoryError};
use crate::verdict::{
    parse_verdict, render_with_history, split_think, template_sha256, Verdict, VerdictAction, VerdictError,
    TEMPLATE_VERSION,
};

pub const DEFAULT_FORCED_CONTINUATION: &str = "Let's edit the image";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Exactly `c` images; early termination is overridden.
    ForceExact,
    /// At most `c` images.
    MaxRounds,
    /// At most `c` images, stopping when the reasoner is satisfied.
    EarlyStop,
}

impl BudgetMode {
    pub fn name(self) -> &'static str {
        match self {
            BudgetMode::ForceExact => "force_exact",
            BudgetMode::MaxRounds => "max_rounds",
            BudgetMode::EarlyStop => "early_stop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetPolicy {
    pub mode: BudgetMode,
    pub c: u32,
}

impl BudgetPolicy {
    pub fn force_exact(c: u32) -> Self {
        BudgetPolicy {
            mode: BudgetMode::ForceExact,
            c,
        }
    }

    pub fn max_rounds(c: u32) -> Self {
        BudgetPolicy {
            mode: BudgetMode::MaxRounds,
            c,
        }
    }

    pub fn early_stop(c: u32) -> Self {
        BudgetPolicy {
            mode: BudgetMode::EarlyStop,
            c,
        }
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.mode.name(), self.c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub policy: BudgetPolicy,
    pub forced_continuation_text: String,
    /// Edits whose output is closer than this to their input are discarded and retried.
    pub skip_min_change: Option<f64>,
    /// Cap on discarded edits per trajectory; defaults to the budget.
    pub max_skips: Option<u32>,
    pub reset_enabled: bool,
    /// Consecutive low-change edits that trigger a fresh generation.
    pub reset_after: u32,
    pub reset_threshold: f64,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    /// Re-asks of the reasoner after an unparseable reply.
    pub parse_retries: u32,
    /// Whether backtrack rounds are charged against the budget.
    pub count_backtracks: bool,
    /// Cap on backtracks per trajectory; defaults to the budget.
    pub max_backtracks: Option<u32>,
    pub width: u32,
    pub height: u32,
    /// Largest budget accepted per turn of a multi-turn session.
    pub per_turn_cap: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            policy: BudgetPolicy::force_exact(10),
            forced_continuation_text: DEFAULT_FORCED_CONTINUATION.to_string(),
            skip_min_change: None,
            max_skips: None,
            reset_enabled: false,
            reset_after: 2,
            reset_threshold: 0.03,
            seed: 0,
            guidance: GuidanceConfig::default(),
            parse_retries: 2,
            count_backtracks: false,
            max_backtracks: None,
            width: 1024,
            height: 1024,
            per_turn_cap: 4,
        }
    }
}

impl ControllerConfig {
    pub fn with_policy(mut self, policy: BudgetPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.policy.c == 0 {
            return Err("budget c must be at least 1".into());
        }
        if self.forced_continuation_text.trim().is_empty() {
            return Err("forced_continuation_text must not be empty".into());
        }
        if let Some(t) = self.skip_min_change {
            if !t.is_finite() || t < 0.0 {
                return Err("skip_min_change must be a finite non-negative number".into());
            }
        }
        if !self.reset_threshold.is_finite() || self.reset_threshold < 0.0 {
            return Err("reset_threshold must be a finite non-negative number".into());
        }
        if self.reset_enabled && self.reset_after == 0 {
            return Err("reset_after must be at least 1".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be positive".into());
        }
        self.guidance.validate().map_err(|e| e.to_string())
    }

    fn needs_distance(&self) -> bool {
        self.skip_min_change.is_some() || self.reset_enabled
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("backend failure: {error}")]
    Backend {
        error: BackendError,
        trajectory: Box<Trajectory>,
    },
    #[error("reasoner reply still unparseable after re-asking: {error}")]
    Parser {
        error: VerdictError,
        trajectory: Box<Trajectory>,
    },
    #[error("trajectory invariant violated: {error}")]
    Invariant {
        error: TrajectoryError,
        trajectory: Box<Trajectory>,
    },
}

impl RunError {
    /// The partial trajectory (status `Error`) for failures after the run started.
    pub fn trajectory(&self) -> Option<&Trajectory> {
        match self {
            RunError::Precondition(_) => None,
            RunError::Backend { trajectory, .. }
            | RunError::Parser { trajectory, .. }
            | RunError::Invariant { trajectory, .. } => Some(trajectory),
        }
    }

    pub fn into_trajectory(self) -> Option<Trajectory> {
        match self {
            RunError::Precondition(_) => None,
            RunError::Backend { trajectory, .. }
            | RunError::Parser { trajectory, .. }
            | RunError::Invariant { trajectory, .. } => Some(*trajectory),
        }
    }
}

/// Per-run overrides beyond the controller config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub id: Option<String>,
    /// Text for the first generation instead of the user prompt (e.g. a subgoal).
    pub initial_prompt: Option<String>,
    /// Start by editing this image instead of generating.
    pub start_image: Option<ImageRef>,
    /// Earlier turns of the same session, rendered into every prompt.
    pub history: Vec<Trajectory>,
    /// Extra provenance entries.
    pub provenance: BTreeMap<String, String>,
}

enum Fail {
    Backend(BackendError),
    Parser(VerdictError),
    Invariant(TrajectoryError),
}

impl From<BackendError> for Fail {
    fn from(e: BackendError) -> Self {
        Fail::Backend(e)
    }
}

impl From<TrajectoryError> for Fail {
    fn from(e: TrajectoryError) -> Self {
        Fail::Invariant(e)
    }
}

enum Decision {
    Verdict(Verdict),
    /// The reasoner stopped without a decision before the budget was spent.
    Premature,
}

struct Runner<'a> {
    backends: &'a Backends,
    config: &'a ControllerConfig,
    user_prompt: &'a str,
    history: &'a [Trajectory],
    traj: Trajectory,
    transcript: Vec<Value>,
    warnings: Vec<String>,
    skipped: Vec<Value>,
    generation_calls: u64,
    backtracks: u32,
    skips: u32,
    resets: u32,
    low_change_streak: u32,
}

impl<'a> Runner<'a> {
    fn spent(&self) -> u32 {
        self.traj.budget_rounds(self.config.count_backtracks) as u32
    }

    fn budget_left(&self) -> bool {
        self.spent() < self.config.policy.c
    }

    fn next_seed(&mut self) -> u64 {
        let s = self.config.seed.wrapping_add(self.generation_calls);
        self.generation_calls += 1;
        s
    }

    async fn generate(&mut self, prompt: &str) -> Result<ImageRef, Fail> {
        let request = GenerateRequest {
            prompt: prompt.to_string(),
            seed: self.next_seed(),
            width: self.config.width,
            height: self.config.height,
            s_t: Some(self.config.guidance.s_t),
            s_i: Some(self.config.guidance.s_i),
        };
        Ok(self.backends.generate(&request, &self.traj.id).await?.image_ref)
    }

    async fn edit(&mut self, input: &ImageRef, instruction: &str) -> Result<ImageRef, Fail> {
        let request = EditRequest {
            image_ref: input.clone(),
            instruction: instruction.to_string(),
            seed: self.next_seed(),
            s_t: Some(self.config.guidance.s_t),
            s_i: Some(self.config.guidance.s_i),
            image_b64: None,
        };
        Ok(self.backends.edit(&request, &self.traj.id).await?.image_ref)
    }

    /// All images so far, oldest first, including earlier turns. The last one is current.
    fn image_refs(&self) -> Vec<ImageRef> {
        self.history
            .iter()
            .chain(std::iter::once(&self.traj))
            .flat_map(|t| t.rounds.iter().filter_map(|r| r.output_image.clone()))
            .collect()
    }

    async fn consult(&mut self, suppress: bool) -> Result<ReasonResponse, Fail> {
        let request = ReasonRequest {
            rendered_prompt: render_with_history(self.user_prompt, self.history, &self.traj),
            image_refs: self.image_refs(),
            suppress_termination: suppress,
            forced_continuation: suppress.then(|| self.config.forced_continuation_text.clone()),
        };
        let response = self.backends.reason(&request, &self.traj.id).await?;
        self.transcript.push(json!({ "request": request, "reply": response }));
        Ok(response)
    }

    async fn decide(&mut self) -> Result<Decision, Fail> {
        let mut last = VerdictError::NoActionFound;
        for attempt in 0..=self.config.parse_retries {
            let reply = self.consult(false).await?;
            let parsed = parse_verdict(&reply.raw_text).and_then(|v| match v.backtrack_to {
                Some(t) if self.traj.resolve_backtrack(t).is_err() => {
                    Err(VerdictError::BadBacktrackTarget(format!("Image #{t}")))
                }
                _ => Ok(v),
            });
            match parsed {
                Ok(v) => return Ok(Decision::Verdict(v)),
                Err(VerdictError::NoActionFound)
                    if reply.terminated && self.config.policy.mode == BudgetMode::ForceExact =>
                {
                    return Ok(Decision::Premature);
                }
                Err(e) => {
                    self.warnings.push(format!(
                        "round {}: unparseable reply (attempt {}): {e}",
                        self.traj.next_index(),
                        attempt + 1
                    ));
                    last = e;
                }
            }
        }
        Err(Fail::Parser(last))
    }

    fn push(&mut self, round: Round) -> Result<(), Fail> {
        self.traj.push_round(round)?;
        Ok(())
    }

    /// Edits the current image; may discard the result or trigger a reset.
    async fn apply_edit(
        &mut self,
        instruction: String,
        verdict: Option<Verdict>,
        think: String,
        forced: bool,
    ) -> Result<(), Fail> {
        let input = self
            .traj
            .current_image()
            .cloned()
            .expect("round 1 always produces an image");
        let output = self.edit(&input, &instruction).await?;
        if let Some(w) = verdict.as_ref().and_then(Verdict::word_count_warning) {
            self.warnings.push(format!("round {}: {w}", self.traj.next_index()));
        }
        if self.config.needs_distance() {
            let d = self.backends.distance(&input, &output, &self.traj.id).await?;
            if let Some(tau) = self.config.skip_min_change {
                if d < tau {
                    if self.skips < self.config.max_skips.unwrap_or(self.config.policy.c) {
                        self.skips += 1;
                        self.skipped.push(json!({
                            "after_round": self.traj.next_index() - 1,
                            "distance": d,
                            "image": output.digest,
                            "instruction": instruction,
                        }));
                        return Ok(());
                    }
                    self.warnings.push(format!(
                        "round {}: kept a low-change edit (distance {d}) because the skip limit was reached",
                        self.traj.next_index()
                    ));
                }
            }
            if self.config.reset_enabled {
                if d < self.config.reset_threshold {
                    self.low_change_streak += 1;
                } else {
                    self.low_change_streak = 0;
                }
            }
        }
        let index = self.traj.next_index();
        let mut round = if forced {
            Round::forced_edit(index, input, output, instruction)
        } else {
            Round::edit(index, input, output, instruction)
        }
        .with_think(think);
        if let Some(v) = verdict {
            round = round.with_verdict(v);
        }
        self.push(round)?;
        if self.config.reset_enabled && self.low_change_streak >= self.config.reset_after && self.budget_left() {
            self.reset().await?;
        }
        Ok(())
    }

    async fn reset(&mut self) -> Result<(), Fail> {
        let todo = self
            .traj
            .ledger_history
            .last()
            .map(|l| l.todo.clone())
            .unwrap_or_default();
        let prompt = if todo.is_empty() {
            self.user_prompt.to_string()
        } else {
            format!("{}\nStill missing: {}", self.user_prompt, todo.join("; "))
        };
        let output = self.generate(&prompt).await?;
        let index = self.traj.next_index();
        self.push(Round::reset(index, output))?;
        self.low_change_streak = 0;
        self.resets += 1;
        Ok(())
    }

    /// Overrides termination: ask again with termination suppressed and edit with the continuation.
    async fn force(&mut self, trigger: Option<Verdict>) -> Result<(), Fail> {
        let reply = self.consult(true).await?;
        let (think, _) = split_think(&reply.raw_text);
        let think = think.to_string();
        let (instruction, verdict) = match parse_verdict(&reply.raw_text) {
            Ok(v) if v.action == VerdictAction::EditImage => {
                (v.edit_instruction.clone().expect("edit has instruction"), Some(v))
            }
            _ => {
                let fallback = reply
                    .raw_text
                    .lines()
                    .rev()
                    .map(str::trim)
                    .find(|l| !l.is_empty())
                    .unwrap_or(&self.config.forced_continuation_text)
                    .to_string();
                self.warnings.push(format!(
                    "round {}: forced reply carried no edit decision, using its last line as the instruction",
                    self.traj.next_index()
                ));
                (fallback, trigger)
            }
        };
        self.apply_edit(instruction, verdict, think, true).await
    }

    async fn backtrack(&mut self, verdict: Verdict, think: String) -> Result<(), Fail> {
        let target = verdict.backtrack_to.expect("backtrack verdict has a target");
        if self.backtracks >= self.config.max_backtracks.unwrap_or(self.config.policy.c) {
            self.warnings.push(format!(
                "round {}: backtrack limit reached, editing the current image instead",
                self.traj.next_index()
            ));
            return match verdict.edit_instruction.clone() {
                Some(i) => self.apply_edit(i, Some(verdict), think, false).await,
                None => self.force(Some(verdict)).await,
            };
        }
        let restored = self.traj.resolve_backtrack(target)?;
        self.backtracks += 1;
        let instruction = verdict.edit_instruction.clone();
        let index = self.traj.next_index();
        self.push(
            Round::backtrack(index, restored)
                .with_verdict(verdict)
                .with_think(think),
        )?;
        if let Some(i) = instruction {
            if self.budget_left() {
                self.apply_edit(i, None, String::new(), false).await?;
            }
        }
        Ok(())
    }

    async fn run(&mut self, initial_prompt: &str, start_image: Option<ImageRef>) -> Result<TerminalStatus, Fail> {
        match start_image {
            Some(input) => {
                let output = self.edit(&input, initial_prompt).await?;
                self.push(Round::edit(1, input, output, initial_prompt))?;
            }
            None => {
                let output = self.generate(initial_prompt).await?;
                self.push(Round::initial(output))?;
            }
        }
        let mode = self.config.policy.mode;
        loop {
            if !self.budget_left() {
                return Ok(TerminalStatus::BudgetExhausted);
            }
            let verdict = match self.decide().await? {
                Decision::Premature => {
                    self.force(None).await?;
                    continue;
                }
                Decision::Verdict(v) => v,
            };
            let think = split_think(&verdict.raw_text).0.to_string();
            match verdict.action {
                VerdictAction::SatisfiedComplete if mode == BudgetMode::ForceExact => self.force(Some(verdict)).await?,
                VerdictAction::SatisfiedComplete => return Ok(TerminalStatus::SatisfiedComplete),
                VerdictAction::EditImage => {
                    let instruction = verdict.edit_instruction.clone().expect("edit has instruction");
                    self.apply_edit(instruction, Some(verdict), think, false).await?
                }
                VerdictAction::BacktrackToImage => self.backtrack(verdict, think).await?,
            }
        }
    }

    fn finish(
        mut self,
        outcome: Result<TerminalStatus, Fail>,
        extra: BTreeMap<String, String>,
    ) -> Result<Trajectory, RunError> {
        let p = &mut self.traj.provenance;
        p.insert("seed".into(), self.config.seed.to_string());
        p.insert("policy".into(), self.config.policy.label());
        p.insert("template_version".into(), TEMPLATE_VERSION.into());
        p.insert("template_sha256".into(), template_sha256());
        p.insert("backends".into(), canonical_json(&self.backends.identities()));
        p.insert("guidance".into(), canonical_json(&self.config.guidance));
        p.insert("transcript".into(), canonical_json(&self.transcript));
        p.insert("images_charged".into(), self.generation_calls.to_string());
        let forced = self.traj.rounds.iter().filter(|r| r.forced).count();
        p.insert("forced_rounds".into(), forced.to_string());
        if !self.warnings.is_empty() {
            p.insert("warnings".into(), canonical_json(&self.warnings));
        }
        if !self.skipped.is_empty() {
            p.insert("skipped_rounds".into(), canonical_json(&self.skipped));
        }
        if self.resets > 0 {
            p.insert("resets".into(), self.resets.to_string());
        }
        p.extend(extra);
        match outcome {
            Ok(status) => {
                self.traj.terminal_status = status;
                Ok(self.traj)
            }
            Err(fail) => {
                self.traj.terminal_status = TerminalStatus::Error;
                let message = match &fail {
                    Fail::Backend(e) => e.to_string(),
                    Fail::Parser(e) => e.to_string(),
                    Fail::Invariant(e) => e.to_string(),
                };
                self.traj.provenance.insert("error".into(), message);
                let trajectory = Box::new(self.traj);
                Err(match fail {
                    Fail::Backend(error) => RunError::Backend { error, trajectory },
                    Fail::Parser(error) => RunError::Parser { error, trajectory },
                    Fail::Invariant(error) => RunError::Invariant { error, trajectory },
                })
            }
        }
    }
}

/// Runs one budgeted refinement trajectory for `user_prompt`.
pub async fn run_sequential(
    user_prompt: &str,
    config: &ControllerConfig,
    backends: &Backends,
) -> Result<Trajectory, RunError> {
    run_sequential_with(user_prompt, config, backends, RunOptions::default()).await
}

pub async fn run_sequential_with(
    user_prompt: &str,
    config: &ControllerConfig,
    backends: &Backends,
    options: RunOptions,
) -> Result<Trajectory, RunError> {
    config.validate().map_err(RunError::Precondition)?;
    if user_prompt.trim().is_empty() {
        return Err(RunError::Precondition("user prompt must not be empty".into()));
    }
    let mut roles = vec![BackendRole::Generator, BackendRole::Editor];
    if config.policy.c > 1 {
        roles.push(BackendRole::Reasoner);
    }
    if config.needs_distance() {
        roles.push(BackendRole::DistanceMetric);
    }
    backends
        .require(&roles)
        .map_err(|e| RunError::Precondition(e.to_string()))?;

    let id = options.id.unwrap_or_else(|| stable_id("seq", user_prompt, config.seed));
    let mut runner = Runner {
        backends,
        config,
        user_prompt,
        history: &options.history,
        traj: Trajectory::new(id, user_prompt),
        transcript: Vec::new(),
        warnings: Vec::new(),
        skipped: Vec::new(),
        generation_calls: 0,
        backtracks: 0,
        skips: 0,
        resets: 0,
        low_change_streak: 0,
    };
    let initial = options.initial_prompt.as_deref().unwrap_or(user_prompt);
    let outcome = runner.run(initial, options.start_image.clone()).await;
    tracing::info!(trajectory = %runner.traj.id, images = runner.traj.image_count(), ok = outcome.is_ok(), "sequential run finished");
    runner.finish(outcome, options.provenance)
}

/// Runs one trajectory per turn, each starting from the previous turn's answer
/// and seeing all earlier turns in its prompt.
pub async fn run_multi_turn(
    turns: &[String],
    config: &ControllerConfig,
    backends: &Backends,
) -> Result<Vec<Trajectory>, RunError> {
    if turns.is_empty() {
        return Err(RunError::Precondition("at least one turn is required".into()));
    }
    if config.policy.c > config.per_turn_cap {
        return Err(RunError::Precondition(format!(
            "budget {} exceeds the per-turn cap of {}",
            config.policy.c, config.per_turn_cap
        )));
    }
    let first_id = stable_id("seq", &turns[0], config.seed);
    let mut done: Vec<Trajectory> = Vec::with_capacity(turns.len());
    for (k, turn) in turns.iter().enumerate() {
        let mut options = RunOptions {
            history: done.clone(),
            ..RunOptions::default()
        };
        let mut turn_config = config.clone();
        if k == 0 {
            options.id = Some(first_id.clone());
        } else {
            options.id = Some(format!("{first_id}-turn{}", k + 1));
            options.start_image = done[k - 1].final_image().cloned();
            options.provenance.insert("turn".into(), (k + 1).to_string());
            turn_config.seed = derive_seed(config.seed, &["turn", &k.to_string()]);
        }
        let traj = run_sequential_with(turn, &turn_config, backends, options).await?;
        done.push(traj);
    }
    Ok(done)
}
