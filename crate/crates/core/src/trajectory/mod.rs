//! Multi-round multimodal chain-of-thought trajectories.
//!
//! A [`Trajectory`] is the ordered record of one task: the initial generation,
//! every reasoning round with its parsed verdict, the edits and backtracks it
//! triggered, and the feature ledgers the reasoner reported along the way.
//! Trajectories are plain values; controllers build them through
//! [`Trajectory::push_round`], which enforces the chaining rules on every append.

mod codec;
mod stats;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verdict::Verdict;

pub use codec::{append_line, canonical_json, deserialize, read_jsonl, serialize, write_jsonl};
pub use stats::{round_statistics, RoundStats};

/// Length of a hex-encoded SHA-256 digest.
pub const DIGEST_HEX_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("round {index}: input image {found:?} does not continue the chain (expected {expected:?})")]
    ChainingViolation {
        index: u32,
        expected: Option<String>,
        found: Option<String>,
    },
    #[error("round index {found} out of sequence (expected {expected})")]
    IndexViolation { expected: u32, found: u32 },
    #[error("round {index}: {reason}")]
    RoundInvariant { index: u32, reason: String },
    #[error("no round {0} in trajectory")]
    NoSuchRound(u32),
    #[error("round {0} has no output image")]
    NoImageAtRound(u32),
    #[error("feature {0:?} is listed as both satisfied and todo")]
    LedgerOverlap(String),
    #[error("invalid image digest {0:?}")]
    BadDigest(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
}

impl TrajectoryError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        TrajectoryError::SchemaViolation {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Content-addressed handle to image bytes in the blob store.
///
/// Equality and hashing consider only the digest.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "RawImageRef")]
pub struct ImageRef {
    pub digest: String,
    pub media_type: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImageRef {
    digest: String,
    media_type: String,
}

impl TryFrom<RawImageRef> for ImageRef {
    type Error = TrajectoryError;

    fn try_from(raw: RawImageRef) -> Result<Self, Self::Error> {
        ImageRef::new(raw.digest, raw.media_type)
    }
}

impl ImageRef {
    pub fn new(digest: impl Into<String>, media_type: impl Into<String>) -> Result<Self, TrajectoryError> {
        let digest = digest.into();
        if !is_valid_digest(&digest) {
            return Err(TrajectoryError::BadDigest(digest));
        }
        Ok(ImageRef {
            digest,
            media_type: media_type.into(),
        })
    }

    /// Short prefix for logs.
    pub fn short(&self) -> &str {
        &self.digest[..12]
    }
}

pub fn is_valid_digest(digest: &str) -> bool {
    digest.len() == DIGEST_HEX_LEN && digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl Eq for ImageRef {}

impl std::hash::Hash for ImageRef {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.digest.hash(state);
    }
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageRef({}, {})", self.short(), self.media_type)
    }
}

/// Satisfied and outstanding features reported by the reasoner for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLedger")]
pub struct FeatureLedger {
    pub satisfied: Vec<String>,
    pub todo: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLedger {
    satisfied: Vec<String>,
    todo: Vec<String>,
}

impl TryFrom<RawLedger> for FeatureLedger {
    type Error = TrajectoryError;

    fn try_from(raw: RawLedger) -> Result<Self, Self::Error> {
        FeatureLedger::new(raw.satisfied, raw.todo)
    }
}

/// Normal form used for ledger comparisons: trimmed and case-folded.
pub fn normalize_feature(s: &str) -> String {
    s.trim().to_lowercase()
}

impl FeatureLedger {
    pub fn new(satisfied: Vec<String>, todo: Vec<String>) -> Result<Self, TrajectoryError> {
        let done: std::collections::HashSet<String> = satisfied.iter().map(|s| normalize_feature(s)).collect();
        if let Some(dup) = todo.iter().find(|t| done.contains(&normalize_feature(t))) {
            return Err(TrajectoryError::LedgerOverlap(dup.clone()));
        }
        Ok(FeatureLedger { satisfied, todo })
    }

    pub fn is_empty(&self) -> bool {
        self.satisfied.is_empty() && self.todo.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundAction {
    InitialGenerate,
    Edit,
    Backtrack,
    ForcedEdit,
    Reset,
}

impl RoundAction {
    /// Whether this action produces a freshly generated image.
    pub fn generates_image(self) -> bool {
        !matches!(self, RoundAction::Backtrack)
    }

    pub fn is_edit(self) -> bool {
        matches!(self, RoundAction::Edit | RoundAction::ForcedEdit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Round {
    pub index: u32,
    pub think_text: String,
    pub verdict: Option<Verdict>,
    pub action_taken: RoundAction,
    pub input_image: Option<ImageRef>,
    pub output_image: Option<ImageRef>,
    pub edit_instruction: Option<String>,
    pub forced: bool,
}

impl Round {
    pub fn initial(output: ImageRef) -> Self {
        Round {
            index: 1,
            think_text: String::new(),
            verdict: None,
            action_taken: RoundAction::InitialGenerate,
            input_image: None,
            output_image: Some(output),
            edit_instruction: None,
            forced: false,
        }
    }

    pub fn edit(index: u32, input: ImageRef, output: ImageRef, instruction: impl Into<String>) -> Self {
        Round {
            index,
            think_text: String::new(),
            verdict: None,
            action_taken: RoundAction::Edit,
            input_image: Some(input),
            output_image: Some(output),
            edit_instruction: Some(instruction.into()),
            forced: false,
        }
    }

    pub fn forced_edit(index: u32, input: ImageRef, output: ImageRef, instruction: impl Into<String>) -> Self {
        Round {
            action_taken: RoundAction::ForcedEdit,
            forced: true,
            ..Round::edit(index, input, output, instruction)
        }
    }

    pub fn backtrack(index: u32, restored: ImageRef) -> Self {
        Round {
            index,
            think_text: String::new(),
            verdict: None,
            action_taken: RoundAction::Backtrack,
            input_image: None,
            output_image: Some(restored),
            edit_instruction: None,
            forced: false,
        }
    }

    pub fn reset(index: u32, output: ImageRef) -> Self {
        Round {
            index,
            think_text: String::new(),
            verdict: None,
            action_taken: RoundAction::Reset,
            input_image: None,
            output_image: Some(output),
            edit_instruction: None,
            forced: false,
        }
    }

    pub fn with_verdict(mut self, verdict: Verdict) -> Self {
        self.verdict = Some(verdict);
        self
    }

    pub fn with_think(mut self, think: impl Into<String>) -> Self {
        self.think_text = think.into();
        self
    }

    fn check_shape(&self) -> Result<(), TrajectoryError> {
        let fail = |reason: &str| {
            Err(TrajectoryError::RoundInvariant {
                index: self.index,
                reason: reason.to_string(),
            })
        };
        if self.index == 0 {
            return fail("round indices are 1-based");
        }
        if self.forced != (self.action_taken == RoundAction::ForcedEdit) {
            return fail("forced flag must be set exactly on forced edits");
        }
        match self.action_taken {
            RoundAction::InitialGenerate => {
                if self.index != 1 || self.input_image.is_some() {
                    return fail("initial generation must be round 1 without an input image");
                }
                if self.output_image.is_none() {
                    return fail("initial generation must produce an image");
                }
            }
            RoundAction::Edit | RoundAction::ForcedEdit => {
                if self.edit_instruction.is_none() || self.output_image.is_none() || self.input_image.is_none() {
                    return fail("edit rounds need an input image, an instruction and an output image");
                }
            }
            RoundAction::Backtrack => {
                if self.output_image.is_none() {
                    return fail("backtrack rounds must name the restored image");
                }
            }
            RoundAction::Reset => {
                if self.output_image.is_none() || self.input_image.is_some() {
                    return fail("reset rounds regenerate from scratch");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalStatus {
    SatisfiedComplete,
    BudgetExhausted,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub id: String,
    pub user_prompt: String,
    pub rounds: Vec<Round>,
    pub ledger_history: Vec<FeatureLedger>,
    pub terminal_status: TerminalStatus,
    pub provenance: BTreeMap<String, String>,
}

impl Trajectory {
    /// An empty trajectory. Its status stays `Error` until a controller finishes it.
    pub fn new(id: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Trajectory {
            id: id.into(),
            user_prompt: user_prompt.into(),
            rounds: Vec::new(),
            ledger_history: Vec::new(),
            terminal_status: TerminalStatus::Error,
            provenance: BTreeMap::new(),
        }
    }

    /// Value-semantics append: returns a new trajectory, leaving `self` untouched.
    pub fn append_round(&self, round: Round) -> Result<Trajectory, TrajectoryError> {
        let mut next = self.clone();
        next.push_round(round)?;
        Ok(next)
    }

    pub fn push_round(&mut self, round: Round) -> Result<(), TrajectoryError> {
        let expected = self.next_index();
        if round.index != expected {
            return Err(TrajectoryError::IndexViolation {
                expected,
                found: round.index,
            });
        }
        round.check_shape()?;
        self.check_link(&round, self.rounds.len())?;
        if let Some(v) = &round.verdict {
            self.ledger_history.push(v.ledger.clone());
        }
        self.rounds.push(round);
        Ok(())
    }

    pub fn next_index(&self) -> u32 {
        self.rounds.last().map_or(1, |r| r.index + 1)
    }

    /// Image the next edit must start from: the most recent output in the chain.
    pub fn current_image(&self) -> Option<&ImageRef> {
        self.rounds.iter().rev().find_map(|r| r.output_image.as_ref())
    }

    /// The trajectory's answer: the last image in the chain.
    pub fn final_image(&self) -> Option<&ImageRef> {
        self.current_image()
    }

    /// Number of freshly generated images. Backtracks reuse an image and are not counted.
    pub fn image_count(&self) -> usize {
        self.rounds.iter().filter(|r| r.action_taken.generates_image()).count()
    }

    /// Rounds charged against a budget, optionally counting backtracks.
    pub fn budget_rounds(&self, count_backtracks: bool) -> usize {
        if count_backtracks {
            self.rounds.iter().filter(|r| r.output_image.is_some()).count()
        } else {
            self.image_count()
        }
    }

    /// Distinct generated images in chain order.
    pub fn generated_images(&self) -> Vec<&ImageRef> {
        self.rounds
            .iter()
            .filter(|r| r.action_taken.generates_image())
            .filter_map(|r| r.output_image.as_ref())
            .collect()
    }

    pub fn round(&self, index: u32) -> Option<&Round> {
        self.rounds.iter().find(|r| r.index == index)
    }

    pub fn resolve_backtrack(&self, target_round: u32) -> Result<ImageRef, TrajectoryError> {
        let round = self
            .round(target_round)
            .ok_or(TrajectoryError::NoSuchRound(target_round))?;
        round
            .output_image
            .clone()
            .ok_or(TrajectoryError::NoImageAtRound(target_round))
    }

    fn check_link(&self, round: &Round, position: usize) -> Result<(), TrajectoryError> {
        let prior = &self.rounds[..position];
        match round.action_taken {
            RoundAction::Edit | RoundAction::ForcedEdit => {
                // The first round may edit an externally supplied image.
                let Some(head) = prior.iter().rev().find_map(|r| r.output_image.as_ref()) else {
                    return Ok(());
                };
                if round.input_image.as_ref() != Some(head) {
                    return Err(TrajectoryError::ChainingViolation {
                        index: round.index,
                        expected: Some(head.digest.clone()),
                        found: round.input_image.as_ref().map(|i| i.digest.clone()),
                    });
                }
            }
            RoundAction::Backtrack => {
                let target = round.output_image.as_ref();
                if !prior.iter().any(|r| r.output_image.as_ref() == target) {
                    return Err(TrajectoryError::RoundInvariant {
                        index: round.index,
                        reason: "backtrack target is not an earlier output".into(),
                    });
                }
            }
            RoundAction::InitialGenerate | RoundAction::Reset => {}
        }
        Ok(())
    }

    /// Checks every structural invariant. Used after deserialization and splicing.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut last = 0;
        for (pos, round) in self.rounds.iter().enumerate() {
            if round.index <= last {
                return Err(TrajectoryError::IndexViolation {
                    expected: last + 1,
                    found: round.index,
                });
            }
            last = round.index;
            round.check_shape()?;
            self.check_link(round, pos)?;
        }
        let ledgers: Vec<&FeatureLedger> = self
            .rounds
            .iter()
            .filter_map(|r| r.verdict.as_ref().map(|v| &v.ledger))
            .collect();
        if ledgers.len() != self.ledger_history.len() || ledgers.iter().zip(&self.ledger_history).any(|(a, b)| *a != b)
        {
            return Err(TrajectoryError::schema(
                "ledger_history",
                "must list the ledger of every round carrying a verdict, in order",
            ));
        }
        Ok(())
    }

    /// Removes one round and relinks the chain so the following edit starts from
    /// the removed round's input. Indices are renumbered to stay contiguous.
    pub fn splice_round(&self, index: u32) -> Result<Trajectory, TrajectoryError> {
        let pos = self
            .rounds
            .iter()
            .position(|r| r.index == index)
            .ok_or(TrajectoryError::NoSuchRound(index))?;
        let removed = &self.rounds[pos];
        let mut rounds = self.rounds.clone();
        rounds.remove(pos);
        if let (Some(removed_out), Some(next)) = (removed.output_image.as_ref(), rounds.get_mut(pos)) {
            if next.action_taken.is_edit() && next.input_image.as_ref() == Some(removed_out) {
                next.input_image = removed.input_image.clone();
            }
        }
        for (i, r) in rounds.iter_mut().enumerate() {
            r.index = i as u32 + 1;
        }
        let mut out = Trajectory {
            rounds,
            ledger_history: Vec::new(),
            ..self.clone()
        };
        out.ledger_history = out
            .rounds
            .iter()
            .filter_map(|r| r.verdict.as_ref().map(|v| v.ledger.clone()))
            .collect();
        out.validate()?;
        Ok(out)
    }
}
