//! Reasoner prompt rendering and structured reply parsing.
//!
//! The reasoner is driven by a fixed evaluation template (shipped under
//! `assets/`). Its reply ends with a decision block:
//!
//! ```text
//! ACTION: EDIT_IMAGE
//! EDIT_INSTRUCTION: remove all books from the shelves
//! SATISFIED: shelf present
//! TODO: picture frames
//! ```
//!
//! Parsing is line oriented. Only the last `ACTION:` line counts, because the
//! free-form reasoning above it may talk about actions before committing to one.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob_store::sha256_hex;
use crate::trajectory::{normalize_feature, FeatureLedger, Trajectory};

pub const REASON_TEMPLATE: &str = include_str!("../assets/reason_prompt.v1.txt");
pub const DECOMPOSE_TEMPLATE: &str = include_str!("../assets/decompose_prompt.v1.txt");
pub const QUALITY_TEMPLATE: &str = include_str!("../assets/quality_score_prompt.v1.txt");
pub const AUTHOR_TEMPLATE: &str = include_str!("../assets/author_prompt.v1.txt");
pub const TEMPLATE_VERSION: &str = "reason_prompt.v1";

const PREVIOUS_IMAGES_PLACEHOLDER: &str = "[Previous images information with satisfied/TODO features]";

pub const MIN_INSTRUCTION_WORDS: usize = 5;
pub const MAX_INSTRUCTION_WORDS: usize = 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerdictError {
    #[error("no ACTION line found in reply")]
    NoActionFound,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("action is missing required field {0}")]
    MissingField(&'static str),
    #[error("cannot read backtrack target {0:?}")]
    BadBacktrackTarget(String),
    #[error("cannot read score {0:?}")]
    BadScore(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictAction {
    EditImage,
    BacktrackToImage,
    SatisfiedComplete,
}

impl VerdictAction {
    pub fn keyword(self) -> &'static str {
        match self {
            VerdictAction::EditImage => "EDIT_IMAGE",
            VerdictAction::BacktrackToImage => "BACKTRACK_TO_IMAGE",
            VerdictAction::SatisfiedComplete => "SATISFIED_COMPLETE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub action: VerdictAction,
    pub edit_instruction: Option<String>,
    pub backtrack_to: Option<u32>,
    pub ledger: FeatureLedger,
    pub raw_text: String,
}

impl Verdict {
    pub fn instruction_word_count(&self) -> Option<usize> {
        self.edit_instruction.as_deref().map(|s| s.split_whitespace().count())
    }

    /// Advisory check of the 5-18 word instruction bound.
    pub fn word_count_warning(&self) -> Option<String> {
        let n = self.instruction_word_count()?;
        if (MIN_INSTRUCTION_WORDS..=MAX_INSTRUCTION_WORDS).contains(&n) {
            None
        } else {
            Some(format!(
                "edit instruction has {n} words, outside [{MIN_INSTRUCTION_WORDS}, {MAX_INSTRUCTION_WORDS}]"
            ))
        }
    }
}

pub fn template_sha256() -> String {
    sha256_hex(REASON_TEMPLATE.as_bytes())
}

/// Renders the evaluation prompt for the current state of `traj`.
pub fn render_reason_prompt(user_prompt: &str, traj: &Trajectory) -> String {
    render_with_history(user_prompt, &[], traj)
}

/// Like [`render_reason_prompt`], additionally carrying earlier turns of a
/// multi-turn session (their requests, final images and reasoning).
pub fn render_with_history(user_prompt: &str, history: &[Trajectory], traj: &Trajectory) -> String {
    let mut block = String::new();
    if !history.is_empty() {
        block.push_str("Previous turns:\n");
        for (t, turn) in history.iter().enumerate() {
            let final_round = turn
                .rounds
                .iter()
                .rev()
                .find(|r| r.output_image.is_some())
                .map_or(0, |r| r.index);
            block.push_str(&format!(
                "- Turn {} request: {} | final image: Turn {} Image #{}\n",
                t + 1,
                turn.user_prompt,
                t + 1,
                final_round
            ));
            for r in turn.rounds.iter().filter(|r| !r.think_text.trim().is_empty()) {
                block.push_str(&format!("  Round {} reasoning: {}\n", r.index, one_line(&r.think_text)));
            }
        }
    }
    let evaluated = evaluated_ledgers(traj);
    if !evaluated.is_empty() {
        block.push_str("Previous images:\n");
        for (index, ledger) in &evaluated {
            block.push_str(&format!(
                "- Image #{index} | satisfied: {} | todo: {}\n",
                list_or_none(&ledger.satisfied),
                list_or_none(&ledger.todo)
            ));
        }
    }
    let block = block.trim_end_matches('\n');
    let with_block = if block.is_empty() {
        REASON_TEMPLATE.replace(&format!("{PREVIOUS_IMAGES_PLACEHOLDER}\n"), "")
    } else {
        REASON_TEMPLATE.replace(PREVIOUS_IMAGES_PLACEHOLDER, block)
    };
    with_block.replace("{user_prompt}", user_prompt)
}

/// Maps each image (by the round that produced it) to the ledger of the verdict
/// that evaluated it. A verdict evaluates the image current when it was issued.
fn evaluated_ledgers(traj: &Trajectory) -> BTreeMap<u32, &FeatureLedger> {
    let mut out = BTreeMap::new();
    let mut current: Option<u32> = None;
    for r in &traj.rounds {
        if let (Some(v), Some(cur)) = (&r.verdict, current) {
            out.insert(cur, &v.ledger);
        }
        if r.output_image.is_some() {
            current = Some(r.index);
        }
    }
    out
}

fn list_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.join("; ")
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips markdown emphasis and returns the value if `line` starts with `key:`.
fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let t = line.trim_start().trim_start_matches(['*', '`', '#', '-', ' ']);
    let head = t.get(..key.len() + 1)?;
    if head.eq_ignore_ascii_case(&format!("{key}:")) {
        Some(t[key.len() + 1..].trim().trim_matches(['*', '`']).trim())
    } else {
        None
    }
}

/// Splits a reply into its reasoning and its decision block (starting at the last `ACTION:` line).
pub fn split_think(raw: &str) -> (&str, Option<&str>) {
    let mut offset = 0;
    let mut last = None;
    for line in raw.split_inclusive('\n') {
        if field(line, "ACTION").is_some() {
            last = Some(offset);
        }
        offset += line.len();
    }
    match last {
        Some(at) => (raw[..at].trim_end_matches(['\n', '\r']), Some(&raw[at..])),
        None => (raw, None),
    }
}

fn split_items(value: &str) -> Vec<String> {
    let v = value.trim();
    let v = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')).unwrap_or(v);
    v.split([',', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("none"))
        .map(String::from)
        .collect()
}

fn backtrack_target(value: &str) -> Result<u32, VerdictError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r#"(?i)^\[?"?\s*(?:image\s*)?#?\s*(\d+)\s*"?\]?\.?$"#).unwrap());
    re.captures(value.trim())
        .and_then(|c| c[1].parse::<u32>().ok())
        .filter(|n| *n >= 1)
        .ok_or_else(|| VerdictError::BadBacktrackTarget(value.to_string()))
}

pub fn parse_verdict(raw_text: &str) -> Result<Verdict, VerdictError> {
    let (_, decision) = split_think(raw_text);
    let decision = decision.ok_or(VerdictError::NoActionFound)?;
    let mut lines = decision.lines();
    let action_value = lines.next().and_then(|l| field(l, "ACTION")).unwrap_or_default();
    let action = match action_value.to_ascii_uppercase().as_str() {
        "EDIT_IMAGE" => VerdictAction::EditImage,
        "BACKTRACK_TO_IMAGE" => VerdictAction::BacktrackToImage,
        "SATISFIED_COMPLETE" => VerdictAction::SatisfiedComplete,
        _ => return Err(VerdictError::UnknownAction(action_value.to_string())),
    };

    let (mut instruction, mut target, mut satisfied, mut todo) = (None, None, None, None);
    for line in lines {
        if let Some(v) = field(line, "EDIT_INSTRUCTION") {
            instruction.get_or_insert(v);
        } else if let Some(v) = field(line, "BACKTRACK_TO") {
            target.get_or_insert(v);
        } else if let Some(v) = field(line, "SATISFIED") {
            satisfied.get_or_insert(v);
        } else if let Some(v) = field(line, "TODO") {
            todo.get_or_insert(v);
        }
    }
    let instruction = instruction.filter(|s| !s.is_empty()).map(String::from);
    let satisfied = satisfied.map(split_items).unwrap_or_default();
    let mut todo = match action {
        VerdictAction::SatisfiedComplete => Vec::new(),
        _ => todo.map(split_items).unwrap_or_default(),
    };
    let done: std::collections::HashSet<String> = satisfied.iter().map(|s| normalize_feature(s)).collect();
    todo.retain(|t| !done.contains(&normalize_feature(t)));
    let ledger = FeatureLedger::new(satisfied, todo).expect("overlap removed above");

    let (edit_instruction, backtrack_to) = match action {
        VerdictAction::EditImage => (
            Some(instruction.ok_or(VerdictError::MissingField("EDIT_INSTRUCTION"))?),
            None,
        ),
        VerdictAction::BacktrackToImage => {
            let t = target.ok_or(VerdictError::MissingField("BACKTRACK_TO"))?;
            (instruction, Some(backtrack_target(t)?))
        }
        VerdictAction::SatisfiedComplete => (None, None),
    };
    Ok(Verdict {
        action,
        edit_instruction,
        backtrack_to,
        ledger,
        raw_text: raw_text.to_string(),
    })
}

/// Writes a reply in the template's decision grammar. Used by mock reasoners and tests.
pub fn emit_verdict_text(
    think: &str,
    action: VerdictAction,
    edit_instruction: Option<&str>,
    backtrack_to: Option<u32>,
    ledger: &FeatureLedger,
) -> String {
    let mut out = String::new();
    if !think.is_empty() {
        out.push_str(think);
        out.push('\n');
    }
    out.push_str(&format!("ACTION: {}\n", action.keyword()));
    if let Some(t) = backtrack_to {
        out.push_str(&format!("BACKTRACK_TO: Image #{t}\n"));
    }
    if let Some(i) = edit_instruction {
        out.push_str(&format!("EDIT_INSTRUCTION: {i}\n"));
    }
    if !ledger.satisfied.is_empty() {
        out.push_str(&format!("SATISFIED: {}\n", ledger.satisfied.join(", ")));
    }
    if action != VerdictAction::SatisfiedComplete && !ledger.todo.is_empty() {
        out.push_str(&format!("TODO: {}\n", ledger.todo.join(", ")));
    }
    out
}

pub fn render_decompose_prompt(user_prompt: &str) -> String {
    DECOMPOSE_TEMPLATE.replace("{user_prompt}", user_prompt)
}

/// Reads a decomposition reply. `Ok(None)` means the prompt is not complex.
pub fn parse_decomposition(raw: &str) -> Result<Option<Vec<String>>, VerdictError> {
    static ITEM: OnceLock<Regex> = OnceLock::new();
    let item = ITEM.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*])\s+(.+?)\s*$").unwrap());
    let mut complex = None;
    let mut in_list = false;
    let mut subgoals = Vec::new();
    for line in raw.lines() {
        if let Some(v) = field(line, "COMPLEX") {
            complex = Some(v.to_ascii_uppercase().starts_with("YES"));
            in_list = false;
        } else if let Some(v) = field(line, "SUBGOALS") {
            in_list = true;
            subgoals.extend(split_items(v));
        } else if in_list {
            match item.captures(line) {
                Some(c) => subgoals.push(c[1].to_string()),
                None if line.trim().is_empty() => {}
                None => in_list = false,
            }
        }
    }
    match complex {
        None => Err(VerdictError::MissingField("COMPLEX")),
        Some(false) => Ok(None),
        Some(true) if subgoals.is_empty() => Err(VerdictError::MissingField("SUBGOALS")),
        Some(true) => Ok(Some(subgoals)),
    }
}

pub fn render_quality_prompt(user_prompt: &str) -> String {
    QUALITY_TEMPLATE.replace("{user_prompt}", user_prompt)
}

/// Reads the last `SCORE:` line of a quality reply; the score must lie in [0, 1].
pub fn parse_score(raw: &str) -> Result<f64, VerdictError> {
    let value = raw
        .lines()
        .rev()
        .find_map(|l| field(l, "SCORE"))
        .ok_or(VerdictError::MissingField("SCORE"))?;
    match value.parse::<f64>() {
        Ok(s) if (0.0..=1.0).contains(&s) => Ok(s),
        _ => Err(VerdictError::BadScore(value.to_string())),
    }
}

pub fn render_author_brief(variation: u64) -> String {
    AUTHOR_TEMPLATE.replace("{variation}", &variation.to_string())
}
