//! Teacher data collection: author prompts, then run the reflect-and-refine
//! loop per prompt until the reasoner is satisfied or the round cap is hit.
//!
//! Batch runs append each finished trajectory as soon as it completes and
//! rewrite the file in prompt order at the end, so an interrupted batch can be
//! resumed: ids already present in the output are not recomputed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{derive_seed, run_sequential_with, BudgetPolicy, ControllerConfig, RunError, RunOptions};
use crate::fsutil::write_atomic;
use crate::guidance::GuidanceConfig;
use crate::protocol::{BackendError, BackendRole, Backends, JudgeRequest, JudgeTask, ReasonRequest};
use crate::trajectory::{
    append_line, canonical_json, deserialize, round_statistics, write_jsonl, RoundStats, Trajectory,
};
use crate::verdict::{parse_decomposition, render_author_brief, render_decompose_prompt};

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub max_rounds: u32,
    pub prompt_count: u32,
    pub complex_prompt_decomposition: bool,
    pub seed: u64,
    pub concurrency: usize,
    /// Authoring calls allowed per requested prompt before giving up.
    pub attempts_per_prompt: u32,
    pub guidance: GuidanceConfig,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            max_rounds: 8,
            prompt_count: 20_000,
            complex_prompt_decomposition: false,
            seed: 0,
            concurrency: 8,
            attempts_per_prompt: 3,
            guidance: GuidanceConfig::default(),
            width: 1024,
            height: 1024,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.max_rounds == 0 {
            return Err(SynthesisError::Precondition("max_rounds must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(SynthesisError::Precondition("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    fn controller(&self, seed: u64) -> ControllerConfig {
        ControllerConfig {
            policy: BudgetPolicy::early_stop(self.max_rounds),
            seed,
            guidance: self.guidance,
            width: self.width,
            height: self.height,
            ..ControllerConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("only {got} distinct prompts after {attempts} authoring attempts, wanted {wanted}")]
    InsufficientUnique { wanted: u32, got: u32, attempts: u32 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    pub prompt: String,
    pub seed: u64,
}

impl PromptRecord {
    /// Record `index` of a run seeded with `seed`.
    pub fn new(index: usize, prompt: impl Into<String>, seed: u64) -> Self {
        let id = format!("p{index:05}");
        let seed = derive_seed(seed, &["trajectory", &id]);
        PromptRecord {
            id,
            prompt: prompt.into(),
            seed,
        }
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Asks the judge to author `prompt_count` distinct prompts.
pub async fn synthesize_prompts(
    config: &SynthesisConfig,
    backends: &Backends,
) -> Result<Vec<PromptRecord>, SynthesisError> {
    config.validate()?;
    backends
        .require(&[BackendRole::Judge])
        .map_err(|e| SynthesisError::Precondition(e.to_string()))?;
    let wanted = config.prompt_count;
    let attempts = wanted.saturating_mul(config.attempts_per_prompt.max(1));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    // Sequential on purpose: scripted authors answer in call order.
    for attempt in 0..attempts {
        if out.len() as u32 == wanted {
            break;
        }
        let variation = derive_seed(config.seed, &["prompt", &attempt.to_string()]);
        let request = JudgeRequest {
            original_prompt: render_author_brief(variation),
            edit_instruction: String::new(),
            task: Some(JudgeTask::AuthorPrompt),
        };
        let reply = backends.judge(&request, "prompt-authoring").await?;
        let text = normalize_whitespace(reply.text.as_deref().unwrap_or_default());
        if text.is_empty() || !seen.insert(text.clone()) {
            continue;
        }
        out.push(PromptRecord::new(out.len(), text, config.seed));
    }
    if (out.len() as u32) < wanted {
        return Err(SynthesisError::InsufficientUnique {
            wanted,
            got: out.len() as u32,
            attempts,
        });
    }
    Ok(out)
}

pub fn write_prompts(path: &Path, records: &[PromptRecord]) -> std::io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&canonical_json(r));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>, SynthesisError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SynthesisError::Data(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Runs the refinement loop for one prompt. Backend failures yield an `Error`
/// trajectory rather than an error, so batches keep them for auditing.
pub async fn synthesize_trajectory(
    record: &PromptRecord,
    config: &SynthesisConfig,
    backends: &Backends,
) -> Result<Trajectory, SynthesisError> {
    config.validate()?;
    let controller = config.controller(record.seed);
    let mut options = RunOptions {
        id: Some(record.id.clone()),
        ..RunOptions::default()
    };
    options.provenance.insert("pipeline".into(), "synthesis".into());

    if config.complex_prompt_decomposition {
        backends
            .require(&[BackendRole::Reasoner])
            .map_err(|e| SynthesisError::Precondition(e.to_string()))?;
        let request = ReasonRequest {
            rendered_prompt: render_decompose_prompt(&record.prompt),
            image_refs: Vec::new(),
            suppress_termination: false,
            forced_continuation: None,
        };
        match backends.reason(&request, &record.id).await {
            Ok(reply) => {
                options
                    .provenance
                    .insert("decomposition".into(), reply.raw_text.clone());
                match parse_decomposition(&reply.raw_text) {
                    Ok(Some(subgoals)) => {
                        options.initial_prompt = Some(subgoals[0].clone());
                        options.provenance.insert("subgoals".into(), canonical_json(&subgoals));
                    }
                    Ok(None) => {
                        options.provenance.insert("subgoals".into(), "[]".into());
                    }
                    Err(e) => {
                        options.provenance.insert("decomposition_error".into(), e.to_string());
                    }
                }
            }
            Err(e) => {
                let mut t = Trajectory::new(record.id.clone(), record.prompt.clone());
                t.provenance = options.provenance;
                t.provenance.insert("seed".into(), record.seed.to_string());
                t.provenance.insert("error".into(), e.to_string());
                return Ok(t);
            }
        }
    }

    match run_sequential_with(&record.prompt, &controller, backends, options).await {
        Ok(t) => Ok(t),
        Err(RunError::Precondition(msg)) => Err(SynthesisError::Precondition(msg)),
        Err(e) => {
            tracing::warn!(id = %record.id, error = %e, "synthesis trajectory failed");
            Ok(e.into_trajectory().expect("post-start failures carry the trajectory"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub trajectories_path: PathBuf,
    pub stats_path: PathBuf,
    pub stats: RoundStats,
    /// Trajectories computed in this run (the rest were already present).
    pub computed: usize,
    pub reused: usize,
}

/// Reads whatever complete trajectories an earlier run left behind. A torn
/// last line from an interrupted run is ignored.
fn existing(path: &Path) -> Result<BTreeMap<String, Trajectory>, SynthesisError> {
    let mut out = BTreeMap::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match deserialize(line) {
            Ok(t) => {
                out.insert(t.id.clone(), t);
            }
            Err(e) => tracing::warn!(error = %e, "ignoring unreadable line in existing output"),
        }
    }
    Ok(out)
}

pub async fn run_batch(
    prompts: &[PromptRecord],
    config: &SynthesisConfig,
    backends: &Backends,
    out_dir: &Path,
) -> Result<BatchResult, SynthesisError> {
    if prompts.is_empty() {
        return Err(SynthesisError::Precondition("prompt list is empty".into()));
    }
    config.validate()?;
    backends
        .require(&[BackendRole::Generator, BackendRole::Editor, BackendRole::Reasoner])
        .map_err(|e| SynthesisError::Precondition(e.to_string()))?;
    std::fs::create_dir_all(out_dir)?;
    let trajectories_path = out_dir.join(TRAJECTORIES_FILE);
    let mut done = existing(&trajectories_path)?;
    let todo: Vec<&PromptRecord> = prompts.iter().filter(|p| !done.contains_key(&p.id)).collect();
    let reused = prompts.len() - todo.len();

    let mut file = OpenOptions::new().create(true).append(true).open(&trajectories_path)?;
    let mut results = stream::iter(todo.iter().map(|p| synthesize_trajectory(p, config, backends)))
        .buffer_unordered(config.concurrency);
    let mut computed = 0;
    while let Some(r) = results.next().await {
        let t = r?;
        append_line(&mut file, &t)?;
        done.insert(t.id.clone(), t);
        computed += 1;
    }
    drop(results);
    drop(file);

    let ordered: Vec<Trajectory> = prompts.iter().filter_map(|p| done.remove(&p.id)).collect();
    write_jsonl(&trajectories_path, &ordered)?;
    let stats = round_statistics(&ordered);
    let stats_path = out_dir.join(STATS_FILE);
    write_atomic(&stats_path, format!("{}\n", canonical_json(&stats)).as_bytes())?;
    tracing::info!(
        computed,
        reused,
        mean_rounds = stats.mean_rounds,
        "synthesis batch finished"
    );
    Ok(BatchResult {
        trajectories_path,
        stats_path,
        stats,
        computed,
        reused,
    })
}
