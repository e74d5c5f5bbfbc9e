//! Curation of synthesized trajectories.
//!
//! Stages, in order: error status, length cap, quality regression, the two
//! round-level splice filters (relevance, minimum visual change), a
//! post-splice minimum length, and benchmark n-gram dedup. Every threshold is
//! a strict inequality; boundary values are kept. Trajectories whose backend
//! calls fail are quarantined instead of being silently kept or dropped.

mod dedup;

use std::collections::{BTreeMap, BTreeSet};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dedup::{collides, tokenize, BenchmarkIndex};

use crate::protocol::{BackendError, BackendRole, Backends, JudgeRequest, ReasonRequest, ScoreRequest};
use crate::trajectory::{canonical_json, ImageRef, TerminalStatus, Trajectory, TrajectoryError};
use crate::verdict::{parse_score, render_quality_prompt, VerdictError};

pub const STAGE_STATUS: &str = "status";
pub const STAGE_LENGTH: &str = "length";
pub const STAGE_QUALITY: &str = "quality_regression";
pub const STAGE_RELEVANCE: &str = "relevance";
pub const STAGE_MIN_CHANGE: &str = "min_visual_change";
pub const STAGE_POST_SPLICE: &str = "post_splice_min_length";
pub const STAGE_SPLICE_CONFLICT: &str = "splice_conflict";
pub const STAGE_DEDUP: &str = "dedup";
pub const STAGE_QUARANTINE: &str = "quarantine";

const DROP_STAGES: [&str; 7] = [
    STAGE_STATUS,
    STAGE_LENGTH,
    STAGE_QUALITY,
    STAGE_POST_SPLICE,
    STAGE_SPLICE_CONFLICT,
    STAGE_DEDUP,
    STAGE_QUARANTINE,
];

/// Who rates instruction following for the regression check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitySource {
    #[default]
    Reasoner,
    Scorer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpliceFilter {
    Relevance,
    MinVisualChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_rounds: u32,
    pub regression_window: u32,
    pub min_change_threshold: f64,
    pub ngram_n: usize,
    pub benchmark_prompts: Vec<String>,
    pub quality_source: QualitySource,
    pub splice_order: Vec<SpliceFilter>,
    /// Spliced trajectories left with fewer rounds than this are dropped.
    pub min_rounds_after_splice: u32,
    pub concurrency: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_rounds: 8,
            regression_window: 3,
            min_change_threshold: 0.03,
            ngram_n: 5,
            benchmark_prompts: Vec::new(),
            quality_source: QualitySource::Reasoner,
            splice_order: vec![SpliceFilter::Relevance, SpliceFilter::MinVisualChange],
            min_rounds_after_splice: 2,
            concurrency: 8,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !self.min_change_threshold.is_finite() || self.min_change_threshold < 0.0 {
            return Err(FilterError::Precondition(
                "min_change_threshold must be finite and non-negative".into(),
            ));
        }
        if self.ngram_n == 0 {
            return Err(FilterError::Precondition("ngram_n must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(FilterError::Precondition("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    fn required_roles(&self) -> Vec<BackendRole> {
        let mut roles = vec![match self.quality_source {
            QualitySource::Reasoner => BackendRole::Reasoner,
            QualitySource::Scorer => BackendRole::Scorer,
        }];
        if self.splice_order.contains(&SpliceFilter::Relevance) {
            roles.push(BackendRole::Judge);
        }
        if self.splice_order.contains(&SpliceFilter::MinVisualChange) && self.min_change_threshold > 0.0 {
            roles.push(BackendRole::DistanceMetric);
        }
        roles
    }
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: u64,
    pub output_count: u64,
    /// Trajectory-level drops per stage, quarantine included.
    pub per_filter_drops: BTreeMap<String, u64>,
    pub per_round_splices: u64,
    pub splices_by_filter: BTreeMap<String, u64>,
    pub retained_ids: Vec<String>,
    pub dropped_ids: Vec<String>,
    pub quarantined_ids: Vec<String>,
    /// Stage that removed each dropped or quarantined id.
    pub drop_reasons: BTreeMap<String, String>,
}

impl FilterReport {
    fn empty() -> Self {
        let mut r = FilterReport::default();
        for stage in DROP_STAGES {
            r.per_filter_drops.insert(stage.into(), 0);
        }
        for stage in [STAGE_RELEVANCE, STAGE_MIN_CHANGE] {
            r.splices_by_filter.insert(stage.into(), 0);
        }
        r
    }

    /// `input = output + drops`, and the id lists agree with the counts.
    pub fn reconciles(&self) -> bool {
        let drops: u64 = self.per_filter_drops.values().sum();
        let spliced: u64 = self.splices_by_filter.values().sum();
        self.input_count == self.output_count + drops
            && self.retained_ids.len() as u64 == self.output_count
            && (self.dropped_ids.len() + self.quarantined_ids.len()) as u64 == drops
            && spliced == self.per_round_splices
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }
}

/// Outcome for a single trajectory before dataset-level dedup.
enum Fate {
    Kept(Trajectory),
    Dropped(&'static str),
    Quarantined(&'static str, String),
}

pub fn filter_length(traj: &Trajectory, config: &FilterConfig) -> bool {
    traj.image_count() <= config.max_rounds as usize
}

#[derive(Debug, Error)]
enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("quality reply: {0}")]
    Score(#[from] VerdictError),
}

async fn quality_score(
    traj: &Trajectory,
    image: &ImageRef,
    config: &FilterConfig,
    backends: &Backends,
) -> Result<f64, StageError> {
    match config.quality_source {
        QualitySource::Scorer => {
            let request = ScoreRequest {
                prompt: traj.user_prompt.clone(),
                image_ref: image.clone(),
            };
            Ok(backends.score(&request, &traj.id).await?.score)
        }
        QualitySource::Reasoner => {
            let request = ReasonRequest {
                rendered_prompt: render_quality_prompt(&traj.user_prompt),
                image_refs: vec![image.clone()],
                suppress_termination: false,
                forced_continuation: None,
            };
            let reply = backends.reason(&request, &traj.id).await?;
            Ok(parse_score(&reply.raw_text)?)
        }
    }
}

/// Keep unless the final image scores strictly below the best of the first
/// `regression_window` images. Scores are cached in provenance.
async fn filter_quality(traj: &mut Trajectory, config: &FilterConfig, backends: &Backends) -> Result<bool, StageError> {
    let images: Vec<ImageRef> = traj.generated_images().into_iter().cloned().collect();
    let Some(final_image) = traj.final_image().cloned() else {
        return Ok(true);
    };
    if images.len() <= 1 {
        return Ok(true);
    }
    let window: Vec<ImageRef> = images.iter().take(config.regression_window as usize).cloned().collect();
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for image in window.iter().chain(std::iter::once(&final_image)) {
        if !scores.contains_key(&image.digest) {
            let s = quality_score(traj, image, config, backends).await?;
            scores.insert(image.digest.clone(), s);
        }
    }
    let final_score = scores[&final_image.digest];
    let best = window
        .iter()
        .map(|i| scores[&i.digest])
        .fold(f64::NEG_INFINITY, f64::max);
    traj.provenance.insert("quality_scores".into(), canonical_json(&scores));
    Ok(final_score >= best)
}

/// Round indices of edit rounds the judge marks irrelevant to the user prompt.
async fn irrelevant_rounds(traj: &Trajectory, backends: &Backends) -> Result<Vec<u32>, BackendError> {
    let mut out = Vec::new();
    for r in traj.rounds.iter().filter(|r| r.action_taken.is_edit()) {
        let Some(instruction) = r.edit_instruction.as_deref().filter(|i| !i.trim().is_empty()) else {
            continue;
        };
        let request = JudgeRequest {
            original_prompt: traj.user_prompt.clone(),
            edit_instruction: instruction.to_string(),
            task: None,
        };
        if !backends.judge(&request, &traj.id).await?.relevant {
            out.push(r.index);
        }
    }
    Ok(out)
}

/// Round indices of edits whose output is closer than the threshold to their input.
async fn low_change_rounds(traj: &Trajectory, threshold: f64, backends: &Backends) -> Result<Vec<u32>, BackendError> {
    let mut out = Vec::new();
    if threshold <= 0.0 {
        return Ok(out);
    }
    for r in traj.rounds.iter().filter(|r| r.action_taken.is_edit()) {
        let (Some(a), Some(b)) = (&r.input_image, &r.output_image) else {
            continue;
        };
        let d = if a == b {
            0.0
        } else {
            backends.distance(a, b, &traj.id).await?
        };
        if d < threshold {
            out.push(r.index);
        }
    }
    Ok(out)
}

/// Splices the given rounds, highest index first so earlier indices stay valid.
pub fn splice_rounds(traj: &Trajectory, indices: &[u32]) -> Result<Trajectory, TrajectoryError> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = traj.clone();
    for index in sorted.into_iter().rev() {
        out = out.splice_round(index)?;
    }
    Ok(out)
}

async fn filter_one(
    mut traj: Trajectory,
    config: &FilterConfig,
    backends: &Backends,
    splices: &mut BTreeMap<&'static str, u64>,
) -> Fate {
    if traj.terminal_status == TerminalStatus::Error {
        return Fate::Dropped(STAGE_STATUS);
    }
    if !filter_length(&traj, config) {
        return Fate::Dropped(STAGE_LENGTH);
    }
    match filter_quality(&mut traj, config, backends).await {
        Ok(true) => {}
        Ok(false) => return Fate::Dropped(STAGE_QUALITY),
        Err(e) => return Fate::Quarantined(STAGE_QUALITY, e.to_string()),
    }
    let mut spliced_any = false;
    for stage in &config.splice_order {
        let (name, found) = match stage {
            SpliceFilter::Relevance => (STAGE_RELEVANCE, irrelevant_rounds(&traj, backends).await),
            SpliceFilter::MinVisualChange => (
                STAGE_MIN_CHANGE,
                low_change_rounds(&traj, config.min_change_threshold, backends).await,
            ),
        };
        let indices = match found {
            Ok(i) => i,
            Err(e) => return Fate::Quarantined(name, e.to_string()),
        };
        if indices.is_empty() {
            continue;
        }
        traj = match splice_rounds(&traj, &indices) {
            Ok(t) => t,
            Err(_) => return Fate::Dropped(STAGE_SPLICE_CONFLICT),
        };
        spliced_any = true;
        *splices.entry(name).or_insert(0) += indices.len() as u64;
        let mut log: Vec<String> = traj
            .provenance
            .get("spliced_rounds")
            .and_then(|s| serde_json::from_str(s).ok())
            .unwrap_or_default();
        log.extend(indices.iter().map(|i| format!("{name}:{i}")));
        traj.provenance.insert("spliced_rounds".into(), canonical_json(&log));
    }
    if spliced_any && traj.rounds.len() < config.min_rounds_after_splice as usize {
        return Fate::Dropped(STAGE_POST_SPLICE);
    }
    Fate::Kept(traj)
}

/// Applies every stage and returns the retained trajectories in input order.
pub async fn run_filters(
    dataset: Vec<Trajectory>,
    config: &FilterConfig,
    backends: &Backends,
) -> Result<(Vec<Trajectory>, FilterReport), FilterError> {
    config.validate()?;
    let mut report = FilterReport::empty();
    report.input_count = dataset.len() as u64;
    if dataset.is_empty() {
        return Ok((Vec::new(), report));
    }
    backends
        .require(&config.required_roles())
        .map_err(|e| FilterError::Precondition(e.to_string()))?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = dataset.iter().find(|t| !seen.insert(t.id.clone())) {
        return Err(FilterError::Precondition(format!("duplicate trajectory id {}", dup.id)));
    }

    let fates: Vec<(String, Fate, BTreeMap<&'static str, u64>)> =
        stream::iter(dataset.into_iter().map(|t| async move {
            let id = t.id.clone();
            let mut splices = BTreeMap::new();
            let fate = filter_one(t, config, backends, &mut splices).await;
            (id, fate, splices)
        }))
        .buffered(config.concurrency)
        .collect()
        .await;

    let index = BenchmarkIndex::new(&config.benchmark_prompts, config.ngram_n);
    let mut kept = Vec::new();
    for (id, fate, splices) in fates {
        let stage = match fate {
            Fate::Kept(t) if !index.is_empty() && index.contaminated(&t.user_prompt) => STAGE_DEDUP,
            Fate::Kept(t) => {
                for (name, n) in splices {
                    *report.splices_by_filter.entry(name.into()).or_insert(0) += n;
                    report.per_round_splices += n;
                }
                report.retained_ids.push(id);
                kept.push(t);
                continue;
            }
            Fate::Dropped(stage) => stage,
            Fate::Quarantined(stage, error) => {
                tracing::warn!(id = %id, stage, error = %error, "quarantined");
                *report.per_filter_drops.get_mut(STAGE_QUARANTINE).unwrap() += 1;
                report
                    .drop_reasons
                    .insert(id.clone(), format!("{STAGE_QUARANTINE}:{stage}"));
                report.quarantined_ids.push(id);
                continue;
            }
        };
        *report.per_filter_drops.get_mut(stage).unwrap() += 1;
        report.drop_reasons.insert(id.clone(), stage.to_string());
        report.dropped_ids.push(id);
    }
    report.output_count = kept.len() as u64;
    debug_assert!(report.reconciles());
    Ok((kept, report))
}

/// Dataset-level dedup alone: returns retained trajectories and dropped ids.
pub fn dedup_ngrams(dataset: Vec<Trajectory>, config: &FilterConfig) -> (Vec<Trajectory>, Vec<String>) {
    let index = BenchmarkIndex::new(&config.benchmark_prompts, config.ngram_n);
    let mut dropped = Vec::new();
    let kept = dataset
        .into_iter()
        .filter(|t| {
            let hit = index.contaminated(&t.user_prompt);
            if hit {
                dropped.push(t.id.clone());
            }
            !hit
        })
        .collect();
    (kept, dropped)
}

/// Benchmark prompts from a plain-text file, one per line; blank lines ignored.
pub fn read_benchmarks(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}
