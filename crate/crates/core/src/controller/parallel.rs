//! Best-of-N: independent single-pass generations ranked by the scorer.

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::GuidanceConfig;
use crate::protocol::{BackendError, BackendRole, Backends, GenerateRequest, ScoreRequest};
use crate::trajectory::ImageRef;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Any failed candidate fails the run.
    #[default]
    FailFast,
    /// Select among the candidates that completed.
    BestEffort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelConfig {
    pub n: u32,
    pub base_seed: u64,
    pub seed_stride: u64,
    pub failure: FailurePolicy,
    pub width: u32,
    pub height: u32,
    pub guidance: GuidanceConfig,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            n: 10,
            base_seed: 0,
            seed_stride: 1,
            failure: FailurePolicy::FailFast,
            width: 1024,
            height: 1024,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl ParallelConfig {
    /// Seeds `base_seed + k * seed_stride`; fails if they would overflow or collide.
    pub fn seeds(&self) -> Result<Vec<u64>, String> {
        if self.n == 0 {
            return Err("n must be at least 1".into());
        }
        if self.n > 1 && self.seed_stride == 0 {
            return Err("seed_stride must be positive when n > 1".into());
        }
        (0..u64::from(self.n))
            .map(|k| {
                k.checked_mul(self.seed_stride)
                    .and_then(|o| self.base_seed.checked_add(o))
                    .ok_or_else(|| "candidate seeds overflow".to_string())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: u32,
    pub seed: u64,
    pub image: ImageRef,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelOutcome {
    pub prompt: String,
    pub chosen_index: u32,
    pub chosen_image: ImageRef,
    pub candidates: Vec<Candidate>,
    /// Candidates that failed under the best-effort policy, as (index, error).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<(u32, String)>,
}

impl ParallelOutcome {
    pub fn chosen(&self) -> &Candidate {
        self.candidates
            .iter()
            .find(|c| c.index == self.chosen_index)
            .expect("chosen candidate is listed")
    }

    /// Images generated (compute charge); scoring is not charged.
    pub fn images_generated(&self) -> usize {
        self.candidates.len() + self.failed.len()
    }
}

#[derive(Debug, Error)]
pub enum ParallelError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{} of {} candidates failed; first: {}", failures.len(), failures.len() + completed.len(), failures[0].1)]
    PartialFailure {
        completed: Vec<Candidate>,
        failures: Vec<(u32, BackendError)>,
    },
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

async fn candidate(
    prompt: &str,
    index: u32,
    seed: u64,
    config: &ParallelConfig,
    backends: &Backends,
    id: &str,
) -> Result<Candidate, BackendError> {
    let request = GenerateRequest {
        prompt: prompt.to_string(),
        seed,
        width: config.width,
        height: config.height,
        s_t: Some(config.guidance.s_t),
        s_i: Some(config.guidance.s_i),
    };
    let image = backends.generate(&request, id).await?.image_ref;
    let score = backends
        .score(
            &ScoreRequest {
                prompt: prompt.to_string(),
                image_ref: image.clone(),
            },
            id,
        )
        .await?
        .score;
    Ok(Candidate {
        index,
        seed,
        image,
        score,
    })
}

pub async fn run_parallel(
    prompt: &str,
    config: &ParallelConfig,
    backends: &Backends,
) -> Result<ParallelOutcome, ParallelError> {
    let seeds = config.seeds().map_err(ParallelError::Precondition)?;
    config
        .guidance
        .validate()
        .map_err(|e| ParallelError::Precondition(e.to_string()))?;
    backends
        .require(&[BackendRole::Generator, BackendRole::Scorer])
        .map_err(|e| ParallelError::Precondition(e.to_string()))?;
    let id = super::stable_id("par", prompt, config.base_seed);

    // join_all yields results in candidate order regardless of completion order.
    let results = join_all(
        seeds
            .iter()
            .enumerate()
            .map(|(k, seed)| candidate(prompt, k as u32, *seed, config, backends, &id)),
    )
    .await;
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => completed.push(c),
            Err(e) => failures.push((k as u32, e)),
        }
    }
    if !failures.is_empty() && (config.failure == FailurePolicy::FailFast || completed.is_empty()) {
        return Err(ParallelError::PartialFailure { completed, failures });
    }
    let scores: Vec<f64> = completed.iter().map(|c| c.score).collect();
    let best = select_best(&scores).expect("at least one candidate completed");
    tracing::info!(
        prompt,
        n = config.n,
        chosen = completed[best].index,
        "parallel run finished"
    );
    Ok(ParallelOutcome {
        prompt: prompt.to_string(),
        chosen_index: completed[best].index,
        chosen_image: completed[best].image.clone(),
        failed: failures.into_iter().map(|(k, e)| (k, e.to_string())).collect(),
        candidates: completed,
    })
}
