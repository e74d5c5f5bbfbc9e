//! Test-time scaling controllers: sequential refinement under a budget and
//! best-of-N parallel sampling.

mod parallel;
mod sequential;

use sha2::{Digest, Sha256};

pub use parallel::{
    run_parallel, select_best, Candidate, FailurePolicy, ParallelConfig, ParallelError, ParallelOutcome,
};
pub use sequential::{
    run_multi_turn, run_sequential, run_sequential_with, BudgetMode, BudgetPolicy, ControllerConfig, RunError,
    RunOptions, DEFAULT_FORCED_CONTINUATION,
};

/// Derives a child seed from a base seed and labels, independent of call order.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_be_bytes());
    for l in labels {
        h.update((l.len() as u64).to_be_bytes());
        h.update(l.as_bytes());
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Short stable identifier for a (prefix, text, seed) triple.
pub fn stable_id(prefix: &str, text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(seed.to_be_bytes());
    format!("{prefix}-{}", &hex::encode(h.finalize())[..16])
}
