use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Trajectory;

/// Distribution of generated-image counts over a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub count: u64,
    pub mean_rounds: f64,
    pub histogram: BTreeMap<u32, u64>,
    pub min: u32,
    pub max: u32,
}

pub fn round_statistics<'a, I>(dataset: I) -> RoundStats
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut histogram = BTreeMap::new();
    for t in dataset {
        *histogram.entry(t.image_count() as u32).or_insert(0u64) += 1;
    }
    let count: u64 = histogram.values().sum();
    if count == 0 {
        return RoundStats::default();
    }
    // Integer sum first so the mean does not depend on dataset order.
    let total: u64 = histogram.iter().map(|(k, n)| u64::from(*k) * n).sum();
    RoundStats {
        count,
        mean_rounds: total as f64 / count as f64,
        min: *histogram.keys().next().unwrap(),
        max: *histogram.keys().next_back().unwrap(),
        histogram,
    }
}
