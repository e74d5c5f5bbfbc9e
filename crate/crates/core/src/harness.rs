//! Sequential-vs-parallel scaling sweeps under matched compute.
//!
//! Compute is the number of generated images: a sequential cell at budget `c`
//! runs `ForceExact(c)`, a parallel cell at budget `n` samples `n` candidates.
//! Selection and verification calls are not charged. Each finished cell is
//! appended to `records.jsonl` right away so an interrupted sweep resumes
//! where it stopped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    derive_seed, run_parallel, run_sequential_with, BudgetPolicy, ControllerConfig, ParallelConfig, RunOptions,
};
use crate::fsutil::write_atomic;
use crate::protocol::{BackendRole, Backends, ScoreRequest};
use crate::trajectory::{canonical_json, ImageRef};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const CURVES_HEADER: &str = "mode,budget,mean_score,stderr,total_images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    Sequential,
    Parallel,
}

impl ScalingMode {
    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Sequential => "sequential",
            ScalingMode::Parallel => "parallel",
        }
    }
}

impl std::fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "seq" | "sequential" => Ok(ScalingMode::Sequential),
            "par" | "parallel" => Ok(ScalingMode::Parallel),
            other => Err(format!("unknown mode `{other}` (expected seq or par)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingRecord {
    pub mode: ScalingMode,
    pub budget: u32,
    pub task_id: String,
    pub outcome_score: f64,
    pub images_generated: u64,
    pub wall_time_ms: u64,
}

impl ScalingRecord {
    fn key(&self) -> (String, ScalingMode, u32) {
        (self.task_id.clone(), self.mode, self.budget)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    pub prompt: String,
}

/// Tasks from JSONL (`{"id","prompt"}` per line) or plain text, one prompt per
/// line with ids `t000`, `t001`, ...
pub fn parse_tasks(text: &str) -> Result<Vec<Task>, HarnessError> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let tasks: Vec<Task> = if lines.first().is_some_and(|l| l.starts_with('{')) {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("task line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?
    } else {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| Task {
                id: format!("t{i:03}"),
                prompt: l.to_string(),
            })
            .collect()
    };
    let mut seen = BTreeSet::new();
    if let Some(dup) = tasks.iter().find(|t| !seen.insert(t.id.as_str())) {
        return Err(HarnessError::Data(format!("duplicate task id {}", dup.id)));
    }
    Ok(tasks)
}

/// Budget list from `"1..10"` (inclusive) or `"1,2,4"`.
pub fn parse_budgets(spec: &str) -> Result<Vec<u32>, String> {
    let spec = spec.trim();
    let mut out: Vec<u32> = if let Some((a, b)) = spec.split_once("..") {
        let lo: u32 = a.trim().parse().map_err(|_| format!("bad budget range `{spec}`"))?;
        let hi: u32 = b
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| format!("bad budget range `{spec}`"))?;
        if lo > hi {
            return Err(format!("empty budget range `{spec}`"));
        }
        (lo..=hi).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| format!("bad budget `{s}`")))
            .collect::<Result<_, _>>()?
    };
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn parse_modes(spec: &str) -> Result<Vec<ScalingMode>, String> {
    let mut out: Vec<ScalingMode> = spec.split(',').map(str::parse).collect::<Result<_, _>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Wall-clock source, injectable so golden runs are byte-stable.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Always reports the same instant, so every wall time is 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Largest budget accepted; evaluation is capped at 10 images.
    pub budget_cap: u32,
    pub seed: u64,
    pub concurrency: usize,
    /// Abort the sweep on the first failed cell instead of leaving a gap.
    pub abort_on_failure: bool,
    /// When set, wall times come from a frozen clock at this instant.
    pub fixed_clock_ms: Option<u64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            budget_cap: 10,
            seed: 0,
            concurrency: 4,
            abort_on_failure: false,
            fixed_clock_ms: None,
        }
    }
}

impl HarnessConfig {
    pub fn clock(&self) -> Box<dyn Clock> {
        match self.fixed_clock_ms {
            Some(t) => Box::new(FixedClock(t)),
            None => Box::new(SystemClock),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("cell {task_id}/{mode}/{budget} failed: {error}")]
    CellFailed {
        task_id: String,
        mode: ScalingMode,
        budget: u32,
        error: String,
    },
    #[error("unbalanced design: {0}")]
    UnbalancedDesign(String),
    #[error("target score {target} is not reached by curve `{mode}`")]
    TargetUnreachable { mode: ScalingMode, target: f64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(String),
}

/// What to sweep; the controller templates supply everything but budget and seed.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub tasks: Vec<Task>,
    pub budgets: Vec<u32>,
    pub modes: Vec<ScalingMode>,
    pub controller: ControllerConfig,
    pub parallel: ParallelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub task_id: String,
    pub mode: ScalingMode,
    pub budget: u32,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records_path: PathBuf,
    /// All records, new and reused, sorted by task, mode and budget.
    pub records: Vec<ScalingRecord>,
    pub failures: Vec<CellFailure>,
    pub computed: usize,
    pub reused: usize,
    /// Images charged to the cells computed in this sweep.
    pub images_charged: u64,
    /// Blobs newly written during this sweep; equals the images charged to
    /// computed cells when every generated image is distinct.
    pub blobs_created: u64,
}

fn read_records(path: &Path) -> Result<BTreeMap<(String, ScalingMode, u32), ScalingRecord>, HarnessError> {
    let mut out = BTreeMap::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<ScalingRecord>(line) {
            Ok(r) => {
                out.insert(r.key(), r);
            }
            Err(e) => tracing::warn!(error = %e, "ignoring unreadable record line"),
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[ScalingRecord]) -> std::io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&canonical_json(r));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub fn load_records(path: &Path) -> Result<Vec<ScalingRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("record line {}: {e}", i + 1))))
        .collect()
}

async fn evaluate(prompt: &str, image: ImageRef, backends: &Backends, id: &str) -> Result<f64, String> {
    let request = ScoreRequest {
        prompt: prompt.to_string(),
        image_ref: image,
    };
    backends
        .evaluate(&request, id)
        .await
        .map(|r| r.score)
        .map_err(|e| e.to_string())
}

async fn run_cell(
    task: &Task,
    mode: ScalingMode,
    budget: u32,
    plan: &SweepPlan,
    config: &HarnessConfig,
    backends: &Backends,
    clock: &dyn Clock,
) -> Result<ScalingRecord, String> {
    let seed = derive_seed(config.seed, &[&task.id, mode.name(), &budget.to_string()]);
    let id = format!("{}-{}-{budget}", task.id, mode.name());
    let start = clock.now_ms();
    let (image, images_generated) = match mode {
        ScalingMode::Sequential => {
            let controller = plan
                .controller
                .clone()
                .with_policy(BudgetPolicy::force_exact(budget))
                .with_seed(seed);
            let options = RunOptions {
                id: Some(id.clone()),
                ..RunOptions::default()
            };
            let t = run_sequential_with(&task.prompt, &controller, backends, options)
                .await
                .map_err(|e| e.to_string())?;
            let charged = t
                .provenance
                .get("images_charged")
                .and_then(|s| s.parse().ok())
                .unwrap_or(t.image_count() as u64);
            let image = t.final_image().cloned().ok_or("sequential run produced no image")?;
            (image, charged)
        }
        ScalingMode::Parallel => {
            let parallel = ParallelConfig {
                n: budget,
                base_seed: seed,
                ..plan.parallel.clone()
            };
            let outcome = run_parallel(&task.prompt, &parallel, backends)
                .await
                .map_err(|e| e.to_string())?;
            (outcome.chosen_image.clone(), outcome.images_generated() as u64)
        }
    };
    let outcome_score = evaluate(&task.prompt, image, backends, &id).await?;
    Ok(ScalingRecord {
        mode,
        budget,
        task_id: task.id.clone(),
        outcome_score,
        images_generated,
        wall_time_ms: clock.now_ms().saturating_sub(start),
    })
}

fn check_plan(plan: &SweepPlan, config: &HarnessConfig, backends: &Backends) -> Result<(), HarnessError> {
    let pre = |m: String| Err(HarnessError::Precondition(m));
    if plan.tasks.is_empty() {
        return pre("task list is empty".into());
    }
    if plan.budgets.is_empty() || plan.modes.is_empty() {
        return pre("budgets and modes must be non-empty".into());
    }
    if config.concurrency == 0 {
        return pre("concurrency must be at least 1".into());
    }
    if let Some(b) = plan.budgets.iter().find(|b| **b == 0 || **b > config.budget_cap) {
        return pre(format!("budget {b} outside 1..={}", config.budget_cap));
    }
    let mut roles = vec![BackendRole::Generator];
    if plan.modes.contains(&ScalingMode::Sequential) {
        roles.extend([BackendRole::Editor, BackendRole::Reasoner]);
    }
    if plan.modes.contains(&ScalingMode::Parallel) {
        roles.push(BackendRole::Scorer);
    }
    backends
        .require(&roles)
        .map_err(|e| HarnessError::Precondition(e.to_string()))?;
    backends
        .evaluator()
        .map_err(|_| HarnessError::Precondition("no evaluation scorer configured".into()))?;
    Ok(())
}

/// Runs every (task, mode, budget) cell not already present in `out_dir`.
pub async fn sweep(
    plan: &SweepPlan,
    config: &HarnessConfig,
    backends: &Backends,
    clock: &dyn Clock,
    out_dir: &Path,
) -> Result<SweepOutcome, HarnessError> {
    check_plan(plan, config, backends)?;
    std::fs::create_dir_all(out_dir)?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut done = read_records(&records_path)?;
    let mut cells = Vec::new();
    for task in &plan.tasks {
        for &mode in &plan.modes {
            for &budget in &plan.budgets {
                if !done.contains_key(&(task.id.clone(), mode, budget)) {
                    cells.push((task, mode, budget));
                }
            }
        }
    }
    let reused = plan.tasks.len() * plan.modes.len() * plan.budgets.len() - cells.len();
    let blobs_before = backends.store().created_count();

    let mut file = OpenOptions::new().create(true).append(true).open(&records_path)?;
    let mut results = stream::iter(cells.into_iter().map(|(task, mode, budget)| async move {
        let r = run_cell(task, mode, budget, plan, config, backends, clock).await;
        (task, mode, budget, r)
    }))
    .buffer_unordered(config.concurrency);
    let mut computed = Vec::new();
    let mut failures = Vec::new();
    while let Some((task, mode, budget, r)) = results.next().await {
        match r {
            Ok(record) => {
                writeln!(file, "{}", canonical_json(&record))?;
                file.flush()?;
                computed.push(record);
            }
            Err(error) => {
                tracing::warn!(task = %task.id, %mode, budget, %error, "sweep cell failed");
                if config.abort_on_failure {
                    return Err(HarnessError::CellFailed {
                        task_id: task.id.clone(),
                        mode,
                        budget,
                        error,
                    });
                }
                failures.push(CellFailure {
                    task_id: task.id.clone(),
                    mode,
                    budget,
                    error,
                });
            }
        }
    }
    drop(results);
    drop(file);
    let blobs_created = backends.store().created_count() - blobs_before;

    let computed_count = computed.len();
    let images_charged = computed.iter().map(|r| r.images_generated).sum();
    for r in computed {
        done.insert(r.key(), r);
    }
    // Tasks are ordered as given, not by id.
    let order: BTreeMap<&str, usize> = plan.tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut records: Vec<ScalingRecord> = done.into_values().collect();
    records.sort_by_key(|r| {
        (
            order.get(r.task_id.as_str()).copied().unwrap_or(usize::MAX),
            r.task_id.clone(),
            r.mode,
            r.budget,
        )
    });
    write_records(&records_path, &records)?;
    failures.sort_by_key(|f| (order[f.task_id.as_str()], f.mode, f.budget));
    Ok(SweepOutcome {
        records_path,
        records,
        failures,
        computed: computed_count,
        reused,
        images_charged,
        blobs_created,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: u32,
    pub mean_score: f64,
    /// Standard error of the mean (sample standard deviation over sqrt(n)); 0 for one task.
    pub stderr: f64,
    pub total_images: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub mode: ScalingMode,
    /// Strictly increasing in budget.
    pub points: Vec<CurvePoint>,
}

/// Per-mode, per-budget means. Every cell must cover the same task set.
pub fn build_curves(records: &[ScalingRecord]) -> Result<Vec<ScalingCurve>, HarnessError> {
    let mut cells: BTreeMap<(ScalingMode, u32), BTreeMap<&str, &ScalingRecord>> = BTreeMap::new();
    for r in records {
        if cells
            .entry((r.mode, r.budget))
            .or_default()
            .insert(&r.task_id, r)
            .is_some()
        {
            return Err(HarnessError::UnbalancedDesign(format!(
                "duplicate record for {}/{}/{}",
                r.task_id, r.mode, r.budget
            )));
        }
    }
    let mut reference: Option<(&(ScalingMode, u32), BTreeSet<&str>)> = None;
    for (key, cell) in &cells {
        let tasks: BTreeSet<&str> = cell.keys().copied().collect();
        match &reference {
            None => reference = Some((key, tasks)),
            Some((ref_key, ref_tasks)) if *ref_tasks != tasks => {
                return Err(HarnessError::UnbalancedDesign(format!(
                    "{}@{} covers {} tasks, {}@{} covers {} different ones",
                    key.0,
                    key.1,
                    tasks.len(),
                    ref_key.0,
                    ref_key.1,
                    ref_tasks.len()
                )));
            }
            Some(_) => {}
        }
    }
    let mut curves: Vec<ScalingCurve> = Vec::new();
    for ((mode, budget), cell) in cells {
        let scores: Vec<f64> = cell.values().map(|r| r.outcome_score).collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let stderr = if scores.len() < 2 {
            0.0
        } else {
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        let point = CurvePoint {
            budget,
            mean_score: mean,
            stderr,
            total_images: cell.values().map(|r| r.images_generated).sum(),
        };
        match curves.last_mut() {
            Some(c) if c.mode == mode => c.points.push(point),
            _ => curves.push(ScalingCurve {
                mode,
                points: vec![point],
            }),
        }
    }
    Ok(curves)
}

pub fn curves_csv(curves: &[ScalingCurve]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                c.mode, p.budget, p.mean_score, p.stderr, p.total_images
            );
        }
    }
    out
}

/// Smallest budget at which the curve reaches `target`, interpolating
/// linearly between the last point below and the first point at or above it.
pub fn budget_to_reach(curve: &ScalingCurve, target: f64) -> Option<f64> {
    let hit = curve.points.iter().position(|p| p.mean_score >= target)?;
    let p1 = &curve.points[hit];
    if hit == 0 {
        return Some(f64::from(p1.budget));
    }
    let p0 = &curve.points[hit - 1];
    let frac = (target - p0.mean_score) / (p1.mean_score - p0.mean_score);
    Some(f64::from(p0.budget) + frac * f64::from(p1.budget - p0.budget))
}

/// How many times more compute curve `b` needs than curve `a` to reach `target`.
pub fn matched_compute_ratio(a: &ScalingCurve, b: &ScalingCurve, target: f64) -> Result<f64, HarnessError> {
    let unreachable = |c: &ScalingCurve| HarnessError::TargetUnreachable { mode: c.mode, target };
    let ba = budget_to_reach(a, target).ok_or_else(|| unreachable(a))?;
    let bb = budget_to_reach(b, target).ok_or_else(|| unreachable(b))?;
    Ok(bb / ba)
}
