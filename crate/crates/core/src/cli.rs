//! The `cotscale` command line: every pipeline as a subcommand over one
//! config file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 backend failure,
//! 3 data or schema failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, EngineConfig};
use crate::controller::{run_multi_turn, run_parallel, run_sequential, BudgetPolicy, ParallelError, RunError};
use crate::filter::{read_benchmarks, run_filters, FilterError};
use crate::fsutil::write_atomic;
use crate::harness::{
    build_curves, curves_csv, parse_budgets, parse_modes, parse_tasks, sweep, HarnessError, ScalingRecord, SweepPlan,
    CURVES_FILE,
};
use crate::protocol::http::router;
use crate::protocol::mock::{Script, ScriptedMock, StochasticMock, StochasticPolicy};
use crate::protocol::{BackendRole, Endpoint};
use crate::synthesis::{self, run_batch, synthesize_prompts, PromptRecord, SynthesisError, PROMPTS_FILE};
use crate::trajectory::{canonical_json, read_jsonl, round_statistics, serialize, write_jsonl, Trajectory};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_BACKEND: u8 = 2;
pub const EXIT_DATA: u8 = 3;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(
    name = "cotscale",
    version,
    about = "Multimodal chain-of-thought test-time scaling engine"
)]
pub struct Cli {
    /// Engine config file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Blob store directory; overrides `store_root`.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Seed for every section; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Author prompts and collect refinement trajectories.
    Synthesize(SynthesizeArgs),
    /// Curate a trajectory file.
    Filter(FilterArgs),
    /// One sequential refinement run.
    RunSeq(RunSeqArgs),
    /// One best-of-N run.
    RunPar(RunParArgs),
    /// A multi-turn session, one user turn per line.
    MultiTurn(MultiTurnArgs),
    /// Sequential-vs-parallel scaling sweep.
    Sweep(SweepArgs),
    /// Round statistics of a trajectory file.
    Stats(StatsArgs),
    /// Serve a mock backend over the wire protocol.
    MockServe(MockServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Number of prompts to author.
    #[arg(long)]
    pub prompts: Option<u32>,
    /// Use these prompts (one per line) instead of authoring.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_rounds: Option<u32>,
    /// Ask the reasoner to split complex prompts into subgoals.
    #[arg(long)]
    pub decompose: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Benchmark prompts, one per line.
    #[arg(long)]
    pub benchmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(id = "mode", multiple = false)]
pub struct ModeFlags {
    /// Exactly `budget` images (default).
    #[arg(long, group = "mode")]
    pub force: bool,
    /// At most `budget` images.
    #[arg(long, group = "mode")]
    pub max: bool,
    /// Stop when satisfied, capped at `budget` images.
    #[arg(long, group = "mode")]
    pub early_stop: bool,
}

impl ModeFlags {
    fn policy(&self, c: u32) -> BudgetPolicy {
        if self.max {
            BudgetPolicy::max_rounds(c)
        } else if self.early_stop {
            BudgetPolicy::early_stop(c)
        } else {
            BudgetPolicy::force_exact(c)
        }
    }
}

#[derive(Debug, Args)]
pub struct RunSeqArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub budget: u32,
    #[command(flatten)]
    pub mode: ModeFlags,
    /// Also write the trajectory to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunParArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub n: u32,
}

#[derive(Debug, Args)]
pub struct MultiTurnArgs {
    #[arg(long)]
    pub turns: PathBuf,
    #[arg(long)]
    pub budget: u32,
    #[command(flatten)]
    pub mode: ModeFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Tasks: JSONL `{"id","prompt"}` or one prompt per line.
    #[arg(long)]
    pub tasks: PathBuf,
    /// `1..10` or a comma list.
    #[arg(long, default_value = "1..10")]
    pub budgets: String,
    #[arg(long, default_value = "seq,par")]
    pub modes: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Freeze the clock at this instant so wall times are reproducible.
    #[arg(long)]
    pub fixed_clock_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    #[arg(long)]
    pub role: BackendRole,
    /// Scripted replies; either this or `--stochastic-seed`.
    #[arg(long, conflicts_with = "stochastic_seed")]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub stochastic_seed: Option<u64>,
    /// Stochastic policy file (JSON); defaults apply otherwise.
    #[arg(long, requires = "stochastic_seed")]
    pub policy: Option<PathBuf>,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 0)]
    pub port: u16,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(m: impl ToString) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: m.to_string(),
        }
    }

    fn backend(m: impl ToString) -> Self {
        CliError {
            code: EXIT_BACKEND,
            message: m.to_string(),
        }
    }

    fn data(m: impl ToString) -> Self {
        CliError {
            code: EXIT_DATA,
            message: m.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e)
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Precondition(_) => CliError::usage(e),
            RunError::Invariant { .. } => CliError::data(e),
            RunError::Backend { .. } | RunError::Parser { .. } => CliError::backend(e),
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Precondition(_) => CliError::usage(e),
            SynthesisError::Backend(_) | SynthesisError::InsufficientUnique { .. } => CliError::backend(e),
            SynthesisError::Io(_) | SynthesisError::Data(_) => CliError::data(e),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Precondition(_) => CliError::usage(e),
            HarnessError::CellFailed { .. } => CliError::backend(e),
            _ => CliError::data(e),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, body.as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli, env: Vec<(String, String)>) -> Result<EngineConfig, CliError> {
    let mut env = env;
    if let Some(seed) = cli.seed {
        // Flags beat both the file and the environment.
        env.retain(|(k, _)| k != "ENGINE_SEED");
        env.push(("ENGINE_SEED".into(), seed.to_string()));
    }
    let mut config = EngineConfig::load(cli.config.as_deref(), env)?;
    if let Some(store) = &cli.store {
        config.store_root = store.clone();
    }
    Ok(config)
}

/// Runs a parsed command line. Normal output goes to stdout; diagnostics to
/// the tracing subscriber.
pub async fn run(cli: Cli, env: Vec<(String, String)>) -> Result<(), CliError> {
    if let Command::MockServe(args) = &cli.command {
        let config = load_config(&cli, env)?;
        return mock_serve(args, &config).await;
    }
    let config = load_config(&cli, env)?;
    match &cli.command {
        Command::Synthesize(a) => synthesize(a, &config).await,
        Command::Filter(a) => filter(a, &config).await,
        Command::RunSeq(a) => run_seq(a, &config).await,
        Command::RunPar(a) => run_par(a, &config).await,
        Command::MultiTurn(a) => multi_turn(a, &config).await,
        Command::Sweep(a) => run_sweep(a, &config).await,
        Command::Stats(a) => stats(a),
        Command::MockServe(_) => unreachable!("handled above"),
    }
}

async fn synthesize(args: &SynthesizeArgs, config: &EngineConfig) -> Result<(), CliError> {
    let mut synth = config.synthesis.clone();
    if let Some(n) = args.prompts {
        synth.prompt_count = n;
    }
    if let Some(r) = args.max_rounds {
        synth.max_rounds = r;
    }
    synth.complex_prompt_decomposition |= args.decompose;
    let backends = config.build_backends()?;
    let prompts_path = args.out.join(PROMPTS_FILE);
    let prompts: Vec<PromptRecord> = if let Some(file) = &args.prompt_file {
        let mut lines: Vec<String> = read_text(file)?
            .lines()
            .map(synthesis::normalize_whitespace)
            .filter(|l| !l.is_empty())
            .collect();
        if let Some(n) = args.prompts {
            lines.truncate(n as usize);
        }
        let records: Vec<PromptRecord> = lines
            .into_iter()
            .enumerate()
            .map(|(i, p)| PromptRecord::new(i, p, synth.seed))
            .collect();
        std::fs::create_dir_all(&args.out).map_err(CliError::data)?;
        synthesis::write_prompts(&prompts_path, &records).map_err(CliError::data)?;
        records
    } else if prompts_path.exists() {
        // Resuming: keep the prompts authored by the earlier run.
        synthesis::read_prompts(&prompts_path)?
    } else {
        let records = synthesize_prompts(&synth, &backends).await?;
        std::fs::create_dir_all(&args.out).map_err(CliError::data)?;
        synthesis::write_prompts(&prompts_path, &records).map_err(CliError::data)?;
        records
    };
    let result = run_batch(&prompts, &synth, &backends, &args.out).await?;
    say!("trajectories: {}", result.stats.count);
    say!("computed: {}", result.computed);
    say!("reused: {}", result.reused);
    say!("mean_rounds: {}", result.stats.mean_rounds);
    Ok(())
}

async fn filter(args: &FilterArgs, config: &EngineConfig) -> Result<(), CliError> {
    let dataset = read_jsonl(&args.input).map_err(CliError::data)?;
    let mut fc = config.filter.clone();
    if let Some(path) = &args.benchmarks {
        fc.benchmark_prompts = read_benchmarks(&read_text(path)?);
    }
    let backends = config.build_backends()?;
    let (kept, report) = run_filters(dataset, &fc, &backends).await.map_err(|e| match e {
        FilterError::Precondition(_) => CliError::usage(e),
    })?;
    std::fs::create_dir_all(&args.out).map_err(CliError::data)?;
    write_jsonl(&args.out.join(synthesis::TRAJECTORIES_FILE), &kept).map_err(CliError::data)?;
    write_file(&args.out.join(REPORT_FILE), &format!("{}\n", report.to_json()))?;
    say!("input: {}", report.input_count);
    say!("retained: {}", report.output_count);
    for (stage, n) in &report.per_filter_drops {
        say!("dropped_{stage}: {n}");
    }
    say!("spliced_rounds: {}", report.per_round_splices);
    if !report.quarantined_ids.is_empty() {
        return Err(CliError::backend(format!(
            "{} trajectories quarantined after backend failures",
            report.quarantined_ids.len()
        )));
    }
    Ok(())
}

fn emit_trajectories(trajectories: &[Trajectory], out: Option<&Path>) -> Result<(), CliError> {
    for t in trajectories {
        say!("{}", serialize(t));
    }
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(CliError::data)?;
        }
        write_jsonl(path, trajectories).map_err(CliError::data)?;
    }
    Ok(())
}

async fn run_seq(args: &RunSeqArgs, config: &EngineConfig) -> Result<(), CliError> {
    let controller = config.controller.clone().with_policy(args.mode.policy(args.budget));
    let backends = config.build_backends()?;
    match run_sequential(&args.prompt, &controller, &backends).await {
        Ok(t) => emit_trajectories(&[t], args.out.as_deref()),
        Err(e) => {
            if let Some(t) = e.trajectory() {
                emit_trajectories(std::slice::from_ref(t), args.out.as_deref())?;
            }
            Err(e.into())
        }
    }
}

async fn run_par(args: &RunParArgs, config: &EngineConfig) -> Result<(), CliError> {
    let mut parallel = config.parallel.clone();
    parallel.n = args.n;
    let backends = config.build_backends()?;
    let outcome = run_parallel(&args.prompt, &parallel, &backends)
        .await
        .map_err(|e| match e {
            ParallelError::Precondition(_) => CliError::usage(e),
            ParallelError::PartialFailure { .. } => CliError::backend(e),
        })?;
    say!("{}", canonical_json(&outcome));
    Ok(())
}

async fn multi_turn(args: &MultiTurnArgs, config: &EngineConfig) -> Result<(), CliError> {
    let turns: Vec<String> = read_text(&args.turns)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if turns.is_empty() {
        return Err(CliError::data("turns file has no turns"));
    }
    let controller = config.controller.clone().with_policy(args.mode.policy(args.budget));
    let backends = config.build_backends()?;
    let trajectories = run_multi_turn(&turns, &controller, &backends).await?;
    emit_trajectories(&trajectories, args.out.as_deref())
}

/// Keeps only tasks present in every cell, so curves compare like with like
/// when some cells failed.
fn balanced(records: &[ScalingRecord]) -> Vec<ScalingRecord> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut cells: BTreeMap<(crate::harness::ScalingMode, u32), BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        cells.entry((r.mode, r.budget)).or_default().insert(&r.task_id);
    }
    let mut common: Option<BTreeSet<&str>> = None;
    for tasks in cells.values() {
        common = Some(match common {
            None => tasks.clone(),
            Some(c) => c.intersection(tasks).copied().collect(),
        });
    }
    let common = common.unwrap_or_default();
    records
        .iter()
        .filter(|r| common.contains(r.task_id.as_str()))
        .cloned()
        .collect()
}

async fn run_sweep(args: &SweepArgs, config: &EngineConfig) -> Result<(), CliError> {
    let tasks = parse_tasks(&read_text(&args.tasks)?)?;
    let budgets = parse_budgets(&args.budgets).map_err(CliError::usage)?;
    let modes = parse_modes(&args.modes).map_err(CliError::usage)?;
    let mut harness = config.harness.clone();
    if args.fixed_clock_ms.is_some() {
        harness.fixed_clock_ms = args.fixed_clock_ms;
    }
    let plan = SweepPlan {
        tasks,
        budgets,
        modes,
        controller: config.controller.clone(),
        parallel: config.parallel.clone(),
    };
    let backends = config.build_backends()?;
    let clock = harness.clock();
    let outcome = sweep(&plan, &harness, &backends, clock.as_ref(), &args.out).await?;
    let usable = if outcome.failures.is_empty() {
        outcome.records.clone()
    } else {
        balanced(&outcome.records)
    };
    let curves = build_curves(&usable)?;
    write_file(&args.out.join(CURVES_FILE), &curves_csv(&curves))?;
    say!("records: {}", outcome.records.len());
    say!("computed: {}", outcome.computed);
    say!("reused: {}", outcome.reused);
    say!("failed: {}", outcome.failures.len());
    say!("images_charged: {}", outcome.images_charged);
    say!("blobs_created: {}", outcome.blobs_created);
    if let Some(first) = outcome.failures.first() {
        return Err(CliError::backend(format!(
            "{} cells failed; first {}/{}/{}: {}",
            outcome.failures.len(),
            first.task_id,
            first.mode,
            first.budget,
            first.error
        )));
    }
    Ok(())
}

fn stats(args: &StatsArgs) -> Result<(), CliError> {
    let dataset = read_jsonl(&args.input).map_err(CliError::data)?;
    let s = round_statistics(&dataset);
    say!("count: {}", s.count);
    say!("mean_rounds: {}", s.mean_rounds);
    say!("min: {}", s.min);
    say!("max: {}", s.max);
    let hist: Vec<String> = s.histogram.iter().map(|(k, n)| format!("{k}={n}")).collect();
    say!("histogram: {}", hist.join(" "));
    Ok(())
}

async fn mock_serve(args: &MockServeArgs, config: &EngineConfig) -> Result<(), CliError> {
    let store = Arc::new(crate::blob_store::BlobStore::open(&config.store_root).map_err(CliError::usage)?);
    let endpoint: Arc<dyn Endpoint> = match (&args.script, args.stochastic_seed) {
        (Some(path), _) => {
            let script = Script::load(path, Some(args.role)).map_err(CliError::usage)?;
            Arc::new(ScriptedMock::new(script, store))
        }
        (None, Some(seed)) => {
            let policy: StochasticPolicy = match &args.policy {
                Some(p) => serde_json::from_str(&read_text(p)?).map_err(CliError::usage)?,
                None => StochasticPolicy::default(),
            };
            Arc::new(StochasticMock::new(seed, policy, store).map_err(CliError::usage)?)
        }
        (None, None) => return Err(CliError::usage("mock-serve needs --script or --stochastic-seed")),
    };
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", args.port))
        .await
        .map_err(|e| CliError::usage(format!("bind 127.0.0.1:{}: {e}", args.port)))?;
    let addr = listener.local_addr().map_err(CliError::usage)?;
    say!("listening on http://{addr}");
    use std::io::Write as _;
    let _ = std::io::stdout().flush();
    axum::serve(listener, router(args.role, endpoint))
        .await
        .map_err(|e| CliError::backend(format!("server stopped: {e}")))
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("COTSCALE_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_BACKEND);
        }
    };
    match runtime.block_on(run(cli, std::env::vars().collect())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
