//! Experiment runner behind the `mapd` binary.
//!
//! A run expands `--agents × --strategy × --cost × --seed` into one
//! simulation each and writes, under `--out`:
//!
//! - `results.csv`: one row per simulation, columns as in [`ResultRow`];
//! - `summary.json`: a [`Summary`] with the full configuration of every run;
//! - `steps/<run>.csv`: the per-step trace
//!   (`step,throughput,assignment_cost,solver_ms,timeouts`);
//! - `trace/<run>.jsonl` with `--trace`: one JSON object per step holding
//!   the actions and resulting locations of every agent.
//!
//! In logical mode all timing columns are left empty.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mapd_core::cost_models::CostModelKind;
use mapd_core::grid_map::{parse_map, GridMap};
use mapd_core::simulator::{
    random_map, warehouse_map, RunSummary, SimConfig, SimMetrics, Simulator, Strategy, TaskDistribution, TaskPolicy,
    TimingStats,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "mapd", version, about = "Lifelong multi-agent pickup and delivery experiments")]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time the assignment stage per strategy and agent count.
    Bench(BenchArgs),
    /// Write a generated map in MovingAI format.
    GenMap(GenMapArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Map file in MovingAI format.
    #[arg(long, env = "MAPD_MAP", required = true)]
    pub map: Option<PathBuf>,
    /// Agent counts, comma separated.
    #[arg(long, env = "MAPD_AGENTS", value_delimiter = ',', required = true)]
    pub agents: Vec<usize>,
    /// Assignment strategies: greedy, linear, flow.
    #[arg(long, env = "MAPD_STRATEGY", value_delimiter = ',', default_value = "flow")]
    pub strategy: Vec<Strategy>,
    /// Edge cost models: unit, traffic, avg-wait.
    #[arg(long, env = "MAPD_COST", value_delimiter = ',', default_value = "unit")]
    pub cost: Vec<CostModelKind>,
    /// Decay factor of the observed-wait statistics.
    #[arg(long, env = "MAPD_GAMMA", default_value_t = 0.9)]
    pub gamma: f64,
    /// Keep ceil(r * agents) tasks in the pool.
    #[arg(long, env = "MAPD_POOL_RATIO", conflicts_with = "release_f")]
    pub pool_ratio: Option<f64>,
    /// Release this many tasks every step instead of topping up the pool.
    #[arg(long, env = "MAPD_RELEASE_F")]
    pub release_f: Option<u32>,
    /// Total number of tasks; the run stops once all are delivered.
    #[arg(long, env = "MAPD_TASK_BUDGET")]
    pub task_budget: Option<u64>,
    /// Run the assignment strategy every k steps.
    #[arg(long, env = "MAPD_SCHEDULE_K", default_value_t = 1)]
    pub schedule_k: u64,
    /// Horizon in steps.
    #[arg(long, env = "MAPD_STEPS", default_value_t = 1000)]
    pub steps: u64,
    /// Per-step planning budget in milliseconds.
    #[arg(long, env = "MAPD_BUDGET_MS", conflicts_with = "logical")]
    pub budget_ms: Option<f64>,
    /// Ignore wall-clock budgets (the default).
    #[arg(long, env = "MAPD_LOGICAL")]
    pub logical: bool,
    /// Seeds, comma separated.
    #[arg(long, env = "MAPD_SEED", value_delimiter = ',', default_value = "1")]
    pub seed: Vec<u64>,
    /// Task distribution: uniform or labeled-es.
    #[arg(long, env = "MAPD_DISTRIBUTION", default_value = "uniform")]
    pub distribution: TaskDistribution,
    /// Output directory.
    #[arg(long, env = "MAPD_OUT", default_value = "results")]
    pub out: PathBuf,
    /// Also write per-step action traces.
    #[arg(long, env = "MAPD_TRACE")]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, env = "MAPD_MAP")]
    pub map: PathBuf,
    /// Agent counts, comma separated. May be empty.
    #[arg(long, env = "MAPD_AGENTS", value_delimiter = ',', num_args = 0..)]
    pub agents: Vec<usize>,
    #[arg(long, env = "MAPD_STRATEGY", value_delimiter = ',', default_value = "linear,flow")]
    pub strategy: Vec<Strategy>,
    #[arg(long, env = "MAPD_COST", default_value = "unit")]
    pub cost: CostModelKind,
    /// One simulation per seed; each contributes its timed steps.
    #[arg(long, env = "MAPD_SEED", value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seed: Vec<u64>,
    /// Steps per simulation. With 1 every sample is a full-size problem.
    #[arg(long, env = "MAPD_STEPS", default_value_t = 1)]
    pub steps: u64,
    /// Output CSV file; standard output when absent.
    #[arg(long, env = "MAPD_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MapKind {
    Random,
    Warehouse,
}

#[derive(Debug, Args)]
pub struct GenMapArgs {
    pub kind: MapKind,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 0.2)]
    pub obstacles: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub map: String,
    pub strategy: Strategy,
    pub cost: CostModelKind,
    pub agents: usize,
    pub seed: u64,
    pub steps: u64,
    pub throughput: u64,
    pub makespan: Option<u64>,
    pub timeouts: u64,
    pub assignment_calls: u64,
    pub tasks_released: u64,
    pub solver_ms_p50: Option<f64>,
    pub solver_ms_p95: Option<f64>,
    pub solver_ms_max: Option<f64>,
}

/// One row of the benchmark CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub agents: usize,
    pub samples: usize,
    pub assignment_ms_p50: f64,
    pub assignment_ms_p95: f64,
    pub assignment_ms_max: f64,
    pub solver_ms_p50: f64,
    pub solver_ms_p95: f64,
    pub solver_ms_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub config: SimConfig,
    #[serde(flatten)]
    pub summary: RunSummary,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub map: String,
    pub logical: bool,
    pub runs: Vec<RunEntry>,
}

/// Parses `args` (program name first) and executes the command.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Some(Command::Bench(args)) => bench(&args),
        Some(Command::GenMap(args)) => gen_map(&args),
        None => run_experiments(&cli.run).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_map(path: &Path) -> Result<GridMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading map {}", path.display()))?;
    parse_map(&text).with_context(|| format!("parsing map {}", path.display()))
}

/// Simulation configurations in output order: agents, strategy, cost, seed.
pub fn expand(args: &RunArgs) -> Result<Vec<SimConfig>> {
    if args.seed.is_empty() {
        bail!("at least one seed is required");
    }
    let policy = match (args.release_f, args.pool_ratio) {
        (Some(f), _) => TaskPolicy::PerStep { per_step: f },
        (None, r) => TaskPolicy::ConstantRatio { ratio: r.unwrap_or(1.5) },
    };
    let mut configs = Vec::new();
    for &n in &args.agents {
        for &strategy in &args.strategy {
            for &cost in &args.cost {
                for &seed in &args.seed {
                    let config = SimConfig {
                        cost,
                        gamma: args.gamma,
                        policy,
                        task_budget: args.task_budget,
                        schedule_k: args.schedule_k,
                        horizon: args.steps,
                        budget_ms: args.budget_ms,
                        seed,
                        distribution: args.distribution,
                        ..SimConfig::new(strategy, n)
                    };
                    config.validate()?;
                    configs.push(config);
                }
            }
        }
    }
    Ok(configs)
}

fn run_name(c: &SimConfig) -> String {
    format!("{}-{}-n{}-s{}", c.strategy.name(), c.cost.name(), c.agents, c.seed)
}

fn simulate(map: &GridMap, config: &SimConfig, trace: Option<&Path>) -> Result<SimMetrics> {
    let mut sim = Simulator::new(map, config.clone())?;
    let mut out = match trace {
        Some(p) => Some(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    while !sim.is_finished() {
        let report = sim.step()?;
        if let Some(w) = out.as_mut() {
            serde_json::to_writer(&mut *w, &report)?;
            w.write_all(b"\n")?;
        }
    }
    if let Some(mut w) = out {
        w.flush()?;
    }
    Ok(sim.into_metrics())
}

/// Runs the full matrix and writes all output files.
pub fn run_experiments(args: &RunArgs) -> Result<Summary> {
    let map_path = args.map.as_deref().context("--map is required")?;
    let map = load_map(map_path)?;
    let configs = expand(args)?;
    let logical = args.budget_ms.is_none();

    let steps_dir = args.out.join("steps");
    fs::create_dir_all(&steps_dir).with_context(|| format!("creating {}", steps_dir.display()))?;
    let trace_dir = args.out.join("trace");
    if args.trace {
        fs::create_dir_all(&trace_dir)?;
    }
    let mut results = csv::Writer::from_path(args.out.join("results.csv"))?;
    let map_name = map_path.display().to_string();
    let mut runs = Vec::new();

    for config in configs {
        let name = run_name(&config);
        let trace = args.trace.then(|| trace_dir.join(format!("{name}.jsonl")));
        let metrics = simulate(&map, &config, trace.as_deref()).with_context(|| format!("run {name}"))?;
        fs::write(steps_dir.join(format!("{name}.csv")), metrics.steps_csv(logical))?;

        let summary = RunSummary::new(&config, &metrics);
        let timing = (!logical).then_some(summary.solver_ms);
        results.serialize(ResultRow {
            map: map_name.clone(),
            strategy: config.strategy,
            cost: config.cost,
            agents: config.agents,
            seed: config.seed,
            steps: summary.steps,
            throughput: summary.throughput,
            makespan: summary.makespan,
            timeouts: summary.timeouts,
            assignment_calls: summary.assignment_calls,
            tasks_released: summary.tasks_released,
            solver_ms_p50: timing.map(|t| t.p50),
            solver_ms_p95: timing.map(|t| t.p95),
            solver_ms_max: timing.map(|t| t.max),
        })?;
        println!(
            "{name}: throughput {} makespan {:?} timeouts {}",
            summary.throughput, summary.makespan, summary.timeouts
        );
        runs.push(RunEntry { config, summary });
    }
    results.flush()?;

    let summary = Summary { map: map_name, logical, runs };
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Assignment and planning times per strategy and agent count.
pub fn bench_scaling(map: &GridMap, args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &strategy in &args.strategy {
        for &n in &args.agents {
            let mut assignment = Vec::new();
            let mut solver = Vec::new();
            for &seed in &args.seed {
                let config = SimConfig { cost: args.cost, horizon: args.steps, seed, ..SimConfig::new(strategy, n) };
                let metrics = simulate(map, &config, None)?;
                for r in &metrics.records {
                    if r.assignment_cost.is_some() {
                        assignment.push(r.assignment_ms);
                    }
                    solver.push(r.solver_ms);
                }
            }
            let (a, s) = (TimingStats::from_samples(&assignment), TimingStats::from_samples(&solver));
            rows.push(BenchRow {
                strategy,
                agents: n,
                samples: assignment.len(),
                assignment_ms_p50: a.p50,
                assignment_ms_p95: a.p95,
                assignment_ms_max: a.max,
                solver_ms_p50: s.p50,
                solver_ms_p95: s.p95,
                solver_ms_max: s.max,
            });
        }
    }
    Ok(rows)
}

fn bench(args: &BenchArgs) -> Result<()> {
    let map = load_map(&args.map)?;
    let rows = bench_scaling(&map, args)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record([
        "strategy",
        "agents",
        "samples",
        "assignment_ms_p50",
        "assignment_ms_p95",
        "assignment_ms_max",
        "solver_ms_p50",
        "solver_ms_p95",
        "solver_ms_max",
    ])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn generate_map(args: &GenMapArgs) -> GridMap {
    match args.kind {
        MapKind::Random => random_map(args.width, args.height, args.obstacles, args.seed),
        MapKind::Warehouse => warehouse_map(),
    }
}

fn gen_map(args: &GenMapArgs) -> Result<()> {
    let text = generate_map(args).to_map_string();
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
