//! The `splitsim` command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 a round in which every selected device dropped out, 4 an infeasible
//! memory plan, 5 one or more failed sweep cells.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::central_manager::{brute_force_select, bo_select, SelectionOutcome};
use crate::error::Error;
use crate::memory_reducer::DeviceChain;
use crate::model_graph::ModelGraph;
use crate::sim_engine::report::{csv_bytes, quantile, read_round_rows, write_atomic, write_run};
use crate::sim_engine::{
    generate_fleet, run_simulation_with, PolicyKind, ScenarioConfig, Simulation, Summary,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ALL_DROPOUT: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_SWEEP_CELL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "splitsim", version, about = "Split federated learning planner and round simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write its reports.
    Run(RunArgs),
    /// Run every policy/seed combination of a scenario.
    Sweep(SweepArgs),
    /// Solve one round's device and cut selection.
    Select(SelectArgs),
    /// Print the recomputation plan for a model, cut and budget.
    PlanMemory(PlanArgs),
    /// Generate a scenario's fleet and save it as an explicit fleet file.
    FleetGen(FleetGenArgs),
    /// Summarize `rounds.csv` files from earlier runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Replaces `seeds.master`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `dotted.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write per-round edge cache snapshots to `mec_trace.jsonl`.
    #[arg(long)]
    pub trace_mec: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    /// Comma-separated policy names; defaults to the scenario's policy.
    #[arg(long, value_delimiter = ',')]
    pub policies: Vec<PolicyKind>,
    /// Comma-separated master seeds; defaults to the scenario's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Enumerate every assignment instead of searching (small problems only).
    #[arg(long)]
    pub exhaustive: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// `builtin:<name>` or a profile path.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub cut: usize,
    /// Device memory budget in bytes.
    #[arg(long)]
    pub budget: f64,
    #[arg(long, default_value_t = 1)]
    pub batch: u32,
    /// Layers per segment; ceil(sqrt(cut)) when omitted.
    #[arg(long)]
    pub segment_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FleetGenArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories or `rounds.csv` files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maps a library error onto the documented exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse { .. } | Error::Io { .. } => EXIT_CONFIG,
        Error::AllDropout { .. } => EXIT_ALL_DROPOUT,
        Error::InfeasiblePlan { .. } => EXIT_INFEASIBLE,
        _ => EXIT_FAILURE,
    }
}

fn load_scenario(args: &ScenarioArgs) -> crate::Result<ScenarioConfig> {
    let mut config = ScenarioConfig::load(&args.scenario)?;
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        config.seeds.master = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out`. Returns the exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Select(a) => cmd_select(&a, out),
        Command::PlanMemory(a) => cmd_plan_memory(&a, out),
        Command::FleetGen(a) => cmd_fleet_gen(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn std::io::Write) -> crate::Result<i32> {
    let config = load_scenario(&args.scenario)?;
    let mut trace = String::new();
    let mut trace_err = None;
    let output = run_simulation_with(config, |report, sim| {
        log::info!(
            "round {}: T_system {:.3} s, {} dropouts",
            report.round,
            report.t_system_s,
            report.num_dropouts()
        );
        if args.trace_mec {
            match serde_json::to_string(&sim.mec_snapshot()) {
                Ok(line) => {
                    trace.push_str(&line);
                    trace.push('\n');
                }
                Err(e) => trace_err = Some(e),
            }
        }
    })?;
    if let Some(e) = trace_err {
        return Err(Error::Domain(format!("mec trace: {e}")));
    }
    write_run(&args.out, &output.rounds, &output.summary)?;
    if args.trace_mec {
        write_atomic(&args.out.join("mec_trace.jsonl"), trace.as_bytes())?;
    }
    let s = &output.summary;
    writeln!(
        out,
        "{}: {} rounds, median T_system {:.3} s, total comm {} B, {} dropouts -> {}",
        s.policy,
        s.rounds,
        s.median_t_system_s,
        s.total_comm_bytes,
        s.total_dropouts,
        args.out.display()
    )
    .map_err(io_err(&args.out))?;
    Ok(EXIT_OK)
}

/// One line of a sweep's `aggregate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub cell: String,
    pub policy: String,
    pub seed: u64,
    pub status: String,
    pub rounds: usize,
    pub mean_t_system_s: f64,
    pub median_t_system_s: f64,
    pub p95_t_system_s: f64,
    pub total_comm_bytes: u64,
    pub total_dropouts: usize,
    pub final_active_samples: u64,
    pub mean_peak_memory_bytes: f64,
}

impl AggregateRow {
    fn of(cell: String, summary: &Summary) -> Self {
        AggregateRow {
            cell,
            policy: summary.policy.clone(),
            seed: summary.seed,
            status: "ok".into(),
            rounds: summary.rounds,
            mean_t_system_s: summary.mean_t_system_s,
            median_t_system_s: summary.median_t_system_s,
            p95_t_system_s: summary.p95_t_system_s,
            total_comm_bytes: summary.total_comm_bytes,
            total_dropouts: summary.total_dropouts,
            final_active_samples: summary.final_active_samples,
            mean_peak_memory_bytes: summary.mean_peak_memory_bytes,
        }
    }

    fn failed(cell: String, policy: PolicyKind, seed: u64, err: &Error) -> Self {
        AggregateRow {
            cell,
            policy: policy.to_string(),
            seed,
            status: format!("failed: {err}"),
            rounds: 0,
            mean_t_system_s: f64::NAN,
            median_t_system_s: f64::NAN,
            p95_t_system_s: f64::NAN,
            total_comm_bytes: 0,
            total_dropouts: 0,
            final_active_samples: 0,
            mean_peak_memory_bytes: f64::NAN,
        }
    }
}

pub fn cell_name(policy: PolicyKind, seed: u64) -> String {
    format!("{policy}_seed{seed}")
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn std::io::Write) -> crate::Result<i32> {
    let base = load_scenario(&args.scenario)?;
    let policies = if args.policies.is_empty() {
        vec![base.policy.name]
    } else {
        args.policies.clone()
    };
    let seeds = if args.seeds.is_empty() {
        vec![base.seeds.master]
    } else {
        args.seeds.clone()
    };
    let cells: Vec<(PolicyKind, u64)> = policies
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    let log_lock = Mutex::new(());
    let rows: Vec<AggregateRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(policy, seed)| {
                let name = cell_name(policy, seed);
                let mut config = base.clone();
                config.policy.name = policy;
                config.seeds.master = seed;
                let result = run_simulation_with(config, |_, _| {}).and_then(|o| {
                    write_run(&args.out.join(&name), &o.rounds, &o.summary)?;
                    Ok(o.summary)
                });
                match result {
                    Ok(summary) => AggregateRow::of(name, &summary),
                    Err(e) => {
                        let _guard = log_lock.lock();
                        log::error!("cell {name} failed: {e}");
                        AggregateRow::failed(name, policy, seed, &e)
                    }
                }
            })
            .collect()
    });
    write_atomic(&args.out.join("aggregate.csv"), &csv_bytes(&rows)?)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    writeln!(
        out,
        "{} cells, {failed} failed -> {}",
        rows.len(),
        args.out.join("aggregate.csv").display()
    )
    .map_err(io_err(&args.out))?;
    Ok(if failed > 0 { EXIT_SWEEP_CELL } else { EXIT_OK })
}

pub fn cmd_select(args: &SelectArgs, out: &mut dyn std::io::Write) -> crate::Result<i32> {
    let config = load_scenario(&args.scenario)?;
    let seed = config.seeds.master;
    let eval_budget = config.policy.eval_budget;
    let bo = config.policy.bo.clone();
    let sim = Simulation::new(config)?;
    let problem = sim.selection_problem()?;
    let outcome: SelectionOutcome = if args.exhaustive {
        brute_force_select(&problem)?
    } else {
        bo_select(&problem, eval_budget, seed, &bo)?
    };
    let mut text = String::new();
    let _ = writeln!(text, "device,cut,dis,data_size,latency_s");
    for (i, cut) in outcome.assignment.selected() {
        let d = &problem.devices[i];
        let _ = writeln!(
            text,
            "{},{},{:.6},{},{:.6}",
            d.id,
            cut,
            d.dis,
            d.data_size,
            d.latency_by_cut[cut - 1]
        );
    }
    let _ = writeln!(text, "objective,{:.6}", outcome.objective);
    let _ = writeln!(text, "evaluations,{}", outcome.evaluations);
    out.write_all(text.as_bytes()).map_err(io_err(&args.scenario.scenario))?;
    Ok(EXIT_OK)
}

pub fn cmd_plan_memory(args: &PlanArgs, out: &mut dyn std::io::Write) -> crate::Result<i32> {
    let graph = ModelGraph::resolve(&args.model, Path::new("."))?;
    if args.batch == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let chain = DeviceChain::new(&graph, args.cut, args.batch, args.segment_size)?;
    let plan = chain.plan(args.budget)?;
    let mut text = String::new();
    let _ = writeln!(text, "segment,layers,strategy,peak_bytes,overhead_flops");
    for (i, s) in plan.segments.iter().enumerate() {
        let _ = writeln!(
            text,
            "{},{}-{},{},{},{}",
            i + 1,
            s.spec.start_layer,
            s.spec.end_layer,
            s.strategy,
            s.peak_bytes,
            s.extra_forward_flops
        );
    }
    let _ = writeln!(
        text,
        "total,1-{},{},{},{}",
        args.cut,
        plan.strategy_string(),
        chain.param_state_bytes + plan.peak_memory_bytes as f64,
        plan.extra_forward_flops
    );
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("stdout")))?;
    Ok(EXIT_OK)
}

pub fn cmd_fleet_gen(args: &FleetGenArgs, out: &mut dyn std::io::Write) -> crate::Result<i32> {
    let config = load_scenario(&args.scenario)?;
    let spec = config.fleet.spec(&config.base_dir)?;
    let fleet = generate_fleet(&spec, &config.dynamics, config.seeds.master)?;
    let saved = fleet.to_spec(spec.num_classes, &spec.partition);
    write_atomic(&args.out, saved.to_toml_string().as_bytes())?;
    writeln!(out, "{} devices -> {}", fleet.devices.len(), args.out.display()).map_err(io_err(&args.out))?;
    Ok(EXIT_OK)
}

/// Summary recomputed from one `rounds.csv`.
pub fn summarize_csv(path: &Path) -> crate::Result<Summary> {
    let rows = read_round_rows(path)?;
    let policy = rows.first().map(|r| r.policy.clone()).unwrap_or_default();
    Ok(Summary::from_rows(&rows, &policy, 0))
}

fn summary_seed(path: &Path) -> Option<u64> {
    let text = std::fs::read_to_string(path).ok()?;
    toml::from_str::<Summary>(&text).ok().map(|s| s.seed)
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn std::io::Write) -> crate::Result<i32> {
    let mut rows = Vec::with_capacity(args.inputs.len());
    for input in &args.inputs {
        let csv = if input.is_dir() {
            input.join("rounds.csv")
        } else {
            input.clone()
        };
        let mut s = summarize_csv(&csv)?;
        if let Some(seed) = csv.parent().and_then(|p| summary_seed(&p.join("summary.toml"))) {
            s.seed = seed;
        }
        let cell = csv
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push(AggregateRow::of(cell, &s));
    }
    let bytes = csv_bytes(&rows)?;
    match &args.out {
        Some(path) => write_atomic(path, &bytes)?,
        None => out.write_all(&bytes).map_err(io_err(Path::new("stdout")))?,
    }
    Ok(EXIT_OK)
}

/// Median of the per-cell medians, by policy, skipping failed cells.
pub fn policy_medians(rows: &[AggregateRow]) -> Vec<(String, f64)> {
    let mut policies: Vec<String> = rows.iter().map(|r| r.policy.clone()).collect();
    policies.sort();
    policies.dedup();
    policies
        .into_iter()
        .map(|p| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.policy == p && r.status == "ok")
                .map(|r| r.median_t_system_s)
                .collect();
            (p, quantile(&v, 0.5))
        })
        .collect()
}
