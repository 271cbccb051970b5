//! `flexvfl`: dataset generation, simulated runs, protocol comparisons,
//! the adaptive-rate study and bound checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flexvfl_core::data::{synth_regression, write_csv};
use flexvfl_core::experiment::{
    adapt_study, check_bounds, run_grid, summarize, write_adapt_pairs, write_adapt_summary_csv, write_cells,
    ExperimentPlan,
};
use flexvfl_core::metrics::{
    format_table, write_grid_summary_csv, write_json, write_rounds_jsonl, write_run_summary_csv, write_timeline_jsonl,
    RunSummary,
};
use flexvfl_core::protocol::{run_protocol, RunStatus, TargetConfig, TargetMetric};
use flexvfl_core::{Error, RunConfig};
use log::{info, warn};
use serde_json::json;

const DEFAULT_OUT: &str = "out";

#[derive(Parser)]
#[command(
    name = "flexvfl",
    version,
    about = "Simulated vertical federated learning with flexible local iterations"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "FLEXVFL_OUT_DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic regression dataset and its metadata.
    GenData(GenDataArgs),
    /// Run one configuration and write its timeline and summary.
    Run(RunArgs),
    /// Run a protocol × t_comm × seed grid and tabulate time to target.
    Compare(CompareArgs),
    /// Compare adaptive and static learning rates on identical seeds.
    AdaptStudy(AdaptArgs),
    /// Evaluate the drift and descent inequalities on a quadratic testbed.
    CheckBounds(CheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    features: usize,
    #[arg(long, default_value_t = 4)]
    parties: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the per-round communication latency.
    #[arg(long = "t-comm")]
    t_comm: Option<f64>,
    /// Target as `loss=<v>` or `metric=<v>`.
    #[arg(long, value_parser = parse_target)]
    target: Option<TargetConfig>,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment plan (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the plan's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the plan's latencies.
    #[arg(long = "t-comm", value_delimiter = ',')]
    t_comm: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_target)]
    target: Option<TargetConfig>,
    /// Cells run concurrently.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args)]
struct AdaptArgs {
    /// Run configuration with trace-driven speeds (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_parser = parse_target)]
    target: Option<TargetConfig>,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Run configuration for a linear model with the sum head (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Batch draws for mini-batch estimates.
    #[arg(long, default_value_t = 200)]
    draws: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_target(s: &str) -> std::result::Result<TargetConfig, String> {
    let (metric, value) = s.split_once('=').ok_or("expected loss=<value> or metric=<value>")?;
    let metric = match metric.trim() {
        "loss" => TargetMetric::Loss,
        "metric" => TargetMetric::Metric,
        other => return Err(format!("unknown target metric {other:?}")),
    };
    let value: f64 = value.trim().parse().map_err(|e| format!("bad target value: {e}"))?;
    if !value.is_finite() {
        return Err("target value must be finite".into());
    }
    Ok(TargetConfig { metric, value })
}

fn out_dir(cli: Option<&Path>, fallback: Option<&Path>) -> PathBuf {
    cli.or(fallback).unwrap_or(Path::new(DEFAULT_OUT)).to_path_buf()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn gen_data(out: &Path, args: &GenDataArgs) -> Result<()> {
    let s = synth_regression(args.seed, args.samples, args.features, args.parties, args.noise)?;
    create_dir(out)?;
    let data_path = out.join("data.csv");
    write_csv(&data_path, &s.dataset.concatenated(), s.dataset.labels(), true)?;
    let meta = json!({
        "schema": "flexvfl.dataset.v1",
        "seed": args.seed,
        "n_samples": args.samples,
        "n_features": args.features,
        "parties": args.parties,
        "widths": s.dataset.widths(),
        "noise_std": args.noise,
        "label_column": args.features,
        "header": true,
        "f_inf": s.f_inf,
        "true_weights": s.true_weights,
        "ls_solution": s.ls_solution,
    });
    write_json(&out.join("metadata.json"), &meta)?;
    println!(
        "wrote {} ({} x {}), F_inf = {}",
        data_path.display(),
        args.samples,
        args.features,
        s.f_inf
    );
    Ok(())
}

fn run(out: &Path, args: &RunArgs) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.t_comm {
        cfg.clock.t_comm = t;
    }
    if args.target.is_some() {
        cfg.target = args.target;
    }
    info!("running {} for {} rounds", cfg.protocol, cfg.rounds);
    let result = run_protocol(&cfg)?;
    write_timeline_jsonl(&out.join("timeline.jsonl"), &result)?;
    write_rounds_jsonl(&out.join("rounds.jsonl"), &result)?;
    let summary = RunSummary::of(&result, cfg.target.as_ref());
    write_run_summary_csv(&out.join("summary.csv"), std::slice::from_ref(&summary))?;
    let cell = |v: Option<f64>| v.map_or("--".to_string(), |x| x.to_string());
    println!(
        "{} seed {}: final metric {}, time to target {}, {} scalars exchanged",
        summary.protocol,
        summary.seed,
        cell(summary.final_metric),
        cell(summary.time_to_target),
        summary.total_comm
    );
    if let RunStatus::Diverged { round, message } = &result.status {
        return Err(Error::Numerical(format!("run diverged at round {round}: {message}")).into());
    }
    Ok(())
}

fn compare(cli_out: Option<&Path>, args: &CompareArgs) -> Result<()> {
    let mut plan = ExperimentPlan::from_file(&args.config)?;
    if let Some(seeds) = &args.seeds {
        plan.seeds = seeds.clone();
    }
    if let Some(t) = &args.t_comm {
        plan.t_comm = t.clone();
    }
    if let Some(target) = args.target {
        plan.target = target;
    }
    plan.validate()?;
    let out = out_dir(cli_out, plan.out_dir.as_deref());
    info!("running {} cells on {} workers", plan.cells().len(), args.jobs);
    let outcomes = run_grid(&plan, args.jobs)?;
    for o in &outcomes {
        if let Err(msg) = &o.result {
            warn!("cell {} failed: {msg}", o.cell.stem());
        }
    }
    let runs = write_cells(&out, &outcomes, &plan.target)?;
    write_run_summary_csv(&out.join("runs.csv"), &runs)?;
    let rows = summarize(&plan, &outcomes);
    write_grid_summary_csv(&out.join("summary.csv"), &rows)?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn adapt(out: &Path, args: &AdaptArgs) -> Result<()> {
    let base = RunConfig::from_file(&args.config)?;
    let target = args
        .target
        .or(base.target)
        .context("adapt-study needs a target in the config or via --target")?;
    let pairs = adapt_study(&base, &args.seeds, args.jobs)?;
    write_adapt_pairs(&out.join("runs"), &pairs)?;
    write_adapt_summary_csv(&out.join("summary.csv"), &pairs, &target)?;
    let mut wins = 0;
    for pair in &pairs {
        let (stat, adaptive) = pair.times(&target);
        let not_slower = match (stat, adaptive) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(s), Some(a)) => a <= s,
        };
        wins += not_slower as usize;
        let cell = |v: Option<f64>| v.map_or("--".to_string(), |x| x.to_string());
        println!("seed {}: static {}, adaptive {}", pair.seed, cell(stat), cell(adaptive));
    }
    println!(
        "adaptive reached the target no later than static on {wins} of {} seeds",
        pairs.len()
    );
    Ok(())
}

fn check(out: &Path, args: &CheckArgs) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.draws < 2 {
        bail!(Error::Config("--draws must be at least 2".into()));
    }
    let report = check_bounds(&cfg, args.draws)?;
    write_json(&out.join("bounds.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenData(a) => gen_data(&out_dir(out, None), a),
        Command::Run(a) => run(&out_dir(out, None), a),
        Command::Compare(a) => compare(out, a),
        Command::AdaptStudy(a) => adapt(&out_dir(out, None), a),
        Command::CheckBounds(a) => check(&out_dir(out, None), a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
