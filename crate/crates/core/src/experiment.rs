//! Protocol × latency × seed grids, the adaptive-versus-static study and
//! the bound-check suite.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    corollary1_check, exact_smoothness_quadratic, lemma1_check, lemma1_check_minibatch, theorem1_check,
    variance_estimate, BoundReport, Corollary1Report, Lemma1Report, Lemma1Setup, SmoothnessEstimate, VarianceEstimate,
};
use crate::data::least_squares_with_intercept;
use crate::error::{Error, Result};
use crate::metrics::{
    csv_err, csv_writer, opt, write_rounds_jsonl, write_timeline_jsonl, RunSummary, SummaryRow, ADAPT_SUMMARY_SCHEMA,
};
use crate::model::GlobalModel;
use crate::protocol::{
    run_from, run_protocol, LrSchedule, PerParticipant, ProtocolKind, RunConfig, RunResult, SmoothnessConfig,
    TargetConfig,
};
use crate::sim::{local_iters, protocol_taus};

/// On-disk form of a plan; `base` is a run config path relative to the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub base: PathBuf,
    pub protocols: Vec<ProtocolKind>,
    pub t_comm: Vec<f64>,
    pub seeds: Vec<u64>,
    pub target: Option<TargetConfig>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub base: RunConfig,
    pub protocols: Vec<ProtocolKind>,
    pub t_comm: Vec<f64>,
    pub seeds: Vec<u64>,
    pub target: TargetConfig,
    pub out_dir: Option<PathBuf>,
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub protocol: ProtocolKind,
    pub t_comm: f64,
    pub seed: u64,
}

impl Cell {
    /// File stem unique within a plan.
    pub fn stem(&self) -> String {
        format!("{}_tcomm{}_seed{}", self.protocol, self.t_comm, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: Cell,
    pub result: std::result::Result<RunResult, String>,
}

impl ExperimentPlan {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PlanFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let base = RunConfig::from_file(&dir.join(&file.base))?;
        let target = file
            .target
            .or(base.target)
            .ok_or_else(|| Error::config("the plan or its base config needs a target"))?;
        let plan = Self {
            base,
            protocols: file.protocols,
            t_comm: file.t_comm,
            seeds: file.seeds,
            target,
            out_dir: file.out_dir.map(|p| dir.join(p)),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() || self.t_comm.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("plan grid is empty"));
        }
        if self.t_comm.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::config("t_comm values must be finite and non-negative"));
        }
        let cells = self.cells();
        let mut stems: Vec<String> = cells.iter().map(Cell::stem).collect();
        stems.sort();
        stems.dedup();
        if stems.len() != cells.len() {
            return Err(Error::config("plan has duplicate cells"));
        }
        self.base.validate()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &protocol in &self.protocols {
            for &t_comm in &self.t_comm {
                for &seed in &self.seeds {
                    cells.push(Cell { protocol, t_comm, seed });
                }
            }
        }
        cells
    }

    pub fn config_for(&self, cell: &Cell) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.protocol = cell.protocol;
        cfg.clock.t_comm = cell.t_comm;
        cfg.seed = cell.seed;
        cfg.target = Some(self.target);
        cfg
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every cell with at most `jobs` in flight. A failing cell is
/// recorded and does not stop the others. Outcomes follow [`ExperimentPlan::cells`].
pub fn run_grid(plan: &ExperimentPlan, jobs: usize) -> Result<Vec<CellOutcome>> {
    let cells = plan.cells();
    let outcomes = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|cell| CellOutcome {
                cell: *cell,
                result: run_protocol(&plan.config_for(cell)).map_err(|e| e.to_string()),
            })
            .collect()
    });
    Ok(outcomes)
}

/// Aggregates outcomes per (protocol, t_comm) in plan order.
pub fn summarize(plan: &ExperimentPlan, outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &protocol in &plan.protocols {
        for &t_comm in &plan.t_comm {
            let mine = outcomes
                .iter()
                .filter(|o| o.cell.protocol == protocol && o.cell.t_comm == t_comm);
            let mut times = Vec::new();
            let mut failures = 0;
            for o in mine {
                match &o.result {
                    Ok(r) if !r.diverged() => times.push(r.time_to_target(&plan.target)),
                    Ok(_) => times.push(None),
                    Err(_) => failures += 1,
                }
            }
            rows.push(SummaryRow::aggregate(protocol, t_comm, &times, failures));
        }
    }
    rows
}

/// Writes one timeline per successful cell under `dir/cells/`.
pub fn write_cells(dir: &Path, outcomes: &[CellOutcome], target: &TargetConfig) -> Result<Vec<RunSummary>> {
    let mut rows = Vec::new();
    for o in outcomes {
        if let Ok(result) = &o.result {
            write_timeline_jsonl(&dir.join("cells").join(format!("{}.jsonl", o.cell.stem())), result)?;
            rows.push(RunSummary::of(result, Some(target)));
        }
    }
    Ok(rows)
}

/// Static learning rate for trace-driven speeds: each participant divides
/// its base rate by the largest iteration count it can reach in any round
/// (its fastest trace entry) times the matching maximum weight.
pub fn static_rates(cfg: &RunConfig, participants: usize) -> Result<Vec<f64>> {
    let speeds = cfg.speed_model(participants)?;
    let opts = cfg.optimizers(participants)?;
    let base = cfg.base_rates(participants)?;
    (0..participants)
        .map(|p| {
            let tau = local_iters(cfg.clock.timeout, speeds.fastest_time(p)?);
            Ok(base[p] / (tau as f64 * opts[p].max_weight(tau)))
        })
        .collect()
}

/// Paired static / adaptive outcome for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptPair {
    pub seed: u64,
    pub static_run: RunResult,
    pub adaptive_run: RunResult,
}

impl AdaptPair {
    pub fn times(&self, target: &TargetConfig) -> (Option<f64>, Option<f64>) {
        (
            self.static_run.time_to_target(target),
            self.adaptive_run.time_to_target(target),
        )
    }
}

/// The two arms of the study for `seed`, starting from `base`.
pub fn adapt_configs(base: &RunConfig, seed: u64) -> Result<(RunConfig, RunConfig)> {
    let data = base.load_dataset()?;
    let participants = data.num_parties() + 1;
    let mut stat = base.clone();
    stat.seed = seed;
    stat.protocol = ProtocolKind::Flex;
    stat.lr.schedule = LrSchedule::Constant;
    stat.lr.base = PerParticipant::Each(static_rates(&stat, participants)?);
    let mut adaptive = base.clone();
    adaptive.seed = seed;
    adaptive.protocol = ProtocolKind::Adaptive;
    Ok((stat, adaptive))
}

pub fn adapt_study(base: &RunConfig, seeds: &[u64], jobs: usize) -> Result<Vec<AdaptPair>> {
    if seeds.is_empty() {
        return Err(Error::config("adapt study needs at least one seed"));
    }
    pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let (stat, adaptive) = adapt_configs(base, seed)?;
                Ok(AdaptPair {
                    seed,
                    static_run: run_protocol(&stat)?,
                    adaptive_run: run_protocol(&adaptive)?,
                })
            })
            .collect()
    })
}

/// Writes both arms' timelines and per-round rate series for every pair.
pub fn write_adapt_pairs(dir: &Path, pairs: &[AdaptPair]) -> Result<()> {
    for pair in pairs {
        for (arm, run) in [("static", &pair.static_run), ("adaptive", &pair.adaptive_run)] {
            write_timeline_jsonl(&dir.join(format!("{arm}_seed{}.jsonl", pair.seed)), run)?;
            write_rounds_jsonl(&dir.join(format!("{arm}_seed{}_rounds.jsonl", pair.seed)), run)?;
        }
    }
    Ok(())
}

/// One row per seed: both arms' time to target.
pub fn write_adapt_summary_csv(path: &Path, pairs: &[AdaptPair], target: &TargetConfig) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["schema", "seed", "static_time_to_target", "adaptive_time_to_target"])
        .map_err(|e| csv_err(path, e))?;
    for pair in pairs {
        let (stat, adaptive) = pair.times(target);
        w.write_record([
            ADAPT_SUMMARY_SCHEMA.to_string(),
            pair.seed.to_string(),
            opt(stat),
            opt(adaptive),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Outcome of one bound check: evaluated, or refused because its
/// hypotheses do not hold for this configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum Check<T> {
    Evaluated(T),
    Refused(String),
}

impl<T> Check<T> {
    fn from_result(r: Result<T>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Check::Evaluated(v)),
            Err(Error::Precondition(msg)) => Ok(Check::Refused(msg)),
            Err(e) => Err(e),
        }
    }
}

/// Every inequality evaluated on one configuration of the quadratic testbed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub schema: &'static str,
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub smoothness: SmoothnessEstimate,
    pub f_inf: f64,
    /// Largest squared batch-gradient deviation seen at the initial model.
    pub variance: Option<VarianceEstimate>,
    /// One entry per participant, server first.
    pub lemma1: Vec<Check<Lemma1Report>>,
    pub theorem1: Check<BoundReport>,
    pub corollary1: Check<Corollary1Report>,
}

pub const BOUNDS_SCHEMA: &str = "flexvfl.bounds.v1";

/// Runs the drift and descent checks for `cfg`. Needs a model whose
/// smoothness constants and optimum are exact (linear parties, sum head).
/// Missing `[smoothness]` constants are filled in with the exact ones.
pub fn check_bounds(cfg: &RunConfig, draws: usize) -> Result<BoundsReport> {
    let data = cfg.load_dataset()?;
    let spec = cfg.model.spec()?;
    let smoothness = exact_smoothness_quadratic(&data, &spec)?;
    let mut cfg = cfg.clone();
    cfg.record_grad_norms = true;
    if cfg.smoothness.is_none() {
        cfg.smoothness = Some(SmoothnessConfig {
            l: smoothness.l,
            l_k: smoothness.l_k.clone(),
        });
    }
    cfg.validate()?;
    let (_, f_inf) = least_squares_with_intercept(&data.concatenated(), data.labels())?;
    let participants = data.num_parties() + 1;
    let model = GlobalModel::init(&spec, &data.widths(), cfg.seed)?;
    let full_batch = cfg.batch_size >= data.n_samples();
    let variance = if full_batch {
        None
    } else {
        Some(variance_estimate(&model, &data, cfg.batch_size, draws, cfg.seed)?)
    };
    let sigma_sq = variance
        .as_ref()
        .map_or_else(|| vec![0.0; participants], |v| v.sigma_sq.clone());

    let speeds = cfg.speed_model(participants)?;
    let natural = (0..participants)
        .map(|p| Ok(local_iters(cfg.clock.timeout, speeds.per_iter_time(p, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    let taus = protocol_taus(cfg.protocol, &natural);
    let opts = cfg.optimizers(participants)?;
    let mut lemma1 = Vec::with_capacity(participants);
    for p in 0..participants {
        let mut setup = Lemma1Setup {
            participant: p,
            optimizer: opts[p],
            tau: taus[p],
            eta: 0.0,
            l_k: smoothness.l_k[p],
        };
        setup.eta = setup.admissible_eta();
        let report = if full_batch {
            lemma1_check(&model, &data, &setup)
        } else {
            lemma1_check_minibatch(&model, &data, &setup, sigma_sq[p], cfg.batch_size, draws, cfg.seed)
        };
        lemma1.push(Check::from_result(report)?);
    }

    let run = run_from(&cfg, &data, model)?;
    let theorem1 = Check::from_result(theorem1_check(&run, &smoothness, &sigma_sq, Some(f_inf)))?;
    let shared_sigma = sigma_sq.iter().copied().fold(0.0, f64::max);
    let corollary1 = Check::from_result(corollary1_check(&run, &smoothness, shared_sigma, Some(f_inf)))?;
    Ok(BoundsReport {
        schema: BOUNDS_SCHEMA,
        protocol: cfg.protocol,
        seed: cfg.seed,
        smoothness,
        f_inf,
        variance,
        lemma1,
        theorem1,
        corollary1,
    })
}
