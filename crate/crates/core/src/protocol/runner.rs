use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, time_to_target, Direction, Evaluation};
use super::{vafl, LrSchedule, ProtocolKind, RunConfig, TargetConfig};
use crate::analysis::{adaptive_lr, lr_constraint_max};
use crate::data::{sample_batch, VerticalDataset};
use crate::error::{Error, Result};
use crate::model::{block_gradients, participant_grad, GlobalModel, Snapshot};
use crate::optim::{run_local_round, weights_for, LocalOptimizer};
use crate::sim::{comm_cost, local_iters, protocol_taus, round_duration, SimClock, SpeedModel};

/// One timeline entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub time: f64,
    /// Completed rounds (server updates for VAFL).
    pub round: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub grad_norm_sq: Option<f64>,
    pub comm_scalars_cumulative: u64,
}

/// What happened in one synchronous round, per participant (server first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub start_time: f64,
    pub duration: f64,
    pub taus: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub max_weights: Vec<f64>,
    pub sum_weights: Vec<f64>,
    /// `‖∇_k F(Θ^{r,0})‖²` when gradient norms are recorded.
    pub block_grad_norm_sq: Option<Vec<f64>>,
    pub comm_scalars: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { round: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub classification: bool,
    /// Loss and metric of Θ^{0,0}.
    pub initial: Evaluation,
    pub timeline: Vec<Record>,
    pub rounds: Vec<RoundLog>,
    pub model: GlobalModel,
    pub status: RunStatus,
    /// Local updates applied per participant.
    pub update_counts: Vec<u64>,
    /// Rounds × participants whose rate exceeded the smoothness constraint.
    pub constraint_violations: usize,
    /// VAFL only: `(time, party)` of every server update.
    pub event_log: Vec<(f64, usize)>,
}

impl RunResult {
    pub fn time_to_target(&self, target: &TargetConfig) -> Option<f64> {
        let direction = Direction::for_metric(target.metric, self.classification);
        time_to_target(&self.timeline, target.metric, target.value, direction)
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.timeline.last().map(|r| r.eval_metric)
    }

    pub fn total_comm(&self) -> u64 {
        self.timeline.last().map_or(0, |r| r.comm_scalars_cumulative)
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// Per-participant learning rates under the adaptive rule
/// `η_k^{r+1} = η_k / (τ_k^r · max_t w_k^{r,t})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRateState {
    base: Vec<f64>,
    current: Vec<f64>,
    last_taus: Vec<usize>,
    last_max_weights: Vec<f64>,
}

impl LearningRateState {
    /// Starts from the iteration counts and max weights of a dry-run round.
    pub fn from_dry_run(base: Vec<f64>, taus: &[usize], max_weights: &[f64]) -> Self {
        let mut state = Self {
            current: base.clone(),
            base,
            last_taus: Vec::new(),
            last_max_weights: Vec::new(),
        };
        state.observe(taus, max_weights);
        state
    }

    pub fn rates(&self) -> &[f64] {
        &self.current
    }

    pub fn observe(&mut self, taus: &[usize], max_weights: &[f64]) {
        self.current = self
            .base
            .iter()
            .zip(taus)
            .zip(max_weights)
            .map(|((&b, &t), &w)| adaptive_lr(b, t, w))
            .collect();
        self.last_taus = taus.to_vec();
        self.last_max_weights = max_weights.to_vec();
    }

    pub fn last_taus(&self) -> &[usize] {
        &self.last_taus
    }

    pub fn last_max_weights(&self) -> &[f64] {
        &self.last_max_weights
    }
}

/// Loads the configured dataset and runs the configured protocol.
pub fn run_protocol(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    run_with_dataset(cfg, &data)
}

/// Runs from the seeded initial model on `data`.
pub fn run_with_dataset(cfg: &RunConfig, data: &VerticalDataset) -> Result<RunResult> {
    cfg.validate()?;
    let model = GlobalModel::init(&cfg.model.spec()?, &data.widths(), cfg.seed)?;
    run_from(cfg, data, model)
}

/// Runs starting from `model`.
pub fn run_from(cfg: &RunConfig, data: &VerticalDataset, model: GlobalModel) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.protocol == ProtocolKind::Vafl {
        vafl::run_vafl_from(cfg, data, model)
    } else {
        SyncRun::new(cfg, data, model)?.run()
    }
}

pub(crate) struct Participants {
    pub count: usize,
    pub speeds: SpeedModel,
    pub optimizers: Vec<LocalOptimizer>,
    pub base: Vec<f64>,
}

impl Participants {
    pub(crate) fn new(cfg: &RunConfig, data: &VerticalDataset, model: &GlobalModel) -> Result<Self> {
        if data.num_parties() != model.num_parties() {
            return Err(Error::config(format!(
                "dataset has {} parties, model has {}",
                data.num_parties(),
                model.num_parties()
            )));
        }
        if cfg.batch_size > data.n_samples() {
            return Err(Error::config(format!(
                "batch_size {} exceeds the {} samples",
                cfg.batch_size,
                data.n_samples()
            )));
        }
        let count = model.num_parties() + 1;
        if let Some(s) = &cfg.smoothness {
            if s.l_k.len() != count {
                return Err(Error::config(format!("smoothness.L_k needs {count} entries")));
            }
        }
        Ok(Self {
            count,
            speeds: cfg.speed_model(count)?,
            optimizers: cfg.optimizers(count)?,
            base: cfg.base_rates(count)?,
        })
    }
}

struct SyncRun<'a> {
    cfg: &'a RunConfig,
    data: &'a VerticalDataset,
    model: GlobalModel,
    parts: Participants,
    order: Vec<usize>,
}

impl<'a> SyncRun<'a> {
    fn new(cfg: &'a RunConfig, data: &'a VerticalDataset, model: GlobalModel) -> Result<Self> {
        let parts = Participants::new(cfg, data, &model)?;
        let order = match &cfg.execution.order {
            None => (0..parts.count).collect(),
            Some(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..parts.count).collect::<Vec<_>>() {
                    return Err(Error::config(
                        "execution.order must be a permutation of the participants",
                    ));
                }
                order.clone()
            }
        };
        Ok(Self {
            cfg,
            data,
            model,
            parts,
            order,
        })
    }

    fn natural_taus(&self, r: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let per_iter = (0..self.parts.count)
            .map(|p| self.parts.speeds.per_iter_time(p, r))
            .collect::<Result<Vec<_>>>()?;
        let taus = per_iter
            .iter()
            .map(|&t| local_iters(self.cfg.clock.timeout, t))
            .collect();
        Ok((taus, per_iter))
    }

    fn rates(&self, r: usize, taus: &[usize], adaptive: Option<&LearningRateState>) -> Vec<f64> {
        if let Some(state) = adaptive {
            return state.rates().to_vec();
        }
        let base = &self.parts.base;
        match self.cfg.lr.schedule {
            LrSchedule::Constant => base.clone(),
            LrSchedule::InverseDecay => base.iter().map(|b| b / (r + 1) as f64).collect(),
            LrSchedule::Constraint => {
                let s = self.cfg.smoothness.as_ref().expect("validated");
                (0..self.parts.count)
                    .map(|p| lr_constraint_max(s.l, s.l_k[p], taus[p], self.parts.optimizers[p].max_weight(taus[p])))
                    .collect()
            }
        }
    }

    /// Local rounds of every participant against one frozen snapshot.
    fn local_updates(&self, snapshot: &Snapshot, taus: &[usize], lrs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let features = self.data.all_batch_features(&snapshot.batch);
        let model = &self.model;
        let compute = |p: usize| -> Result<Vec<f64>> {
            let grad = |theta: &[f64]| participant_grad(snapshot, model, &features, p, theta);
            run_local_round(&self.parts.optimizers[p], model.block(p), taus[p], lrs[p], grad, false)
                .map(|round| round.theta)
        };
        if self.cfg.execution.parallel {
            (0..self.parts.count).into_par_iter().map(compute).collect()
        } else {
            let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.parts.count];
            for &p in &self.order {
                slots[p] = Some(compute(p)?);
            }
            Ok(slots
                .into_iter()
                .map(|s| s.expect("order covers every participant"))
                .collect())
        }
    }

    fn run(mut self) -> Result<RunResult> {
        let cfg = self.cfg;
        let n = self.parts.count;
        let initial = evaluate(&self.model, self.data)?;
        let mut adaptive = if cfg.protocol == ProtocolKind::Adaptive {
            // Dry-run round: iteration counts under the round-0 speeds, no training.
            let (taus, _) = self.natural_taus(0)?;
            let maxw: Vec<f64> = (0..n).map(|p| self.parts.optimizers[p].max_weight(taus[p])).collect();
            Some(LearningRateState::from_dry_run(self.parts.base.clone(), &taus, &maxw))
        } else {
            None
        };

        let mut clock = SimClock::default();
        let mut comm = 0u64;
        let mut timeline = vec![self.record(0.0, 0, 0)?];
        let mut rounds = Vec::new();
        let mut update_counts = vec![0u64; n];
        let mut violations = 0usize;
        let mut status = RunStatus::Completed;
        let round_comm = comm_cost(
            self.model.num_parties(),
            self.model.server_params.len(),
            cfg.batch_size,
            &self.model.embed_widths(),
        );

        let mut warned = vec![false; n];
        for r in 0..cfg.rounds {
            if cfg.max_time.is_some_and(|m| clock.now() >= m) {
                break;
            }
            let (natural, per_iter) = self.natural_taus(r)?;
            let taus = protocol_taus(self.cfg.protocol, &natural);
            let lrs = self.rates(r, &taus, adaptive.as_ref());
            let schedules = (0..n)
                .map(|p| weights_for(&self.parts.optimizers[p], taus[p], lrs[p]))
                .collect::<Result<Vec<_>>>()?;
            if let Some(s) = &cfg.smoothness {
                for p in 0..n {
                    let bound = lr_constraint_max(s.l, s.l_k[p], taus[p], schedules[p].max_weight());
                    if lrs[p] > bound * (1.0 + 1e-12) {
                        violations += 1;
                        if !warned[p] {
                            warned[p] = true;
                            log::warn!(
                                "round {r}: participant {p} rate {} exceeds constraint {bound}; later violations are only counted",
                                lrs[p]
                            );
                        }
                    }
                }
            }

            let start_time = clock.now();
            let outcome = self.round(r, &taus, &lrs);
            let duration = round_duration(cfg.protocol, &taus, &per_iter, &cfg.clock)?;
            clock.advance(duration);
            comm += round_comm;

            let block_norms = match outcome {
                Ok(norms) => norms,
                Err(Error::Numerical(message)) => {
                    status = RunStatus::Diverged { round: r, message };
                    push_record(&mut timeline, diverged_record(clock.now(), r + 1, comm));
                    break;
                }
                Err(e) => return Err(e),
            };
            for p in 0..n {
                update_counts[p] += taus[p] as u64;
            }
            let max_weights: Vec<f64> = schedules.iter().map(|s| s.max_weight()).collect();
            rounds.push(RoundLog {
                round: r,
                start_time,
                duration,
                taus: taus.clone(),
                learning_rates: lrs.clone(),
                max_weights: max_weights.clone(),
                sum_weights: schedules.iter().map(|s| s.sum_weight()).collect(),
                block_grad_norm_sq: block_norms,
                comm_scalars: round_comm,
            });
            if let Some(state) = adaptive.as_mut() {
                state.observe(&taus, &max_weights);
            }

            if (r + 1) % cfg.clock.eval_period == 0 || r + 1 == cfg.rounds {
                match self.record(clock.now(), r + 1, comm) {
                    Ok(rec) => push_record(&mut timeline, rec),
                    Err(Error::Numerical(message)) => {
                        status = RunStatus::Diverged { round: r, message };
                        push_record(&mut timeline, diverged_record(clock.now(), r + 1, comm));
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        Ok(RunResult {
            protocol: cfg.protocol,
            seed: cfg.seed,
            classification: self.model.head.is_classification(),
            initial,
            timeline,
            rounds,
            model: self.model,
            status,
            update_counts,
            constraint_violations: violations,
            event_log: Vec::new(),
        })
    }

    /// One global round; returns the block gradient norms at Θ^{r,0} if recorded.
    fn round(&mut self, r: usize, taus: &[usize], lrs: &[f64]) -> Result<Option<Vec<f64>>> {
        let norms = if self.cfg.record_grad_norms {
            Some(
                block_gradients(&self.model, self.data)?
                    .iter()
                    .map(|g| g.iter().map(|v| v * v).sum())
                    .collect(),
            )
        } else {
            None
        };
        let batch = sample_batch(self.cfg.seed, r as u64, self.data.n_samples(), self.cfg.batch_size)?;
        let snapshot = Snapshot::capture(&self.model, self.data, batch)?;
        let before = snapshot.checksum();
        let updates = self.local_updates(&snapshot, taus, lrs)?;
        if snapshot.checksum() != before {
            return Err(Error::Contract(format!("snapshot changed during round {r}")));
        }
        for (p, theta) in updates.into_iter().enumerate() {
            *self.model.block_mut(p) = theta;
        }
        Ok(norms)
    }

    fn record(&self, time: f64, round: usize, comm: u64) -> Result<Record> {
        let eval = evaluate(&self.model, self.data)?;
        let grad_norm_sq = if self.cfg.record_grad_norms {
            Some(
                crate::model::full_gradient(&self.model, self.data)?
                    .iter()
                    .map(|v| v * v)
                    .sum(),
            )
        } else {
            None
        };
        Ok(Record {
            time,
            round,
            train_loss: eval.loss,
            eval_metric: eval.metric,
            grad_norm_sq,
            comm_scalars_cumulative: comm,
        })
    }
}

pub(crate) fn diverged_record(time: f64, round: usize, comm: u64) -> Record {
    Record {
        time,
        round,
        train_loss: f64::NAN,
        eval_metric: f64::NAN,
        grad_norm_sq: None,
        comm_scalars_cumulative: comm,
    }
}

/// Appends, replacing the last record when it carries the same timestamp.
pub(crate) fn push_record(timeline: &mut Vec<Record>, rec: Record) {
    match timeline.last_mut() {
        Some(last) if last.time == rec.time => *last = rec,
        _ => timeline.push(rec),
    }
}
