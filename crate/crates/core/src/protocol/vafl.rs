//! Asynchronous baseline: every party exchanges with the server on its own cycle.
//!
//! Event model. The server keeps an `N × O_k` embedding table per party,
//! filled by an initial exchange at time zero. Party `k`'s cycle `c` samples
//! its batch from the shared stream at index `c·K + k`, computes embeddings
//! (one per-iteration time), and sends them upstream (`t_comm / 2`). On
//! arrival the server refreshes those table rows, differentiates the head at
//! its current `θ₀` against the table, takes one `θ₀` step and returns
//! `∂l/∂h_k` downstream (`t_comm / 2`), after which the party takes one `θ_k`
//! step and starts its next cycle. Simultaneous arrivals are served in party
//! index order.

use nalgebra::DMatrix;

use super::eval::evaluate;
use super::runner::{diverged_record, push_record, Participants, Record, RunResult, RunStatus};
use super::{LrSchedule, ProtocolKind, RunConfig};
use crate::analysis::lr_constraint_max;
use crate::data::{sample_batch, VerticalDataset};
use crate::error::{Error, Result};
use crate::model::{participant_grad, GlobalModel, Snapshot};
use crate::optim::run_local_round;

/// Loads the configured dataset and runs the asynchronous baseline.
pub fn run_vafl(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let model = GlobalModel::init(&cfg.model.spec()?, &data.widths(), cfg.seed)?;
    run_vafl_from(cfg, &data, model)
}

struct PartyState {
    cycle: u64,
    start: f64,
    arrival: f64,
}

pub(crate) fn run_vafl_from(cfg: &RunConfig, data: &VerticalDataset, mut model: GlobalModel) -> Result<RunResult> {
    let parts = Participants::new(cfg, data, &model)?;
    let k_parties = model.num_parties();
    let n = data.n_samples();
    let half = cfg.clock.t_comm / 2.0;
    let server_rate = cfg.lr.server.unwrap_or(parts.base[0]);
    if !(server_rate > 0.0) || !server_rate.is_finite() {
        return Err(Error::config("lr.server must be positive"));
    }
    let widths = model.embed_widths();

    let mut table = model
        .parties
        .iter()
        .enumerate()
        .map(|(k, p)| p.embed(data.part(k)))
        .collect::<Result<Vec<DMatrix<f64>>>>()?;
    let mut comm = (n * widths.iter().sum::<usize>()) as u64;

    let initial = evaluate(&model, data)?;
    let mut timeline = vec![Record {
        time: 0.0,
        round: 0,
        train_loss: initial.loss,
        eval_metric: initial.metric,
        grad_norm_sq: grad_norm(cfg, &model, data)?,
        comm_scalars_cumulative: comm,
    }];

    let mut states = Vec::with_capacity(k_parties);
    for k in 0..k_parties {
        let per_iter = parts.speeds.per_iter_time(k + 1, 0)?;
        states.push(PartyState {
            cycle: 0,
            start: 0.0,
            arrival: per_iter + half,
        });
    }

    let mut update_counts = vec![0u64; k_parties + 1];
    let mut event_log = Vec::new();
    let mut status = RunStatus::Completed;
    let mut updates = 0usize;
    let rate = |p: usize, step: u64| -> f64 {
        let base = if p == 0 { server_rate } else { parts.base[p] };
        match cfg.lr.schedule {
            LrSchedule::Constant => base,
            LrSchedule::InverseDecay => base / (step + 1) as f64,
            LrSchedule::Constraint => {
                let s = cfg.smoothness.as_ref().expect("validated");
                lr_constraint_max(s.l, s.l_k[p], 1, parts.optimizers[p].max_weight(1))
            }
        }
    };

    while updates < cfg.rounds {
        let k = (0..k_parties)
            .min_by(|&a, &b| states[a].arrival.total_cmp(&states[b].arrival).then(a.cmp(&b)))
            .expect("at least one party");
        let now = states[k].arrival;
        if cfg.max_time.is_some_and(|m| now > m) {
            break;
        }
        let cycle = states[k].cycle;
        let p = k + 1;
        let outcome = (|| -> Result<()> {
            let batch = sample_batch(cfg.seed, cycle * k_parties as u64 + k as u64, n, cfg.batch_size)?;
            let x = data.batch_features(k, &batch);
            let fresh = model.parties[k].embed(&x)?;
            for (row, &id) in batch.ids().iter().enumerate() {
                table[k].row_mut(id).copy_from(&fresh.row(row));
            }
            let snapshot = Snapshot {
                head: model.head,
                server_params: model.server_params.clone(),
                embeddings: table.iter().map(|t| t.select_rows(batch.ids())).collect(),
                labels: data.batch_labels(&batch),
                batch,
            };
            let mut features = vec![DMatrix::zeros(0, 0); k_parties];
            features[k] = x;
            let step = |q: usize, count: u64| -> Result<Vec<f64>> {
                let grad = |theta: &[f64]| participant_grad(&snapshot, &model, &features, q, theta);
                run_local_round(&parts.optimizers[q], model.block(q), 1, rate(q, count), grad, false).map(|r| r.theta)
            };
            let server = step(0, update_counts[0])?;
            let party = step(p, update_counts[p])?;
            model.server_params = server;
            *model.block_mut(p) = party;
            Ok(())
        })();
        if let Err(e) = outcome {
            return match e {
                Error::Numerical(message) => {
                    status = RunStatus::Diverged {
                        round: updates,
                        message,
                    };
                    push_record(&mut timeline, diverged_record(now, updates + 1, comm));
                    Ok(finish(cfg, initial, timeline, model, status, update_counts, event_log))
                }
                e => Err(e),
            };
        }

        updates += 1;
        update_counts[0] += 1;
        update_counts[p] += 1;
        comm += 2 * (cfg.batch_size * widths[k]) as u64;
        event_log.push((now, k));

        let next_start = now + half;
        let next_cycle = cycle + 1;
        states[k] = PartyState {
            cycle: next_cycle,
            start: next_start,
            arrival: next_start + parts.speeds.per_iter_time(p, next_cycle as usize)? + half,
        };
        debug_assert!(states[k].start >= now);

        if updates.is_multiple_of(cfg.clock.eval_period) || updates == cfg.rounds {
            let rec = evaluate(&model, data).and_then(|eval| {
                Ok(Record {
                    time: now,
                    round: updates,
                    train_loss: eval.loss,
                    eval_metric: eval.metric,
                    grad_norm_sq: grad_norm(cfg, &model, data)?,
                    comm_scalars_cumulative: comm,
                })
            });
            match rec {
                Ok(rec) => push_record(&mut timeline, rec),
                Err(Error::Numerical(message)) => {
                    status = RunStatus::Diverged {
                        round: updates - 1,
                        message,
                    };
                    push_record(&mut timeline, diverged_record(now, updates, comm));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    Ok(finish(cfg, initial, timeline, model, status, update_counts, event_log))
}

fn grad_norm(cfg: &RunConfig, model: &GlobalModel, data: &VerticalDataset) -> Result<Option<f64>> {
    if !cfg.record_grad_norms {
        return Ok(None);
    }
    Ok(Some(
        crate::model::full_gradient(model, data)?.iter().map(|v| v * v).sum(),
    ))
}

fn finish(
    cfg: &RunConfig,
    initial: super::Evaluation,
    timeline: Vec<Record>,
    model: GlobalModel,
    status: RunStatus,
    update_counts: Vec<u64>,
    event_log: Vec<(f64, usize)>,
) -> RunResult {
    RunResult {
        protocol: ProtocolKind::Vafl,
        seed: cfg.seed,
        classification: model.head.is_classification(),
        initial,
        timeline,
        rounds: Vec::new(),
        model,
        status,
        update_counts,
        constraint_violations: 0,
        event_log,
    }
}
