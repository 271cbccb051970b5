//! Simulated time: party speeds, timeouts, latency and message accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::ProtocolKind;

/// Per-iteration cost of every participant (index 0 is the server).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpeedModel {
    /// Constant time units per local iteration.
    Fixed(Vec<f64>),
    /// CPU utilization `c[r][k] ∈ [0, 1)`; rows are cycled when rounds exceed the trace.
    Trace(Vec<Vec<f64>>),
}

impl SpeedModel {
    pub fn participants(&self) -> usize {
        match self {
            SpeedModel::Fixed(v) => v.len(),
            SpeedModel::Trace(rows) => rows.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpeedModel::Fixed(v) => {
                if v.is_empty() || v.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
                    return Err(Error::config("fixed per-iteration times must be positive"));
                }
            }
            SpeedModel::Trace(rows) => {
                let width = self.participants();
                if rows.is_empty() || width == 0 {
                    return Err(Error::config("utilization trace is empty"));
                }
                for (r, row) in rows.iter().enumerate() {
                    if row.len() != width {
                        return Err(Error::config(format!(
                            "trace round {r} has {} parties, expected {width}",
                            row.len()
                        )));
                    }
                    if let Some(c) = row.iter().find(|c| !(0.0..1.0).contains(*c)) {
                        return Err(Error::config(format!(
                            "cpu utilization {c} at round {r} outside [0, 1)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Time units participant `k` needs for one local iteration in round `r`.
    pub fn per_iter_time(&self, k: usize, r: usize) -> Result<f64> {
        match self {
            SpeedModel::Fixed(v) => v
                .get(k)
                .copied()
                .filter(|t| *t > 0.0)
                .ok_or_else(|| Error::config(format!("no positive speed for participant {k}"))),
            SpeedModel::Trace(rows) => {
                if rows.is_empty() {
                    return Err(Error::config("utilization trace is empty"));
                }
                let c = *rows[r % rows.len()]
                    .get(k)
                    .ok_or_else(|| Error::config(format!("trace has no column for participant {k}")))?;
                if !(0.0..1.0).contains(&c) {
                    return Err(Error::config(format!("cpu utilization {c} outside [0, 1)")));
                }
                Ok(1.0 / (1.0 - c))
            }
        }
    }

    /// Largest per-iteration time participant `k` will ever see.
    pub fn slowest_time(&self, k: usize) -> Result<f64> {
        let rounds = match self {
            SpeedModel::Fixed(_) => 1,
            SpeedModel::Trace(rows) => rows.len(),
        };
        (0..rounds).try_fold(0.0f64, |acc, r| Ok(acc.max(self.per_iter_time(k, r)?)))
    }

    /// Smallest per-iteration time participant `k` will ever see.
    pub fn fastest_time(&self, k: usize) -> Result<f64> {
        let rounds = match self {
            SpeedModel::Fixed(_) => 1,
            SpeedModel::Trace(rows) => rows.len(),
        };
        (0..rounds).try_fold(f64::INFINITY, |acc, r| Ok(acc.min(self.per_iter_time(k, r)?)))
    }
}

/// Timeout, latency and evaluation cadence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockConfig {
    pub timeout: f64,
    /// Round-trip latency to the server.
    pub t_comm: f64,
    #[serde(default = "one")]
    pub eval_period: usize,
}

fn one() -> usize {
    1
}

impl ClockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout > 0.0) || !self.timeout.is_finite() {
            return Err(Error::config("timeout must be positive"));
        }
        if !(self.t_comm >= 0.0) || !self.t_comm.is_finite() {
            return Err(Error::config("t_comm must be non-negative"));
        }
        if self.eval_period == 0 {
            return Err(Error::config("eval_period must be at least 1"));
        }
        Ok(())
    }
}

/// Iterations per participant, simulated duration and traffic of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub taus: Vec<usize>,
    pub duration: f64,
    pub comm_scalars: u64,
}

/// Iterations that fit in `timeout`; never fewer than one.
pub fn local_iters(timeout: f64, per_iter: f64) -> usize {
    debug_assert!(per_iter > 0.0);
    // Slack absorbs representation error in ratios such as 10 / 2.5.
    let fit = (timeout / per_iter * (1.0 + 1e-12)).floor();
    if fit >= 1.0 {
        fit as usize
    } else {
        1
    }
}

/// Iterations each participant runs under `kind`, given the counts that fit
/// in the timeout. VAFL takes one step per exchange.
pub fn protocol_taus(kind: ProtocolKind, natural: &[usize]) -> Vec<usize> {
    let n = natural.len();
    match kind {
        ProtocolKind::Flex | ProtocolKind::Adaptive => natural.to_vec(),
        ProtocolKind::SyncMin => vec![natural.iter().copied().min().unwrap_or(1); n],
        ProtocolKind::SyncMax => vec![natural.iter().copied().max().unwrap_or(1); n],
        ProtocolKind::Pbcd | ProtocolKind::Vafl => vec![1; n],
    }
}

/// Simulated duration of one synchronous round.
pub fn round_duration(kind: ProtocolKind, taus: &[usize], per_iter_times: &[f64], clock: &ClockConfig) -> Result<f64> {
    if taus.len() != per_iter_times.len() || taus.is_empty() {
        return Err(Error::Dimension {
            context: "round timing participants",
            expected: per_iter_times.len(),
            actual: taus.len(),
        });
    }
    let slowest = per_iter_times.iter().copied().fold(0.0, f64::max);
    let duration = match kind {
        ProtocolKind::Flex | ProtocolKind::Adaptive => clock.t_comm + clock.timeout,
        ProtocolKind::SyncMin => clock.t_comm + *taus.iter().min().unwrap() as f64 * slowest,
        ProtocolKind::SyncMax => clock.t_comm + *taus.iter().max().unwrap() as f64 * slowest,
        ProtocolKind::Pbcd => clock.t_comm + slowest,
        ProtocolKind::Vafl => {
            return Err(Error::Unsupported(
                "VAFL is event driven and has no synchronous round".into(),
            ))
        }
    };
    Ok(duration)
}

/// Scalars exchanged per round: `K·(|θ₀| + B·Σ_k O_k)`.
pub fn comm_cost(parties: usize, server_param_count: usize, batch: usize, embed_widths: &[usize]) -> u64 {
    let per_party = server_param_count as u64 + batch as u64 * embed_widths.iter().map(|&o| o as u64).sum::<u64>();
    parties as u64 * per_party
}

/// Monotone simulated clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn advance(&mut self, dt: f64) -> f64 {
        assert!(dt >= 0.0 && dt.is_finite(), "clock cannot move by {dt}");
        self.now += dt;
        self.now
    }

    pub fn advance_to(&mut self, t: f64) -> f64 {
        assert!(t >= self.now, "clock cannot move backward from {} to {t}", self.now);
        self.now = t;
        t
    }
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    round: usize,
    party: usize,
    cpu_util: f64,
}

/// Loads a `round,party,cpu_util` trace for `participants` participants (server = party 0).
pub fn load_trace(path: &Path, participants: usize) -> Result<SpeedModel> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| trace_error(path, e))?;
    let headers = reader.headers().map_err(|e| trace_error(path, e))?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["round", "party", "cpu_util"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "trace header must be round,party,cpu_util".into(),
        });
    }
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in reader.deserialize::<TraceRow>() {
        let rec = rec.map_err(|e| trace_error(path, e))?;
        if rec.party >= participants {
            return Err(Error::config(format!(
                "trace party {} out of range for {participants} participants",
                rec.party
            )));
        }
        if rows.len() <= rec.round {
            rows.resize(rec.round + 1, vec![None; participants]);
        }
        rows[rec.round][rec.party] = Some(rec.cpu_util);
    }
    let table = rows
        .into_iter()
        .enumerate()
        .map(|(r, row)| {
            row.into_iter()
                .enumerate()
                .map(|(k, c)| c.ok_or_else(|| Error::config(format!("trace missing round {r} party {k}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let model = SpeedModel::Trace(table);
    model.validate()?;
    Ok(model)
}

/// Writes a trace in the format read by [`load_trace`].
pub fn write_trace(path: &Path, table: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| trace_error(path, e))?;
    w.write_record(["round", "party", "cpu_util"])
        .map_err(|e| trace_error(path, e))?;
    for (r, row) in table.iter().enumerate() {
        for (k, c) in row.iter().enumerate() {
            w.write_record([r.to_string(), k.to_string(), c.to_string()])
                .map_err(|e| trace_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn trace_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}
