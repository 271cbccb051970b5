//! Metric files: JSON-lines timelines and CSV summaries.
//!
//! Every file carries a `schema` field so downstream tooling can detect format
//! changes. Missing values (target never reached, divergence) are written as
//! JSON `null` or an empty CSV cell.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ProtocolKind, Record, RoundLog, RunResult, TargetConfig};

pub const TIMELINE_SCHEMA: &str = "flexvfl.timeline.v1";
pub const ROUNDS_SCHEMA: &str = "flexvfl.rounds.v1";
pub const RUN_SUMMARY_SCHEMA: &str = "flexvfl.run-summary.v1";
pub const GRID_SUMMARY_SCHEMA: &str = "flexvfl.grid-summary.v1";
pub const ADAPT_SUMMARY_SCHEMA: &str = "flexvfl.adapt-summary.v1";

#[derive(Serialize)]
struct TimelineLine<'a> {
    schema: &'static str,
    protocol: ProtocolKind,
    seed: u64,
    #[serde(flatten)]
    record: &'a Record,
}

#[derive(Serialize)]
struct RoundLine<'a> {
    schema: &'static str,
    protocol: ProtocolKind,
    seed: u64,
    #[serde(flatten)]
    round: &'a RoundLog,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, lines: impl Iterator<Item = T>) -> Result<()> {
    let mut out = create(path)?;
    for line in lines {
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON document; parent directories are created.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::io(path, e.into()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per timeline record.
pub fn write_timeline_jsonl(path: &Path, result: &RunResult) -> Result<()> {
    write_lines(
        path,
        result.timeline.iter().map(|record| TimelineLine {
            schema: TIMELINE_SCHEMA,
            protocol: result.protocol,
            seed: result.seed,
            record,
        }),
    )
}

/// One JSON object per synchronous round: taus, learning rates, weights.
pub fn write_rounds_jsonl(path: &Path, result: &RunResult) -> Result<()> {
    write_lines(
        path,
        result.rounds.iter().map(|round| RoundLine {
            schema: ROUNDS_SCHEMA,
            protocol: result.protocol,
            seed: result.seed,
            round,
        }),
    )
}

#[derive(Deserialize)]
struct RecordLine {
    time: f64,
    round: usize,
    // JSON has no NaN; diverged records come back as null.
    train_loss: Option<f64>,
    eval_metric: Option<f64>,
    grad_norm_sq: Option<f64>,
    comm_scalars_cumulative: u64,
}

/// Reads back a timeline written by [`write_timeline_jsonl`].
pub fn read_timeline_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let r: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            Ok(Record {
                time: r.time,
                round: r.round,
                train_loss: r.train_loss.unwrap_or(f64::NAN),
                eval_metric: r.eval_metric.unwrap_or(f64::NAN),
                grad_norm_sq: r.grad_norm_sq,
                comm_scalars_cumulative: r.comm_scalars_cumulative,
            })
        })
        .collect()
}

/// Per-run summary row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub time_to_target: Option<f64>,
    pub final_metric: Option<f64>,
    pub total_comm: u64,
}

impl RunSummary {
    pub fn of(result: &RunResult, target: Option<&TargetConfig>) -> Self {
        Self {
            protocol: result.protocol,
            seed: result.seed,
            time_to_target: target.and_then(|t| result.time_to_target(t)),
            final_metric: result.final_metric().filter(|m| m.is_finite()),
            total_comm: result.total_comm(),
        }
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_run_summary_csv(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "schema",
        "protocol",
        "seed",
        "time_to_target",
        "final_metric",
        "total_comm",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            RUN_SUMMARY_SCHEMA.to_string(),
            r.protocol.to_string(),
            r.seed.to_string(),
            opt(r.time_to_target),
            opt(r.final_metric),
            r.total_comm.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aggregate of one (protocol, t_comm) cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub protocol: ProtocolKind,
    pub t_comm: f64,
    /// `None` unless every seed reached the target.
    pub mean_time_to_target: Option<f64>,
    /// Sample standard deviation; `None` alongside the mean.
    pub std_time_to_target: Option<f64>,
    pub reached_fraction: f64,
    pub runs: usize,
    pub failures: usize,
}

impl SummaryRow {
    /// `times` holds one entry per successful run; `None` means not reached.
    pub fn aggregate(protocol: ProtocolKind, t_comm: f64, times: &[Option<f64>], failures: usize) -> Self {
        let total = times.len() + failures;
        let reached: Vec<f64> = times.iter().flatten().copied().collect();
        let reached_fraction = if total == 0 {
            0.0
        } else {
            reached.len() as f64 / total as f64
        };
        let (mean, std) = if total > 0 && reached.len() == total {
            let n = reached.len() as f64;
            let mean = reached.iter().sum::<f64>() / n;
            let std = if reached.len() > 1 {
                (reached.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(std))
        } else {
            (None, None)
        };
        Self {
            protocol,
            t_comm,
            mean_time_to_target: mean,
            std_time_to_target: std,
            reached_fraction,
            runs: total,
            failures,
        }
    }

    /// `mean ± std`, or `--` when some seed never reached the target.
    pub fn display_cell(&self) -> String {
        match (self.mean_time_to_target, self.std_time_to_target) {
            (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
            _ => "--".to_string(),
        }
    }
}

pub fn write_grid_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "schema",
        "protocol",
        "t_comm",
        "mean_time_to_target",
        "std_time_to_target",
        "reached_fraction",
        "runs",
        "failures",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            GRID_SUMMARY_SCHEMA.to_string(),
            r.protocol.to_string(),
            r.t_comm.to_string(),
            opt(r.mean_time_to_target),
            opt(r.std_time_to_target),
            r.reached_fraction.to_string(),
            r.runs.to_string(),
            r.failures.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Protocols as rows, `t_comm` values as columns.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut t_comms: Vec<f64> = Vec::new();
    let mut protocols: Vec<ProtocolKind> = Vec::new();
    for r in rows {
        if !t_comms.contains(&r.t_comm) {
            t_comms.push(r.t_comm);
        }
        if !protocols.contains(&r.protocol) {
            protocols.push(r.protocol);
        }
    }
    let mut out = format!("{:<10}", "protocol");
    for t in &t_comms {
        out.push_str(&format!(" {:>18}", format!("t_comm={t}")));
    }
    out.push('\n');
    for p in &protocols {
        out.push_str(&format!("{:<10}", p.as_str()));
        for t in &t_comms {
            let cell = rows
                .iter()
                .find(|r| r.protocol == *p && r.t_comm == *t)
                .map_or_else(|| "n/a".to_string(), SummaryRow::display_cell);
            out.push_str(&format!(" {cell:>18}"));
        }
        out.push('\n');
    }
    out
}
