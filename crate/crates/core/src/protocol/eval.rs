use serde::{Deserialize, Serialize};

use super::runner::Record;
use super::TargetMetric;
use crate::data::VerticalDataset;
use crate::error::Result;
use crate::model::GlobalModel;

/// Full-batch loss plus the task metric (MAE for regression heads, top-1
/// accuracy for classification heads).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

pub fn evaluate(model: &GlobalModel, data: &VerticalDataset) -> Result<Evaluation> {
    let loss = model.loss(data)?;
    let out = model.outputs(data)?;
    let n = data.n_samples() as f64;
    let labels = data.labels();
    let metric = if model.head.is_classification() {
        let hits = (0..out.nrows())
            .filter(|&i| out.row(i).transpose().argmax().0 as f64 == labels[i])
            .count();
        hits as f64 / n
    } else {
        (0..out.nrows()).map(|i| (out[(i, 0)] - labels[i]).abs()).sum::<f64>() / n
    };
    Ok(Evaluation { loss, metric })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// Loss is always minimized; the task metric is maximized only for accuracy.
    pub fn for_metric(metric: TargetMetric, classification: bool) -> Self {
        match (metric, classification) {
            (TargetMetric::Metric, true) => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    pub fn met(&self, value: f64, target: f64) -> bool {
        match self {
            Direction::Minimize => value <= target,
            Direction::Maximize => value >= target,
        }
    }
}

/// Time of the first `(time, value)` point meeting the target; no interpolation.
pub fn first_crossing(points: impl IntoIterator<Item = (f64, f64)>, target: f64, direction: Direction) -> Option<f64> {
    points
        .into_iter()
        .find(|&(_, v)| direction.met(v, target))
        .map(|(t, _)| t)
}

/// First simulated time at which the chosen timeline metric meets `target`.
pub fn time_to_target(timeline: &[Record], metric: TargetMetric, target: f64, direction: Direction) -> Option<f64> {
    first_crossing(
        timeline.iter().map(|r| {
            let v = match metric {
                TargetMetric::Loss => r.train_loss,
                TargetMetric::Metric => r.eval_metric,
            };
            (r.time, v)
        }),
        target,
        direction,
    )
}
