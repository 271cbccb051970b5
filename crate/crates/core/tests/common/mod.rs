#![allow(dead_code)]

use flexvfl_core::data::VerticalDataset;
use flexvfl_core::protocol::RunConfig;
use flexvfl_core::rng::SplitMix64;
use flexvfl_core::{Arch, GlobalModel, Head, ModelSpec};
use nalgebra::DMatrix;

/// Random dataset with the given party widths; labels fit `head`.
pub fn random_dataset(rng: &mut SplitMix64, n: usize, widths: &[usize], head: Head) -> VerticalDataset {
    let parts = widths
        .iter()
        .map(|&w| DMatrix::from_fn(n, w, |_, _| rng.symmetric(1.5)))
        .collect();
    let labels = (0..n)
        .map(|_| match head {
            Head::Softmax { classes } => rng.below(classes as u64) as f64,
            _ => rng.symmetric(2.0),
        })
        .collect();
    VerticalDataset::new(parts, labels).unwrap()
}

/// A random architecture / head / partition drawn from `rng`.
pub fn random_problem(rng: &mut SplitMix64, seed: u64) -> (GlobalModel, VerticalDataset) {
    let arch = if rng.below(2) == 0 {
        Arch::Linear
    } else {
        Arch::Mlp {
            hidden: 1 + rng.below(4) as usize,
        }
    };
    let head = match rng.below(3) {
        0 => Head::Sum,
        1 => Head::Linear,
        _ => Head::Softmax {
            classes: 2 + rng.below(3) as usize,
        },
    };
    let parties = 1 + rng.below(4) as usize;
    let widths: Vec<usize> = (0..parties).map(|_| 1 + rng.below(4) as usize).collect();
    let n = 3 + rng.below(8) as usize;
    let spec = ModelSpec {
        arch,
        embed_width: 1 + rng.below(3) as usize,
        head,
    };
    let data = random_dataset(rng, n, &widths, head);
    let model = GlobalModel::init(&spec, &widths, seed).unwrap();
    (model, data)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Regression run over the synthetic vertical testbed.
pub fn regression_config(protocol: &str, extra: &str) -> RunConfig {
    RunConfig::from_toml_str(&format!(
        r#"
protocol = "{protocol}"
rounds = 20
batch_size = 16
seed = 3
{extra}

[data]
source = "synthetic"
n_samples = 64
n_features = 8
parties = 3
noise_std = 0.1

[lr]
base = 0.05

[clock]
timeout = 10
t_comm = 1

[speed]
kind = "fixed"
values = [1.0, 1.0, 2.0, 4.0]
"#
    ))
    .unwrap()
}
