//! Fixtures shared by the benchmarks under `benches/`.

use flexvfl_core::protocol::RunConfig;

/// Synthetic regression run with `parties` parties of four features each and
/// per-iteration times spread between 1 and 4.
pub fn regression_config(protocol: &str, n: usize, parties: usize, rounds: usize) -> RunConfig {
    let speeds: Vec<String> = std::iter::once(1.0)
        .chain((0..parties).map(|k| 1.0 + 3.0 * k as f64 / parties.max(2).saturating_sub(1) as f64))
        .map(|s| s.to_string())
        .collect();
    RunConfig::from_toml_str(&format!(
        r#"
protocol = "{protocol}"
rounds = {rounds}
batch_size = 64
seed = 1

[data]
source = "synthetic"
n_samples = {n}
n_features = {features}
parties = {parties}
noise_std = 0.1

[lr]
base = 0.02

[clock]
timeout = 10
t_comm = 1

[speed]
kind = "fixed"
values = [{speeds}]
"#,
        features = 4 * parties,
        speeds = speeds.join(", "),
    ))
    .expect("fixture config parses")
}
