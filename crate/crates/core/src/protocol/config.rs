use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ProtocolKind;
use crate::data::{load_csv, partition, synth_classification, synth_regression, PartitionSpec, VerticalDataset};
use crate::error::{Error, Result};
use crate::model::{Arch, Head, ModelSpec};
use crate::optim::LocalOptimizer;
use crate::sim::{load_trace, ClockConfig, SpeedModel};

/// A value shared by all participants or one value per participant (server first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerParticipant<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerParticipant<T> {
    pub fn resolve(&self, participants: usize, key: &str) -> Result<Vec<T>> {
        match self {
            PerParticipant::All(v) => Ok(vec![v.clone(); participants]),
            PerParticipant::Each(v) if v.len() == participants => Ok(v.clone()),
            PerParticipant::Each(v) => Err(Error::config(format!(
                "{key}: expected {participants} entries (server + parties), got {}",
                v.len()
            ))),
        }
    }
}

impl<T: Default> Default for PerParticipant<T> {
    fn default() -> Self {
        PerParticipant::All(T::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        n_samples: usize,
        n_features: usize,
        parties: usize,
        #[serde(default)]
        noise_std: f64,
        /// Defaults to the run seed.
        seed: Option<u64>,
    },
    SyntheticClasses {
        n_samples: usize,
        n_features: usize,
        parties: usize,
        classes: usize,
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        label_column: usize,
        #[serde(default)]
        header: bool,
        /// Party widths; defaults to an equal split among `parties`.
        widths: Option<Vec<usize>>,
        parties: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Sum,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: ArchKind,
    #[serde(default = "default_width")]
    pub embed_width: usize,
    pub hidden: Option<usize>,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    pub classes: Option<usize>,
}

fn default_arch() -> ArchKind {
    ArchKind::Linear
}
fn default_width() -> usize {
    1
}
fn default_head() -> HeadKind {
    HeadKind::Sum
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Linear,
            embed_width: 1,
            hidden: None,
            head: HeadKind::Sum,
            classes: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        let arch = match self.arch {
            ArchKind::Linear => Arch::Linear,
            ArchKind::Mlp => Arch::Mlp {
                hidden: self
                    .hidden
                    .ok_or_else(|| Error::config("model.hidden is required for mlp"))?,
            },
        };
        let head = match self.head {
            HeadKind::Sum => Head::Sum,
            HeadKind::Linear => Head::Linear,
            HeadKind::Softmax => Head::Softmax {
                classes: self
                    .classes
                    .ok_or_else(|| Error::config("model.classes is required for softmax"))?,
            },
        };
        if self.embed_width == 0 {
            return Err(Error::config("model.embed_width must be at least 1"));
        }
        Ok(ModelSpec {
            arch,
            embed_width: self.embed_width,
            head,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η_k / (r + 1)`.
    InverseDecay,
    /// The largest rate allowed by the smoothness constraint each round
    /// (needs a `[smoothness]` section).
    Constraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    #[serde(default)]
    pub schedule: LrSchedule,
    pub base: PerParticipant<f64>,
    /// Server step size for VAFL; defaults to the server's base rate.
    pub server: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedKind {
    Fixed,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedConfig {
    pub kind: SpeedKind,
    /// Fixed per-iteration times.
    pub values: Option<PerParticipant<f64>>,
    /// Inline utilization table, `[round][participant]`; alternative to `trace.path`.
    pub utilization: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    Loss,
    Metric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub metric: TargetMetric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessConfig {
    #[serde(rename = "L")]
    pub l: f64,
    /// One entry per participant, server first.
    #[serde(rename = "L_k")]
    pub l_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Order in which participants compute their local rounds.
    pub order: Option<Vec<usize>>,
    /// Compute local rounds on worker threads.
    #[serde(default)]
    pub parallel: bool,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolKind,
    /// Global rounds; for VAFL, the number of server updates.
    pub rounds: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop once simulated time reaches this value.
    pub max_time: Option<f64>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: PerParticipant<LocalOptimizer>,
    pub lr: LrConfig,
    pub clock: ClockConfig,
    pub speed: SpeedConfig,
    pub trace: Option<TraceConfig>,
    pub target: Option<TargetConfig>,
    pub smoothness: Option<SmoothnessConfig>,
    #[serde(default)]
    pub record_grad_norms: bool,
    #[serde(default)]
    pub execution: ExecutionConfig,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative data and trace paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub(crate) fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn load_dataset(&self) -> Result<VerticalDataset> {
        match &self.data {
            DataConfig::Synthetic {
                n_samples,
                n_features,
                parties,
                noise_std,
                seed,
            } => {
                Ok(synth_regression(seed.unwrap_or(self.seed), *n_samples, *n_features, *parties, *noise_std)?.dataset)
            }
            DataConfig::SyntheticClasses {
                n_samples,
                n_features,
                parties,
                classes,
                seed,
            } => synth_classification(seed.unwrap_or(self.seed), *n_samples, *n_features, *parties, *classes),
            DataConfig::Csv {
                path,
                label_column,
                header,
                widths,
                parties,
            } => {
                let (x, y) = load_csv(&self.resolve_path(path), *label_column, *header)?;
                let spec = match (widths, parties) {
                    (Some(w), _) => PartitionSpec::contiguous(w.clone()),
                    (None, Some(k)) => PartitionSpec::equal(x.ncols(), *k)?,
                    (None, None) => return Err(Error::config("data.widths or data.parties is required for csv")),
                };
                partition(&x, y, &spec)
            }
        }
    }

    pub fn speed_model(&self, participants: usize) -> Result<SpeedModel> {
        let model = match self.speed.kind {
            SpeedKind::Fixed => SpeedModel::Fixed(
                self.speed
                    .values
                    .as_ref()
                    .ok_or_else(|| Error::config("speed.values is required for fixed speeds"))?
                    .resolve(participants, "speed.values")?,
            ),
            SpeedKind::Trace => match (&self.speed.utilization, &self.trace) {
                (Some(table), _) => SpeedModel::Trace(table.clone()),
                (None, Some(t)) => load_trace(&self.resolve_path(&t.path), participants)?,
                (None, None) => return Err(Error::config("trace speeds need speed.utilization or trace.path")),
            },
        };
        model.validate()?;
        if model.participants() != participants {
            return Err(Error::config(format!(
                "speed model covers {} participants, run has {participants}",
                model.participants()
            )));
        }
        Ok(model)
    }

    pub fn optimizers(&self, participants: usize) -> Result<Vec<LocalOptimizer>> {
        let opts = self.optimizer.resolve(participants, "optimizer")?;
        opts.iter().try_for_each(LocalOptimizer::validate)?;
        Ok(opts)
    }

    pub fn base_rates(&self, participants: usize) -> Result<Vec<f64>> {
        let rates = self.lr.base.resolve(participants, "lr.base")?;
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(rates)
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.clock.validate()?;
        self.model.spec()?;
        if self.lr.schedule == LrSchedule::Constraint && self.smoothness.is_none() {
            return Err(Error::config(
                "lr.schedule = \"constraint\" needs a [smoothness] section",
            ));
        }
        if let Some(t) = &self.target {
            if !t.value.is_finite() {
                return Err(Error::config("target.value must be finite"));
            }
        }
        if let Some(s) = &self.smoothness {
            if !(s.l > 0.0) || s.l_k.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::config("smoothness constants must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
protocol = "flex"
rounds = 3
batch_size = 4
seed = 11

[data]
source = "synthetic"
n_samples = 16
n_features = 4
parties = 2

[lr]
base = 0.05

[clock]
timeout = 10
t_comm = 1

[speed]
kind = "fixed"
values = [1.0, 2.0, 4.0]
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.protocol, ProtocolKind::Flex);
        assert_eq!(cfg.clock.eval_period, 1);
        assert_eq!(cfg.optimizers(3).unwrap(), vec![LocalOptimizer::Sgd; 3]);
        assert_eq!(cfg.base_rates(3).unwrap(), vec![0.05; 3]);
        assert_eq!(cfg.speed_model(3).unwrap(), SpeedModel::Fixed(vec![1.0, 2.0, 4.0]));
        assert!(cfg.speed_model(4).is_err());
    }

    #[test]
    fn optimizer_tables_and_lists() {
        let text = MINIMAL.replace("[lr]", "[optimizer]\nkind = \"momentum\"\nrho = 0.9\n\n[lr]");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(
            cfg.optimizers(2).unwrap(),
            vec![LocalOptimizer::Momentum { rho: 0.9 }; 2]
        );

        let text = MINIMAL.replace(
            "[lr]",
            "[[optimizer]]\nkind = \"sgd\"\n[[optimizer]]\nkind = \"proximal\"\nmu = 0.5\n[[optimizer]]\nkind = \"sgd\"\n\n[lr]",
        );
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.optimizers(3).unwrap()[1], LocalOptimizer::Proximal { mu: 0.5 });
    }

    #[test]
    fn malformed_config_names_the_key() {
        let err = RunConfig::from_toml_str(&MINIMAL.replace("rounds = 3", "rounds = \"x\"")).unwrap_err();
        assert!(err.to_string().contains("rounds"), "{err}");
        let err = RunConfig::from_toml_str(&MINIMAL.replace("seed = 11", "seed = 11\nbogus = 1")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let cfg = RunConfig::from_toml_str(&MINIMAL.replace("rounds = 3", "rounds = 0")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }
}
