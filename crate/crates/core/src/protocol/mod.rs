//! Training protocols over the simulated clock.

mod config;
mod eval;
mod runner;
mod vafl;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::{
    DataConfig, ExecutionConfig, LrConfig, LrSchedule, ModelConfig, PerParticipant, RunConfig, SmoothnessConfig,
    SpeedConfig, SpeedKind, TargetConfig, TargetMetric, TraceConfig,
};
pub use eval::{evaluate, first_crossing, time_to_target, Direction, Evaluation};
pub use runner::{run_from, run_protocol, run_with_dataset, LearningRateState, Record, RoundLog, RunResult, RunStatus};
pub use vafl::run_vafl;

/// Which synchronization scheme drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// Every participant runs as many local iterations as fit in the timeout.
    Flex,
    /// Flex with per-round learning rates `η_k / (τ_k^{r-1} · max_t w)`.
    Adaptive,
    /// All participants run the slowest participant's iteration count.
    SyncMin,
    /// All participants run the fastest participant's iteration count.
    SyncMax,
    /// One iteration per participant per round.
    Pbcd,
    /// Asynchronous per-party exchanges with the server.
    Vafl,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::Flex,
        ProtocolKind::Adaptive,
        ProtocolKind::SyncMin,
        ProtocolKind::SyncMax,
        ProtocolKind::Pbcd,
        ProtocolKind::Vafl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolKind::Flex => "flex",
            ProtocolKind::Adaptive => "adaptive",
            ProtocolKind::SyncMin => "sync-min",
            ProtocolKind::SyncMax => "sync-max",
            ProtocolKind::Pbcd => "pbcd",
            ProtocolKind::Vafl => "vafl",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown protocol {s:?}")))
    }
}
