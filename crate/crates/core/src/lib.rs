//! Simulator and optimizer library for flexible vertical federated learning.
//!
//! A vertically split model (party embedding networks feeding a server head)
//! is trained over a simulated clock where each participant runs as many
//! local iterations as fit in a timeout. Synchronous and asynchronous
//! baselines share the same engine, and [`analysis`] checks the convergence
//! bounds numerically on a quadratic testbed with known constants.

// `!(x > 0.0)` style checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use model::{Arch, Batch, GlobalModel, Head, ModelSpec, PartyModel, PartyShape, Snapshot};
pub use optim::{LocalOptimizer, WeightSchedule};
pub use protocol::{ProtocolKind, RunConfig, RunResult};
