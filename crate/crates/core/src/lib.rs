//! Simulated small-network operator: a fault-injecting network simulator, an
//! observation codec, a sub-stepped repair environment, and a quantile
//! network trained with critical-loss weighting to emit repair instructions.

pub mod codec;
pub mod env;
pub mod netsim;
pub mod neural;
pub mod trainer;

pub use codec::{ActionId, Observation, Phase};
pub use env::{EpisodeState, ReplaySample, StepResult};
pub use netsim::{NetworkDesign, NetworkState, SimConfig};
pub use neural::{Checkpoint, QuantileModel};
pub use trainer::{TrainConfig, Trainer};
