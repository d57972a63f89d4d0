pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dft;
pub mod error;
pub mod featstats;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod objectives;
pub mod synthdata;
pub mod tensor;
pub mod trainloop;

pub use checkpoint::{Checkpoint, NetBundle};
pub use config::{OptimizerName, TrainConfig};
pub use error::{Error, Result};
pub use objectives::LossBreakdown;
pub use trainloop::{Autoencoder, RunMode, RunRecord, TrainOutcome};
pub use tensor::{DType, Scalar, Tensor};
