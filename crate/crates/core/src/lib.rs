pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dist;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod objective;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod special;
pub mod tape;
pub mod trainer;
pub mod fista;
pub mod metrics;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the binary and the tests.
pub type Tensor64 = tape::Tensor<f64>;
pub type Model64 = trainer::Model<f64>;
pub type Dataset64 = data::PatchDataset<f64>;
pub type Dictionary64 = generator::Dictionary<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
