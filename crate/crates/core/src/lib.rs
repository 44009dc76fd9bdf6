//! Query-conditioned generative search ranking.

mod binfmt;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod hfg;
pub mod model;
mod nn;
pub mod numerics;
pub mod objective;
pub mod pairtoken;
pub mod trainer;

pub use config::{AblateConfig, BenchConfig, OutputConfig, RunConfig, ScaleConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{Dims, ModelConfig, QgsModel, Variant};
pub use numerics::{Gradients, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
