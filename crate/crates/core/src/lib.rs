//! Transformer-decoder facial landmark detection with query-aware memory and
//! dynamic query initialization, on a small reverse-mode autodiff engine.

pub mod ablate;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod decoder;
pub mod dqinit;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod qamem;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{QaMemVariant, RunConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tape::{Tape, Var};
pub use tensor::{Precision, Scalar, Tensor};
