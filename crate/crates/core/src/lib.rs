pub mod ablation;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod optim;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
