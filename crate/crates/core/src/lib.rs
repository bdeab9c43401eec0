//! Temporal aggregation for video matting: a small reverse-mode tensor engine,
//! the windowed temporal attention block, its losses, evaluation metrics,
//! trimap tooling, a synthetic clip generator and a trainable matting network.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tam;
pub mod tensor;
pub mod train;
pub mod trimap;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Mask, Tensor};
