//! Few-shot fine-grained classification with adaptive receptive-field
//! convolutions, spectral masking, spatial-frequency fusion and a
//! bidirectional attention-reconstruction metric.

pub mod arf;
pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod similarity;
pub mod ops;
pub mod spectral;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
