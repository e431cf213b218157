//! Dense tensors, a reverse-mode tape, and the handful of operations the
//! ivc codec networks need: 2D/3D and transposed convolutions, bilinear
//! sampling, convolutional LSTM cells, batch normalization, and Adam.
//!
//! Values are single precision for training and inference; `f64` tensors run
//! through the same code for gradient checks.

mod adam;
pub mod conv;
mod element;
mod error;
pub mod gemm;
pub mod gradcheck;
mod lstm;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use element::Element;
pub use error::TensorError;
pub use lstm::{conv_lstm_cell, ConvLstmWeights};
pub use params::{read_arrays, write_arrays, Bound, ParamId, ParamStore};
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;
