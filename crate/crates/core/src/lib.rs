//! Learned video codec: progressive binarized autoencoder key frames,
//! hierarchical motion-compensated residual interpolation, context-model
//! arithmetic coding and a beam-search rate planner.

pub mod binarizer;
pub mod code;
pub mod container;
pub mod context;
pub mod entropy;
pub mod experiment;
pub mod frames;
pub mod hierarchy;
pub mod image_codec;
pub mod interp;
pub mod metrics;
pub mod models;
pub mod motion;
pub mod nn;
pub mod progressive;
pub mod synth;
pub mod train;
pub mod video;

mod error;

pub use code::{BinaryCode, GridShape};
pub use error::{CodecError, Result};
