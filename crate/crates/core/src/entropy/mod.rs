//! Arithmetic coding and the probability models that drive it.

pub mod arith;
pub mod blob;
pub mod context_model;
pub mod order0;

pub use arith::{ac_decode, ac_encode, information_content, quantize_prob, EPSILON};
pub use blob::{compress_code, decompress_code, CodeBlob};
pub use context_model::{ContextModel, ContextModelConfig};
pub use order0::AdaptiveModel;
