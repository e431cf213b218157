use std::io;

use ivc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    /// A caller broke an operation's contract (bad size, bad parameter).
    #[error("{0}")]
    Invalid(String),
    #[error("bad magic bytes: not an ivc stream")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("CRC mismatch in {0}")]
    Crc(&'static str),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("arithmetic decoder ran past the end of its payload")]
    Underflow,
    #[error("checkpoint digest {found:08x} does not match the stream's {expected:08x}")]
    CheckpointMismatch { expected: u32, found: u32 },
    #[error("unsupported input: {0}")]
    Unsupported(String),
}

impl CodecError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    /// True for failures of the environment (files, devices) rather than of
    /// the data or the caller.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io(_))
    }
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;
