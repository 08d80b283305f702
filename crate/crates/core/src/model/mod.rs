//! Spiking U-Net assembly, sequence evaluation and checkpoints.

mod checkpoint;
mod config;
mod network;

use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, SkipMode, Upsampling};
pub use network::{
    DecoderLevel, EncoderLevel, EvSegSnn, ForwardCache, Head, LayerActivity, LayerKind, Node, SpikingLayer,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    FrameShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    ConfigBlob(#[from] serde_json::Error),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
