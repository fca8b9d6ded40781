//! Parameters, layers, the transformer block, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod layers;
mod params;
mod transformer;

pub use adam::{warmup_lr, Adam};
pub use checkpoint::{Checkpoint, CheckpointError, Manifest};
pub use layers::{linear_forward, AdaLnResBlock, Linear};
pub use params::{Init, ParamStore, Parameter};
pub use transformer::{BlockNodes, TransformerBlock};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
