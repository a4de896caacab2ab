//! Minimal CPU neural-network toolkit: a 4-D tensor, convolution, dense,
//! pooling and normalization layers with hand-written backward passes,
//! an Adam optimizer and a binary checkpoint format.
//!
//! Everything runs single-threaded in a fixed order, so a seeded training
//! run is bit-reproducible.

pub mod layers;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use layers::{Layer, Padding, Sequential, Tape};
pub use network::{Init, NetBuilder, Network};
pub use optim::Adam;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
