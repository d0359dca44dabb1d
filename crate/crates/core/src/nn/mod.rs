//! Tensors, reverse-mode differentiation, layers, loss, and Adam.

use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use conv::ConvGeom;
pub use layers::{Activation, LayerKind, LayerParams};
pub use optim::AdamState;
pub use scalar::Scalar;
pub use tape::{GradBuffer, Gradients, SpikeMode, Tape, Var};
pub use tensor::{load_checkpoint, save_checkpoint, ParamId, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("non-binary spike tensor")]
    NonBinarySpikes,
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Global deterministic mode: fixed accumulation order everywhere and no
/// wall-clock data in written artifacts.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}
