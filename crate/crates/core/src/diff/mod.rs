//! Reverse-mode automatic differentiation over dense arrays, the Adam
//! optimizer, finite-difference gradient checking and the S4CP checkpoint
//! format.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, CheckReport, GradCheckConfig, ParamCheck};
pub use ops::{bilinear_lookup, BinaryOp, UnaryOp};
pub use optim::{AdamConfig, OptimizerState};
pub use scalar::Scalar;
pub use tape::{Kernel, KernelCheck, ParamStore, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    AlreadyBackpropagated,
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
