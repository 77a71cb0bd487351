//! Dense matrix arithmetic, tape-based reverse-mode differentiation, an
//! adaptive-moment optimizer and a deterministic random generator.

mod adam;
mod matrix;
mod rng;
mod tape;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use matrix::Matrix;
pub use rng::Rng;
pub use tape::{finite_diff_grad, Gradients, NodeId, OpKind, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("class label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss node, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("degenerate scoring vector (zero norm)")]
    DegenerateVector,
    #[error("linear system is singular")]
    SingularSystem,
}
