//! Numerical kernels shared by the whole pipeline.
//!
//! Everything is `f64`. Fixed-size 3D types ([`Vec3`], [`Mat3`]) cover the
//! geometric hot paths; [`DenseMatrix`] is a small row-major matrix used for
//! feature maps and network weights; [`GradTape`] provides reverse-mode
//! differentiation over dense-matrix expressions.

mod kabsch;
mod linalg;
mod svd3;
mod tape;

pub use kabsch::weighted_kabsch;
pub use linalg::{rotation_angle_deg, DenseMatrix, Mat3, Vec3};
pub use svd3::{svd3, Svd3};
pub use tape::{finite_difference_max_rel_err, GradTape, Gradients, Slot};
pub(crate) use tape::vn_gate_forward;

use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error)]
pub enum MathError {
    /// Operand dimensions do not match the operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A point configuration has no well-defined alignment (rank < 2).
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    /// An input value is NaN, infinite, or out of the documented range.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
