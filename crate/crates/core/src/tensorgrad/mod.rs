//! Minimal reverse-mode differentiation over dense real tensors.
//!
//! Only the operations needed by the reconstruction graph are provided:
//! dense layers, sine/ReLU activations, elementwise arithmetic, unitary 2D
//! FFTs, line masks, L1 sums, forward differences and polynomial basis
//! expansion. Complex values travel as `(re, im)` node pairs.

mod check;
pub mod fft;
mod scalar;
mod tape;
mod tensor;

pub use check::{finite_difference_check, relative_error, FdReport};
pub use scalar::Real;
pub(crate) use tape::affine_forward;
pub use tape::{ComplexNode, Gradients, NodeId, OpKind, Tape, AFFINE_ROW_BLOCK};
pub use tensor::RealTensor;
