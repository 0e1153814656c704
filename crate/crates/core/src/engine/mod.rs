//! Tensor core: forward kernels, reverse-mode differentiation and parameter
//! storage.

pub mod ops;
pub mod param;
pub mod tape;
mod tensor;

pub use ops::Padding;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, RunningStats, Tape, Var};
pub use tensor::Tensor;

/// Whether batch norm uses batch statistics (and updates its running
/// averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
