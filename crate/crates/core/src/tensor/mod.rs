//! Reverse-mode automatic differentiation over 64-bit dense tensors.
//!
//! Values live in [`Tensor`]; a [`Tape`] records operations on [`Var`]
//! handles and replays them backwards once. Broadcasting follows the
//! right-aligned rule: shapes are aligned on trailing axes, missing leading
//! axes count as extent 1, and only extent-1 axes expand.

mod conv;
mod tape;
mod value;

pub use tape::{sigmoid, Gradients, Tape, Var};
pub use value::{broadcast_shapes, Tensor};

#[cfg(test)]
mod tests;
