//! Entropy regularization of the prediction-relevant part of a neural
//! representation.
//!
//! A linear decoder `W_d` splits a representation `Y` into a kernel part the
//! decoder ignores and a complement `Z = V·Vᵀ·Y` that carries the whole
//! prediction. Training penalizes a variational upper bound on
//! `H(Z) + H(C | Z)`, built from a per-coordinate two-mode Gaussian mixture
//! `q(z)` and the decoder's own softmax `r(c | z)`.

// NaN has to fail range checks, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod info;
pub mod kde;
pub mod linalg;
pub mod nn;
pub mod reve;
pub mod runner;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
