//! Minimal reverse-mode automatic differentiation over dense, row-major
//! tensors.
//!
//! A [`Tape`] records each operation's forward value; [`Tape::backward`]
//! replays them in reverse. Trainable leaves live in a [`ParamStore`] that
//! the tape borrows read-only, so several tapes can run forward passes over
//! the same parameters concurrently.

mod params;
mod real;
mod tape;

pub use params::{ParamStore, ParamTensor};
pub use real::{DType, Real};
pub use tape::{Grads, Tape, Var};
