//! Dense tensor math with reverse-mode differentiation.
//!
//! Everything downstream (projections, losses, gating, the training loop)
//! is expressed through this module: a flat row-major [`Tensor`], a
//! [`ParamStore`] holding trainable values with their gradient slots, and a
//! single-step [`Tape`] that records forward ops and replays them in reverse.
//!
//! Scalar type is [`Real`] (f64 by default, f32 behind the `f32` feature).
//! Tests and tolerance-pinned checks assume the default.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{ElementwiseKind, NodeId, Tape};
pub use tensor::{randn, Tensor};

#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;
