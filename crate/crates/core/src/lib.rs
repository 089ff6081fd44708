//! Linear-quadratic-Gaussian control with a learned Kalman gain.
//!
//! The crate provides a classical separation-principle controller (Kalman
//! filter followed by a finite-horizon LQR) and a variant whose Kalman gain
//! comes from a small recurrent network. The recurrent variant is trained
//! end to end on the quadratic control cost by differentiating through
//! simulated closed-loop rollouts.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod gain_net;
pub mod regulation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tape, Var};
