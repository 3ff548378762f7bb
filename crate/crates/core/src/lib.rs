//! Resource-aware self-triggered model predictive control.
//!
//! The controller picks, at every sampling instant, both the held input and
//! the length of the next sampling interval, subject to a token-bucket style
//! resource that is refilled over time and drained by each sample.

// `!(x >= lo)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod closedloop;
pub mod dynamics;
pub mod resource;
pub mod solver;
pub mod transcription;
