//! Rotated feature networks at desk scale.
//!
//! The crate provides a small tensor engine with reverse-mode
//! differentiation ([`numcore`]), channel-wise feature-map rotation
//! ([`rotation`]), the rotated feature block that splits a feature map into
//! rotation-invariant (RI) and rotation-sensitive (RS) maps ([`rfn`]), the
//! invariance and task losses ([`losses`]), a synthetic oriented-shape
//! dataset ([`synthdata`]), and the training/evaluation/ablation harness
//! ([`harness`]).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod harness;
pub mod losses;
pub mod numcore;
pub mod rfn;
pub mod rng;
pub mod rotation;
pub mod synthdata;

pub use error::{Result, RfnError};
pub use numcore::{Graph, Tensor, Var};
