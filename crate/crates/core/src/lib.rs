//! Implicit bias of gradient flow in two-layer networks.
//!
//! Simulates gradient flow on diagonal, fully connected and single leaky-ReLU
//! networks, solves the matching regularized interpolation problems
//! `argmin Q(w) s.t. Xᵀw = y`, and checks the two against each other.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod kkt;
pub mod models;
pub mod regularizers;
mod serde_util;
pub mod warp;

pub use error::{Error, Result};
