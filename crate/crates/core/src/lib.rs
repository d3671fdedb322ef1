//! Concrete ticket search: a differentiable, probabilistic search over binary
//! pruning masks of a frozen network, with sparsity controllers, a family of
//! pruning objectives, saliency and magnitude baselines, and an exhaustive
//! oracle for tiny networks.

pub mod baselines;
pub mod controllers;
pub mod data;
pub mod error;
pub mod harness;
pub mod mask;
pub mod nn;
pub mod objectives;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
