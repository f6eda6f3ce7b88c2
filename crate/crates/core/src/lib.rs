//! Near-identity decompositions of smooth invertible maps.
//!
//! The crate splits a smooth bi-Lipschitz map into a composition of layers,
//! each close to the identity in Lipschitz seminorm, certifies those layers by
//! sampling, and checks two optimization-landscape facts about such
//! compositions: functional gradients with respect to a single layer always
//! have a descent direction away from the optimum, while parametric gradients
//! of a fixed-size tanh residual network can vanish at a suboptimal point.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod decomposition;
pub mod error;
pub mod functional_grad;
pub mod linalg;
pub mod linear_factor;
pub mod lipschitz_cert;
pub mod map_core;
pub mod resnet;
pub mod sampling;

pub use error::{Error, Result};
