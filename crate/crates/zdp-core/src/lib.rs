//! Numerical toolkit for zero dynamics policies: a constructive local
//! synthesis of the manifold map from the linearization, a learned extension
//! trained against an optimal-control invariance loss, and an output-tracking
//! runtime with region-of-attraction tooling.

pub mod dynamics;
pub mod error;
pub mod learning;
pub mod linalg;
pub mod linear_zdp;
pub mod mlp;
pub mod model;
pub mod ocp;
pub mod runtime;

pub use error::{Error, Result};
