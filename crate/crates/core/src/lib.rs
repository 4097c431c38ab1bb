//! Multi-block structured-grid engine for the steady incompressible
//! Navier-Stokes equations.
//!
//! Finite-difference residuals on curvilinear blocks are evaluated as
//! fixed-weight graph convolutions over a block-separated computational
//! graph, so that they are differentiable end to end. A graph network is
//! trained against those residuals without labeled data, and a direct
//! residual-minimization solver on the same discretization serves as the
//! verification oracle.

pub mod diffengine;
pub mod error;
pub mod graph;
pub mod gnmodel;
pub mod mesh;
pub mod metrics;
pub mod post;
pub mod residual;
pub mod solver;
pub mod training;

pub use error::{Error, Result};
