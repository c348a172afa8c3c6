//! Coordinate workbench for almost complex 4-manifolds.
//!
//! The crate computes Nijenhuis tensors and their characteristic
//! distributions, builds canonical frames and curve invariants, manipulates
//! almost complex connections, assembles normal bundle structures along
//! pseudoholomorphic curves, solves twisted Cauchy-Riemann equations on
//! tori, and provides submanifold curvature decompositions. Everything is
//! driven by symbolic coordinate expressions with a finite difference
//! fallback for purely pointwise data.

pub mod bundles;
pub mod catalog;
pub mod chart;
pub mod connections;
pub mod curves;
pub mod expr;
pub mod fd;
pub mod frames;
pub mod geom;
pub mod riemannian;
pub mod torus;
