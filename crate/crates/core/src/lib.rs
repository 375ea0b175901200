//! Graph symmetric attention (GSA) and the SiT/SeT/SieT model family on small
//! 2D grids and 1D sequences.
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`]: integer grid geometry, symmetry permutations, edge-class maps
//!   and the triangle map used by the rotation layer. Everything here is exact
//!   integer arithmetic; no floats touch a class decision.
//! - [`tensor`]: a dense row-major tensor with reverse-mode autodiff, generic
//!   over `f32`/`f64`. Double precision is the test-suite default, single
//!   precision the training default.
//! - [`graph`]: trainable per-class weight tables, their dense and
//!   depthwise-conv materializations, symmetric dropout and init schemes.
//! - [`gsa`]: the attention operation itself, plus a plain multi-head
//!   attention carried as an independent reference path.
//! - [`model`]: the SiT/SeT/SieT architectures (local windows, global grid,
//!   tokens, heads) and checkpointing.
//! - [`testkit`]: input transforms and invariance/equivariance report helpers
//!   shared by the property suites and the `symcheck` CLI.
//! - [`data`] / [`train`]: the desk-scale harness (synthetic rotation task,
//!   CIFAR-10 binary loader, Adam, metrics CSV).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod grid;
pub mod gsa;
pub mod model;
pub mod tensor;
pub mod testkit;
pub mod train;

pub use error::{Error, Result};
