//! Sparse voxel window attention and a coarse-to-fine TSDF reconstruction
//! pipeline built on it.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod container;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod mesh;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod scene;
pub mod supervision;
pub mod verify;
pub mod voxel;

pub use error::{Error, Result};
