//! Hierarchical class-set supervision for semantic segmentation.
//!
//! Intermediate heads of a segmentation network are trained on reduced class
//! sets derived from their own confusion: classes a stage keeps mixing up are
//! merged (spectral clustering on the symmetrized confusion matrix), and the
//! number of merged classes per stage is chosen so that every stage sits at
//! the same accuracy/complexity trade-off as the final output.
//!
//! Modules:
//! - [`segmetrics`]: confusion matrices, IoU metrics, class merging.
//! - [`speclust`]: Jacobi eigensolver, normalized Laplacian, k-means, clustering.
//! - [`tradeoff`]: trade-off curves, ratio/angle selection, supervision plans.
//! - [`toynet`]: a small gradient-checked multi-head CNN and its training loop.
//! - [`ocrfuse`]: object-contextual fusion of intermediate features.
//! - [`synthdata`]: procedural scenes with a planted class hierarchy.

pub mod error;
mod matrix_csv;
pub mod ocrfuse;
pub mod rng;
pub mod segmetrics;
pub mod speclust;
pub mod synthdata;
pub mod toynet;
pub mod tradeoff;

pub use error::{Error, Result};
