//! Training-data density estimation over embedding spaces.
//!
//! The pipeline: segment a corpus into overlapping token windows, embed
//! segments and queries under identical conditions, retrieve exact nearest
//! neighbors, and estimate the kernel density at each query point -- exactly,
//! by random sampling, or by the neighbor-decomposed approximation that
//! scales to corpora too large for the exact sum. The resulting densities
//! feed leakage detection (planted duplicates concentrate the local density
//! away from the background) and density-versus-performance analyses.
//!
//! Modules follow the pipeline stages:
//!
//! * [`corpus`] -- sliding-window segmentation of documents
//! * [`embed`] -- embedding matrices, the hermetic toy embedder, file format
//! * [`knn`] -- exact brute-force k-nearest-neighbor search
//! * [`kde`] -- kernels and the three density estimators
//! * [`analysis`] -- binning, correlation, separability, filtering, labeling
//! * [`synthlab`] -- synthetic leakage experiments in vector space
//! * [`pipeline`] -- stage orchestration behind the `lmdensity` binary
//!
//! Each capability has a runnable demo under `examples/`.

pub mod corpus;
pub mod embed;
mod error;
pub mod kde;
pub mod knn;

pub use error::{Error, Result};
