//! Heterogeneous ensemble fusion for handwritten-digit classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`dataset`]: IDX parsing, immutable datasets, splits.
//! * [`augment`]: rotations, translations, smoothing, elastic deformation,
//!   and the 9x / 4x augmented-dataset builders.
//! * [`nnet`]: small MLP/CNN learners trained by weighted SGD, gradient
//!   checks, and a stacked denoising autoencoder transformer.
//! * [`codes`]: OVA / OVO / ECOC code matrices and Hamming decoding.
//! * [`ensemble`]: bagging, label switching, pre-emphasis weighting and
//!   composable fusion trees.
//! * [`aggregate`]: vote tallies, plurality, OVA/OVO rules and the
//!   degree-of-certainty cross-ensemble rule.
//! * [`harness`]: declarative experiments, grid search and reports.

pub mod aggregate;
pub mod augment;
pub mod codes;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod nnet;
pub mod seed;

pub use error::{Error, Result};
