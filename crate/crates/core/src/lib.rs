//! Feature-augmented variational autoencoders (FAVAE) for unsupervised image
//! anomaly detection and localization.
//!
//! The crate bundles a small reverse-mode tensor engine, the encoder/decoder
//! family and feature extractors, the training objective, anomaly scoring,
//! a toy-distribution testbed with closed-form oracles, and an AUROC-based
//! evaluation kit.

pub mod error;
pub mod evalkit;
pub mod extractor;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use model::{Latent, Model};
pub use tensor::{Tape, Tensor, Var};
