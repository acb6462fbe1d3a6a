//! Generalized category discovery with relational pattern consistency.
//!
//! The crate trains a small encoder, projector, cosine prototype classifier
//! and one-vs-all heads on synthetic Gaussian-mixture worlds in which only
//! part of the classes carry labels. On top of the contrastive and
//! self-distillation baseline it adds confidence-weighted embedding fusion
//! with a behavioral alignment loss for known classes, and a relational
//! signature consistency loss for novel ones.
//!
//! Module map:
//!
//! - [`tensor`]: dense matrices and reverse-mode autodiff.
//! - [`synthdata`]: world generation, augmentations, dataset files.
//! - [`model`]: trainable parameters and score functions.
//! - [`losses`]: every objective term, batch construction and fusion.
//! - [`trainer`]: staged SGD training, metrics and checkpoints.
//! - [`eval`]: Hungarian matching, All/Old/New accuracy, ablations, sweeps.
//! - [`config`]: run configuration, presets and overrides.
//! - [`gradcheck`]: the finite-difference suite over every loss.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
