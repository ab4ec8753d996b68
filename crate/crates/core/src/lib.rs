//! restain: a desk-scale toolkit for unpaired H&E-to-IHC stain translation.
//!
//! The crate trains a ResNet-style generator under a least-squares
//! adversarial loss, a mix-domain patch-contrastive loss, and a
//! Gaussian-pyramid reconstruction loss, and evaluates translations with
//! FID, KID, and layer-wise PHV.
//!
//! Module map:
//! - [`tensor`]: a small reverse-mode autodiff engine over `f64` arrays that
//!   the networks and trainable losses are built on.
//! - [`dataset`]: paired-directory ingestion, aligned random crops, and a
//!   synthetic "recolor" dataset for end-to-end verification.
//! - [`networks`]: generator, PatchGAN discriminator, and per-tap projection
//!   heads, plus the versioned checkpoint container.
//! - [`patching`]: shared patch-location sampling and anchor/positive
//!   embedding-set construction.
//! - [`objectives`]: every training loss and its exact-arithmetic contracts.
//! - [`metrics`]: FID / KID / PHV with a pluggable feature extractor.
//! - [`trainer`]: the alternating D/G training loop, translation, and
//!   evaluation pipelines.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod patching;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
