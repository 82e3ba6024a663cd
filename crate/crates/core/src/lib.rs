//! Contrastive dual-encoder training with Dirichlet evidential calibration.
//!
//! Modules, bottom-up:
//!
//! - [`autodiff`]: reverse-mode AD over `f64` tensors plus ln Γ / ψ.
//! - [`encoder`]: LoRA-adapted attention image tower and a bag-of-tokens text
//!   tower, both projected onto the unit sphere.
//! - [`evidential`]: symmetric contrastive loss, softplus evidence, Dirichlet
//!   beliefs and uncertainty, evidential cross-entropy and KL terms.
//! - [`datagen`]: deterministic synthetic image/text corpora.
//! - [`trainer`]: Adam pretraining loop, linear probes, checkpoints.
//! - [`inference`]: zero-shot classification, leave-one-out retrieval and
//!   metrics.

pub mod autodiff;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evidential;
pub mod inference;
pub mod trainer;

pub use error::{Error, Result};
