//! Two-stage adversarially robust cross-modal alignment at desk scale.
//!
//! The crate trains tiny per-modality encoders into a shared embedding
//! space, hardens one modality's encoder with unsupervised adversarial
//! fine-tuning inside an ℓ∞ ball, then re-aligns all modalities around the
//! hardened branch with a cross-modal consistency term. Everything runs on
//! the CPU over `f64` with deterministic seeding, so experiment outputs are
//! byte-for-byte reproducible.
//!
//! Module map:
//! - [`tensor`], [`graph`], [`gradcheck`]: dense values, the reverse-mode
//!   tape they flow through, and a finite-difference oracle for testing it;
//! - [`encoder`]: MLP encoders, LoRA adapters, frozen anchor matrices;
//! - [`scorer`]: correspondence scorers behind a name-keyed registry;
//! - [`loss`]: contrastive, adversarial fine-tuning, and alignment losses;
//! - [`attack`]: ℓ∞ PGD and Auto-PGD over arbitrary scalar objectives;
//! - [`data`]: deterministic synthetic multi-modal datasets;
//! - [`config`], [`pipeline`], [`checkpoint`], [`report`]: experiment
//!   plumbing from TOML config to metrics CSV.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scorer;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
