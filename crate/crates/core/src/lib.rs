//! Adapt a source-trained semantic-segmentation model to an unseen target
//! domain from a single vision-language embedding.
//!
//! The pipeline mines per-channel feature-statistics "styles" by gradient
//! descent against one joint-space embedding (from a prompt, a partially
//! optimized prompt, or a single unlabeled image), banks them, and fine-tunes
//! the pixel classifier on statistics-augmented features.
//!
//! Modules map onto the pipeline stages:
//! - [`stats`]: instance normalization, AdaIN, PIN, cosine distance, mixing,
//!   Gaussian statistics perturbation.
//! - [`backend`]: frozen vision-language encoders (reference adapter and a
//!   seeded toy backend for desk-scale verification).
//! - [`mining`]: per-instance style optimization and the persisted bank.
//! - [`concept`]: source-concept optimization in the token-embedding space.
//! - [`adapt`]: source-only training and classifier fine-tuning on augmented
//!   features.
//! - [`eval`]: confusion accumulation and mean IoU.
//! - [`data`]: dataset ingestion, run configuration, toy dataset generator.

pub mod adapt;
pub mod backend;
pub mod concept;
pub mod data;
pub mod e2e;
pub mod error;
pub mod eval;
pub mod mining;
pub mod nn;
pub mod par;
pub mod rng;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
pub use types::{EmbeddingVector, FeatureMap, Image, StatsEpsilon, StyleStats};

/// Environment variable pointing at the pretrained-weights cache directory.
pub const MODEL_DIR_ENV: &str = "PINADAPT_MODEL_DIR";
