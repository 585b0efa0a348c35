//! Prompt-guided fusion of per-tile embeddings from several foundation models.
//!
//! Everything here is `no_std` + `alloc`; file formats, timing and the CLI
//! live in the `adafusion` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod activation;
pub mod baselines;
pub mod bench;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod interp;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;
pub mod tuner;

pub use data::{DatasetManifest, FeatureTable, SourceDescriptor, Split, TaskKind, TileRef};
pub use embedding::{
    apply_mask, compose_compound, mean_pool, sample_mask, CompoundEmbedding, MaskMatrix,
};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{FusionModel, ModelSpec, Variant};
pub use params::Parameters;
pub use train::{evaluate, train, TrainConfig};
pub use tuner::{ContributionVector, GateMatrix, GateVariant, TunedPrompt, TunerParams};
