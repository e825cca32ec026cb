//! Out-of-distribution monitoring for camera streams with a β-VAE.
//!
//! The pipeline generates labelled synthetic scenes, trains a β-VAE on them,
//! scores latent disentanglement, maps generative features to the latents
//! that respond to them, and finally runs per-feature conformal detectors over
//! a live frame stream.

pub mod bvae;
pub mod codec;
pub mod dataset;
pub mod disentangle;
pub mod error;
pub mod hpo;
pub mod mapping;
pub mod monitor;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod scenegen;

pub use bvae::{BetaVaeConfig, LatentEncoder, LatentStats, TrainedModel};
pub use disentangle::{compute_mig, MigParams};
pub use error::{Error, Result};
pub use hpo::{search, ExploredList, SearchConfig, SearchMode, SearchSpace};
pub use mapping::{select_latents, LatentSelection, WelfordState};
pub use monitor::{DetectionOutput, DetectorProfile, Monitor, StreamState};
pub use partition::{build_partitions, PartitionSet};
pub use scenegen::{Feature, FeatureVector, Frame, Scene, SceneSpec};
