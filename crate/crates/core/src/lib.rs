//! Unified image- and label-denoising for few-shot task adaptation over
//! pre-extracted features.
//!
//! Support-set regions are weighted by contrastive relevance ([`cora`]),
//! smoothed into per-image weights by a momentum accumulator, and used to
//! weight two contrastive objectives ([`losses`]) that adapt a residual
//! feature adapter and projection head ([`adaptation`]). Queries are then
//! classified by a weighted nearest-centroid rule ([`classifier`]).
//! [`harness`] drives seeded benchmark sweeps.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the gradient
//! checks and the benchmark use.

pub mod adaptation;
pub mod classifier;
pub mod cora;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod scalar;

pub use error::{DetaError, Result};
pub use scalar::Scalar;

pub type TaskEpisode = episodes::TaskEpisode<f64>;
pub type SupportSample = episodes::SupportSample<f64>;
pub type QuerySample = episodes::QuerySample<f64>;
pub type RegionWeightTable = cora::RegionWeightTable<f64>;
pub type ImageWeightAccumulator = cora::ImageWeightAccumulator<f64>;
pub type EmbeddingBatch = losses::EmbeddingBatch<f64>;
pub type LossValue = losses::LossValue<f64>;
pub type AdaptationModel = adaptation::AdaptationModel<f64>;
pub type AdaptedState = adaptation::AdaptedState<f64>;
pub type PrototypeSet = classifier::PrototypeSet<f64>;

pub type TaskEpisodeF32 = episodes::TaskEpisode<f32>;
pub type AdaptedStateF32 = adaptation::AdaptedState<f32>;
