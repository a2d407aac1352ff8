//! Training-free zero-shot anomaly generation by delta denoising.
//!
//! Two diffusion branches denoise the same warm-started latent under a
//! minimal prompt pair (normal vs. anomaly). Their per-step prediction
//! discrepancies accumulate into an image-specific attribution map; the map
//! becomes a mask that guides late-stage latent inpainting, prompt-token
//! refinement sharpens the anomaly semantics beforehand, and a spatial
//! attention bias keeps the anomaly token focused on the predicted region.
//! The output is an anomaly image plus a pixel mask, from one normal image.
//!
//! Module map:
//! - [`schedule`] — noise schedule, forward noising, CFG, reverse stepping
//! - [`backend`] — the denoiser abstraction and two deterministic toy backends
//! - [`promptopt`] — token-level prompt refinement
//! - [`attnbias`] — spatially biased cross-attention and foreground priors
//! - [`attribution`] — the synchronized dual-branch delta engine
//! - [`maskops`] — delta-map normalization, smoothing, thresholding, cleanup
//! - [`pipeline`] — config, end-to-end generation, batching, artifacts
//! - [`evalkit`] — toy-scenario oracles, mask metrics, parameter sweeps

pub mod attnbias;
pub mod attribution;
pub mod backend;
pub mod error;
pub mod evalkit;
pub mod grid;
pub mod maskops;
pub mod pipeline;
pub mod promptopt;
pub mod schedule;

pub use attnbias::AttentionBias;
pub use attribution::{DeltaAccumulator, DualBranchOutcome, StagePlan};
pub use backend::{Capabilities, DenoiserBackend};
pub use error::{Error, Result};
pub use grid::{ImageGrid, LatentGrid, ScalarGrid};
pub use maskops::{BinaryMask, DeltaMap};
pub use pipeline::{DeltaDenoConfig, GenerationResult};
pub use promptopt::{PromptEmbedding, RefinementConfig};
pub use schedule::{GuidanceConfig, Schedule, ScheduleSpec};
