//! Closed-form stand-in for a trained denoiser.
//!
//! Each prompt key maps to a registered class mean; the noise prediction is
//! the exact posterior mean `E[eps | z_t]` for `x0 ~ N(mu, sigma0²·I)`. This
//! makes dual-branch runs analytically tractable: everything downstream can be
//! checked against construction-known ground truth.

use std::collections::HashMap;

use crate::attnbias::AttentionBias;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};
use crate::promptopt::PromptEmbedding;

use super::{
    gaussian_posterior_eps, Capabilities, DenoiseStep, DenoiserBackend, LinearCodec,
    ToyTextEmbedder,
};

/// Prompt key of the unconditional prediction.
pub const UNCOND_KEY: &str = "";

pub struct AnalyticGaussianBackend {
    codec: LinearCodec,
    embedder: ToyTextEmbedder,
    class_means: HashMap<String, LatentGrid>,
    sigma0: f64,
}

impl AnalyticGaussianBackend {
    pub fn new(codec: LinearCodec, embedding_dim: usize, seed: u64, sigma0: f64) -> Self {
        Self {
            codec,
            embedder: ToyTextEmbedder::new(embedding_dim, seed),
            class_means: HashMap::new(),
            sigma0,
        }
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// Registers the class mean for a prompt. The key is the canonicalized
    /// prompt string; register under the empty prompt to define the
    /// unconditional mean.
    pub fn register_mean(&mut self, prompt: &str, mean: LatentGrid) -> Result<()> {
        let expected = self.codec.latent_shape();
        if mean.shape() != expected {
            let (a, b, c) = expected;
            let (d, e, f) = mean.shape();
            return Err(Error::shape(&[a, b, c], &[d, e, f]));
        }
        self.class_means
            .insert(ToyTextEmbedder::canonicalize(prompt), mean);
        Ok(())
    }

    pub fn mean_for(&self, prompt: &str) -> Option<&LatentGrid> {
        self.class_means.get(&ToyTextEmbedder::canonicalize(prompt))
    }
}

impl DenoiserBackend for AnalyticGaussianBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            latent_shape: self.codec.latent_shape(),
            image_shape: self.codec.image_shape(),
            supports_attention_bias: false,
            embedding_dim: self.embedder.dim(),
        }
    }

    fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        self.codec.encode(image)
    }

    fn decode(&self, z0: &LatentGrid) -> Result<ImageGrid> {
        self.codec.decode(z0)
    }

    fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding> {
        self.embedder.embed(prompt)
    }

    fn predict_eps(
        &self,
        z_t: &LatentGrid,
        step: &DenoiseStep,
        embedding: Option<&PromptEmbedding>,
        bias: Option<&AttentionBias>,
    ) -> Result<LatentGrid> {
        if bias.is_some() {
            return Err(Error::UnsupportedBias {
                backend: self.name(),
            });
        }
        let key = embedding.map(|e| e.prompt_key()).unwrap_or(UNCOND_KEY);
        let mu = self
            .class_means
            .get(key)
            .ok_or_else(|| Error::UnknownPromptKey(key.to_string()))?;
        z_t.check_same_shape(mu)?;
        gaussian_posterior_eps(z_t, mu, step.alpha_bar, self.sigma0)
    }

    fn name(&self) -> &'static str {
        "analytic-gaussian"
    }
}
