//! The denoiser abstraction both branches call.
//!
//! Two deterministic toy backends make every downstream property checkable at
//! desk scale: a closed-form Gaussian backend with exact posterior noise
//! predictions, and a synthetic cross-attention backend whose predictions are
//! attention mixtures over token targets. A thin adapter contract covers an
//! external pretrained latent-diffusion stack; no weights ship with the crate.

mod analytic;
mod codec;
mod synthetic;
mod text;

pub use analytic::AnalyticGaussianBackend;
pub use codec::LinearCodec;
pub use synthetic::SyntheticAttentionBackend;
pub use text::ToyTextEmbedder;

use serde::{Deserialize, Serialize};

use crate::attnbias::AttentionBias;
use crate::error::Result;
use crate::grid::{ImageGrid, LatentGrid};
use crate::promptopt::PromptEmbedding;

/// What a backend can do; checked by callers before they hand over work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub latent_shape: (usize, usize, usize),
    pub image_shape: (usize, usize, usize),
    pub supports_attention_bias: bool,
    pub embedding_dim: usize,
}

/// One denoising step as seen by a backend: the native timestep (what a U-Net
/// consumes) together with its signal-retention level ᾱ_t (what the analytic
/// backends consume).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseStep {
    pub t: usize,
    pub alpha_bar: f64,
}

/// A denoiser plus its latent/image codec and text encoder.
///
/// Implementations are read-only after construction; concurrent `predict_eps`
/// calls from multiple runs must be safe. The attention bias is passed
/// per-call and never stored.
pub trait DenoiserBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn encode(&self, image: &ImageGrid) -> Result<LatentGrid>;

    fn decode(&self, z0: &LatentGrid) -> Result<ImageGrid>;

    /// Per-token embedding of a non-empty prompt.
    fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding>;

    /// Noise prediction for `z_t`. A `None` embedding requests the
    /// unconditional prediction. Passing a bias to a backend whose
    /// capabilities do not advertise `supports_attention_bias` is an error,
    /// never a silent no-op.
    fn predict_eps(
        &self,
        z_t: &LatentGrid,
        step: &DenoiseStep,
        embedding: Option<&PromptEmbedding>,
        bias: Option<&AttentionBias>,
    ) -> Result<LatentGrid>;

    fn name(&self) -> &'static str;
}

/// Posterior-mean noise prediction for `x0 ~ N(mu, sigma0²·I)` under the
/// variance-preserving forward process:
/// `sqrt(1−ᾱ)·(z − sqrt(ᾱ)·mu) / (ᾱ·sigma0² + 1−ᾱ)`.
pub(crate) fn gaussian_posterior_eps(
    z_t: &LatentGrid,
    mu: &LatentGrid,
    alpha_bar: f64,
    sigma0: f64,
) -> Result<LatentGrid> {
    let one_minus = 1.0 - alpha_bar;
    let denom = alpha_bar * sigma0 * sigma0 + one_minus;
    let scale = one_minus.sqrt() / denom;
    z_t.lin_comb(scale, mu, -scale * alpha_bar.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn degenerate_posterior_recovers_true_eps() {
        // sigma0 = 0: prediction is (z − sqrt(ᾱ)·mu)/sqrt(1−ᾱ), so feeding a
        // forward-noised mean returns the very noise that was added.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mu = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let eps = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let a = 0.37f64;
        let z = mu.lin_comb(a.sqrt(), &eps, (1.0 - a).sqrt()).unwrap();
        let pred = gaussian_posterior_eps(&z, &mu, a, 0.0).unwrap();
        assert!(pred.max_abs_diff(&eps).unwrap() < 1e-12);
    }

    #[test]
    fn posterior_mean_matches_monte_carlo_regression() {
        // One (ᾱ, sigma0) point, scalar coordinates: estimate E[eps | z] by
        // regressing eps on z over a large seeded sample and compare the
        // implied prediction at probe points against the closed form.
        let alpha_bar = 0.4f64;
        let sigma0 = 0.8f64;
        let mu = 0.7f64;
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let n = 2_000_000usize;
        let (mut sum_z, mut sum_e, mut sum_zz, mut sum_ze) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..n {
            let x0 = mu + sigma0 * rng.sample::<f64, _>(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let z = alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * e;
            sum_z += z;
            sum_e += e;
            sum_zz += z * z;
            sum_ze += z * e;
        }
        let nf = n as f64;
        let mean_z = sum_z / nf;
        let mean_e = sum_e / nf;
        let cov_ze = sum_ze / nf - mean_z * mean_e;
        let var_z = sum_zz / nf - mean_z * mean_z;
        let slope = cov_ze / var_z;

        for probe in [-1.0f64, 0.3, 1.5] {
            let mc = mean_e + slope * (probe - mean_z);
            let grid = LatentGrid::from_fn((1, 1, 1), |_, _, _| probe);
            let mu_grid = LatentGrid::from_fn((1, 1, 1), |_, _, _| mu);
            let analytic = gaussian_posterior_eps(&grid, &mu_grid, alpha_bar, sigma0).unwrap();
            let a = analytic.data()[[0, 0, 0]];
            assert!(
                (a - mc).abs() < 3e-2 * a.abs().max(1.0),
                "probe {probe}: analytic {a} vs monte carlo {mc}"
            );
        }
    }

    #[test]
    fn posterior_is_affine_in_z() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mu = LatentGrid::standard_normal((3, 3, 2), &mut rng);
        let z1 = LatentGrid::standard_normal((3, 3, 2), &mut rng);
        let z2 = LatentGrid::standard_normal((3, 3, 2), &mut rng);
        let (a, b) = (0.3, 0.7); // affine combination weights summing to 1
        let mixed = z1.lin_comb(a, &z2, b).unwrap();
        let lhs = gaussian_posterior_eps(&mixed, &mu, 0.5, 0.4).unwrap();
        let rhs = gaussian_posterior_eps(&z1, &mu, 0.5, 0.4)
            .unwrap()
            .lin_comb(a, &gaussian_posterior_eps(&z2, &mu, 0.5, 0.4).unwrap(), b)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
