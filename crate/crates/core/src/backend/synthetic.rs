//! Synthetic cross-attention denoiser.
//!
//! Queries come from fixed coordinate features, keys from the token
//! embeddings, both through seeded immutable projections. The prediction
//! pulls each latent position toward the attention-weighted mixture of
//! per-token target patches, so attention biasing has a directly observable
//! spatial effect. Two attention sites at different resolutions exercise the
//! prior resizing and layer filtering paths.

use std::collections::HashMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::attnbias::{bias_logits, scaled_softmax, AttentionBias};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid, ScalarGrid};
use crate::promptopt::PromptEmbedding;

use super::{
    gaussian_posterior_eps, Capabilities, DenoiseStep, DenoiserBackend, LinearCodec,
    ToyTextEmbedder,
};

const POS_FEATURES: usize = 8;

struct AttentionSite {
    id: String,
    side: usize,
    /// side² × POS_FEATURES coordinate features, row-major over positions.
    features: Array2<f64>,
}

pub struct SyntheticAttentionBackend {
    codec: LinearCodec,
    embedder: ToyTextEmbedder,
    sites: Vec<AttentionSite>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_g: Array2<f64>,
    token_targets: HashMap<u32, Vec<f64>>,
    head_dim: usize,
    sigma0: f64,
    uncond: PromptEmbedding,
    /// Scene content the denoiser pulls toward in addition to the
    /// attention-derived tint; usually the encoded input image.
    content: Option<LatentGrid>,
}

impl SyntheticAttentionBackend {
    pub fn new(
        codec: LinearCodec,
        embedding_dim: usize,
        head_dim: usize,
        seed: u64,
        sigma0: f64,
    ) -> Result<Self> {
        let (lh, lw, lc) = codec.latent_shape();
        if lh != lw {
            return Err(Error::InvalidConfig(
                "synthetic attention expects square latents".into(),
            ));
        }
        let embedder = ToyTextEmbedder::new(embedding_dim, seed);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xA77E_1710);
        // Queries are kept small so unbiased attention stays near-uniform and
        // the spatial bias is the dominant source of localization.
        let scale_q = 0.25 / (POS_FEATURES as f64).sqrt();
        let w_q = Array2::from_shape_simple_fn((POS_FEATURES, head_dim), || {
            rng.sample::<f64, _>(StandardNormal) * scale_q
        });
        let scale_k = 1.0 / (embedding_dim as f64).sqrt();
        let w_k = Array2::from_shape_simple_fn((embedding_dim, head_dim), || {
            rng.sample::<f64, _>(StandardNormal) * scale_k
        });
        // Default token tints are faint; registered targets carry the signal.
        let scale_g = 0.1 / (embedding_dim as f64).sqrt();
        let w_g = Array2::from_shape_simple_fn((embedding_dim, lc), || {
            rng.sample::<f64, _>(StandardNormal) * scale_g
        });
        let mut sites = vec![AttentionSite {
            id: "cross_full".into(),
            side: lh,
            features: coordinate_features(lh),
        }];
        if lh >= 2 {
            sites.push(AttentionSite {
                id: "cross_half".into(),
                side: lh / 2,
                features: coordinate_features(lh / 2),
            });
        }
        let uncond = embedder.embed_allow_empty("")?;
        Ok(Self {
            codec,
            embedder,
            sites,
            w_q,
            w_k,
            w_g,
            token_targets: HashMap::new(),
            head_dim,
            sigma0,
            uncond,
            content: None,
        })
    }

    /// Anchors predictions to a scene content latent; set once at
    /// construction time, typically to the encoded input image.
    pub fn set_content(&mut self, content: LatentGrid) -> Result<()> {
        let expected = self.codec.latent_shape();
        if content.shape() != expected {
            let (a, b, c) = expected;
            let (d, e, f) = content.shape();
            return Err(Error::shape(&[a, b, c], &[d, e, f]));
        }
        self.content = Some(content);
        Ok(())
    }

    /// Overrides the target patch mean for one token; the default is the
    /// token embedding pushed through the fixed target projection.
    pub fn register_target(&mut self, word: &str, target: Vec<f64>) -> Result<()> {
        let (_, _, lc) = self.codec.latent_shape();
        if target.len() != lc {
            return Err(Error::shape(&[lc], &[target.len()]));
        }
        let tokens = ToyTextEmbedder::tokenize(word);
        // tokenize wraps with BOS/EOS; the payload is the middle token.
        if tokens.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "register_target expects a single word, got {word:?}"
            )));
        }
        self.token_targets.insert(tokens[1], target);
        Ok(())
    }

    pub fn site_ids(&self) -> Vec<&str> {
        self.sites.iter().map(|s| s.id.as_str()).collect()
    }

    /// Per-token target patch means for an embedding (Z × C).
    fn targets(&self, emb: &PromptEmbedding) -> Array2<f64> {
        let (_, _, lc) = self.codec.latent_shape();
        let mut g = emb.vectors().dot(&self.w_g);
        for (i, &tok) in emb.tokens().iter().enumerate() {
            if let Some(t) = self.token_targets.get(&tok) {
                for c in 0..lc {
                    g[[i, c]] = t[c];
                }
            }
        }
        g
    }

    /// Post-softmax attention map (N × Z) at one site, optionally biased.
    pub fn attention_map(
        &self,
        emb: &PromptEmbedding,
        bias: Option<&AttentionBias>,
        site_id: &str,
    ) -> Result<Array2<f64>> {
        let site = self
            .sites
            .iter()
            .find(|s| s.id == site_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attention site {site_id:?}")))?;
        let q = site.features.dot(&self.w_q);
        let k = emb.vectors().dot(&self.w_k);
        let mut logits = q.dot(&k.t());
        if let Some(b) = bias {
            if b.applies_to(&site.id) {
                let mask = b.mask_for_site(site.side)?;
                logits = bias_logits(&logits, &mask, b.anomaly_indices(), b.beta())?;
            }
        }
        Ok(scaled_softmax(&logits, self.head_dim))
    }

    /// The attention-derived x0 target, averaged over sites at latent
    /// resolution.
    fn attention_target(
        &self,
        emb: &PromptEmbedding,
        bias: Option<&AttentionBias>,
    ) -> Result<LatentGrid> {
        let (lh, lw, lc) = self.codec.latent_shape();
        let g = self.targets(emb);
        let mut acc = Array3::<f64>::zeros((lh, lw, lc));
        for site in &self.sites {
            let attn = self.attention_map(emb, bias, &site.id)?;
            let y = attn.dot(&g); // N × C
            for c in 0..lc {
                let plane =
                    ScalarGrid::from_shape_fn((site.side, site.side), |(i, j)| {
                        y[[i * site.side + j, c]]
                    });
                let resized = resize_plane(&plane, (lh, lw));
                for i in 0..lh {
                    for j in 0..lw {
                        acc[[i, j, c]] += resized[[i, j]];
                    }
                }
            }
        }
        let n = self.sites.len() as f64;
        let tint = LatentGrid::new(acc.mapv(|v| v / n));
        match &self.content {
            Some(content) => content.lin_comb(1.0, &tint, 1.0),
            None => Ok(tint),
        }
    }
}

/// Nearest-neighbor plane resize; site outputs are unconstrained reals so the
/// `[0, 1]` clamp of the prior resizer must not apply here.
fn resize_plane(plane: &ScalarGrid, target: (usize, usize)) -> ScalarGrid {
    let (h, w) = plane.dim();
    if (h, w) == target {
        return plane.clone();
    }
    ScalarGrid::from_shape_fn(target, |(i, j)| {
        let si = (((i as f64 + 0.5) * h as f64 / target.0 as f64).floor() as usize).min(h - 1);
        let sj = (((j as f64 + 0.5) * w as f64 / target.1 as f64).floor() as usize).min(w - 1);
        plane[[si, sj]]
    })
}

fn coordinate_features(side: usize) -> Array2<f64> {
    use std::f64::consts::TAU;
    let n = side * side;
    Array2::from_shape_fn((n, POS_FEATURES), |(u, f)| {
        let i = (u / side) as f64 / side as f64;
        let j = (u % side) as f64 / side as f64;
        match f {
            0 => 1.0,
            1 => i,
            2 => j,
            3 => (TAU * i).sin(),
            4 => (TAU * i).cos(),
            5 => (TAU * j).sin(),
            6 => (TAU * j).cos(),
            _ => (TAU * (i + j)).sin(),
        }
    })
}

impl DenoiserBackend for SyntheticAttentionBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            latent_shape: self.codec.latent_shape(),
            image_shape: self.codec.image_shape(),
            supports_attention_bias: true,
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
        let expected = self.codec.latent_shape();
        if z_t.shape() != expected {
            let (a, b, c) = expected;
            let (d, e, f) = z_t.shape();
            return Err(Error::shape(&[a, b, c], &[d, e, f]));
        }
        let emb = embedding.unwrap_or(&self.uncond);
        let target = self.attention_target(emb, bias)?;
        gaussian_posterior_eps(z_t, &target, step.alpha_bar, self.sigma0)
    }

    fn name(&self) -> &'static str {
        "synthetic-attention"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn backend() -> SyntheticAttentionBackend {
        SyntheticAttentionBackend::new(LinearCodec::pool_project((16, 16, 3), 4, 2), 32, 8, 11, 0.1)
            .unwrap()
    }

    #[test]
    fn zero_beta_bias_equals_no_bias() {
        let b = backend();
        let emb = b
            .encode_text("a photo of a bottle with crack")
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([6, 7]))
            .unwrap();
        let (lh, lw, _) = b.capabilities().latent_shape;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let z = LatentGrid::standard_normal(b.capabilities().latent_shape, &mut rng);
        let step = DenoiseStep {
            t: 5,
            alpha_bar: 0.6,
        };
        let mask = ScalarGrid::ones((lh, lw));
        let bias = AttentionBias::new(mask, emb.anomaly_indices().clone(), 0.0).unwrap();
        let with_bias = b.predict_eps(&z, &step, Some(&emb), Some(&bias)).unwrap();
        let without = b.predict_eps(&z, &step, Some(&emb), None).unwrap();
        assert!(with_bias.bit_eq(&without));
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let b = backend();
        let emb = b.encode_text("a scratched widget").unwrap();
        for site in b.site_ids() {
            let a = b.attention_map(&emb, None, site).unwrap();
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn masked_attention_mass_grows_strictly_with_beta() {
        let b = backend();
        let emb = b
            .encode_text("a photo of a bottle with crack")
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([6]))
            .unwrap();
        let (lh, lw, _) = b.capabilities().latent_shape;
        let mask = ScalarGrid::from_shape_fn((lh, lw), |(i, j)| {
            if i < lh / 2 && j < lw / 2 {
                1.0
            } else {
                0.0
            }
        });
        let mut prev = -1.0;
        for beta in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let bias =
                AttentionBias::new(mask.clone(), emb.anomaly_indices().clone(), beta).unwrap();
            let a = b.attention_map(&emb, Some(&bias), "cross_full").unwrap();
            let mass: f64 = (0..lh * lw)
                .filter(|u| mask[[u / lw, u % lw]] > 0.0)
                .map(|u| a[[u, 6]])
                .sum();
            assert!(mass > prev, "mass {mass} did not grow past {prev} at beta {beta}");
            prev = mass;
        }
    }

    #[test]
    fn layer_filter_limits_bias_to_named_sites() {
        let b = backend();
        let emb = b
            .encode_text("a bottle with crack")
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([4]))
            .unwrap();
        let (lh, lw, _) = b.capabilities().latent_shape;
        let mask = ScalarGrid::ones((lh, lw));
        let bias = AttentionBias::new(mask, emb.anomaly_indices().clone(), 3.0)
            .unwrap()
            .with_layer_filter(BTreeSet::from(["cross_half".to_string()]));
        let unbiased = b.attention_map(&emb, None, "cross_full").unwrap();
        let filtered = b.attention_map(&emb, Some(&bias), "cross_full").unwrap();
        assert_eq!(unbiased, filtered);
        let half_unbiased = b.attention_map(&emb, None, "cross_half").unwrap();
        let half_biased = b.attention_map(&emb, Some(&bias), "cross_half").unwrap();
        assert_ne!(half_unbiased, half_biased);
    }

    #[test]
    fn predictions_are_bit_deterministic_across_instances() {
        let b1 = backend();
        let b2 = backend();
        let emb1 = b1.encode_text("a dented can").unwrap();
        let emb2 = b2.encode_text("a dented can").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = LatentGrid::standard_normal(b1.capabilities().latent_shape, &mut rng);
        let step = DenoiseStep {
            t: 7,
            alpha_bar: 0.4,
        };
        let p1 = b1.predict_eps(&z, &step, Some(&emb1), None).unwrap();
        let p2 = b2.predict_eps(&z, &step, Some(&emb2), None).unwrap();
        assert!(p1.bit_eq(&p2));
    }

    #[test]
    fn registered_targets_override_projected_ones() {
        let mut b = backend();
        b.register_target("crack", vec![2.0, -2.0, 2.0, -2.0]).unwrap();
        let emb = b.encode_text("crack").unwrap();
        let g = b.targets(&emb);
        assert_eq!(g[[1, 0]], 2.0);
        assert_eq!(g[[1, 1]], -2.0);
    }
}
