//! Spatially biased cross-attention.
//!
//! A nonnegative spatial prior is added to the attention logits of the
//! anomaly token only, before the usual `1/sqrt(d_h)` scaling and softmax.
//! The prior switches from a coarse foreground mask in the early denoising
//! stage to the delta-derived mask in the late stage.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Duration;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ScalarGrid};

/// The spatial prior plus everything needed to apply it at an attention site.
/// Immutable; one value may be shared by all sites within a step.
#[derive(Debug, Clone)]
pub struct AttentionBias {
    mask: ScalarGrid,
    anomaly_indices: BTreeSet<usize>,
    beta: f64,
    /// Attention-site identifiers to bias; empty means all sites.
    layer_filter: BTreeSet<String>,
}

impl AttentionBias {
    pub fn new(mask: ScalarGrid, anomaly_indices: BTreeSet<usize>, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must be a nonnegative real, got {beta}"
            )));
        }
        if mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig(
                "attention prior values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            mask,
            anomaly_indices,
            beta,
            layer_filter: BTreeSet::new(),
        })
    }

    pub fn with_layer_filter(mut self, layers: BTreeSet<String>) -> Self {
        self.layer_filter = layers;
        self
    }

    pub fn mask(&self) -> &ScalarGrid {
        &self.mask
    }

    pub fn anomaly_indices(&self) -> &BTreeSet<usize> {
        &self.anomaly_indices
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Whether the bias targets the attention site named `layer`.
    pub fn applies_to(&self, layer: &str) -> bool {
        self.layer_filter.is_empty() || self.layer_filter.contains(layer)
    }

    /// The prior resampled to an `r×r` site and flattened row-major.
    pub fn mask_for_site(&self, r: usize) -> Result<Vec<f64>> {
        let resized = resize_prior(&self.mask, r)?;
        Ok(resized.into_raw_vec_and_offset().0)
    }
}

/// Adds `beta·mask_flat[u]` to the anomaly-token columns of an `N×Z` logit
/// matrix. Every other column is bit-identical to the input.
pub fn bias_logits(
    logits: &Array2<f64>,
    mask_flat: &[f64],
    anomaly_indices: &BTreeSet<usize>,
    beta: f64,
) -> Result<Array2<f64>> {
    let (n, z) = logits.dim();
    if mask_flat.len() != n {
        return Err(Error::shape(&[n], &[mask_flat.len()]));
    }
    for &j in anomaly_indices {
        if j >= z {
            return Err(Error::TokenIndexOutOfRange { index: j, len: z });
        }
    }
    let mut out = logits.clone();
    for u in 0..n {
        let b = beta * mask_flat[u];
        for &j in anomaly_indices {
            out[[u, j]] += b;
        }
    }
    Ok(out)
}

/// Row-wise `softmax(logits / sqrt(d_h))`; the bias, when present, has already
/// been added to the raw logits so the sum is what gets scaled.
pub fn scaled_softmax(logits: &Array2<f64>, head_dim: usize) -> Array2<f64> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = logits * scale;
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Resamples a spatial prior to an `r×r` attention site. Downsampling is an
/// exact box average; upsampling is nearest-neighbor. Values are clamped to
/// `[0, 1]`.
pub fn resize_prior(mask: &ScalarGrid, r: usize) -> Result<ScalarGrid> {
    if r == 0 {
        return Err(Error::InvalidConfig("target side length must be >= 1".into()));
    }
    let (h, w) = mask.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape(&[1, 1], &[h, w]));
    }
    if (h, w) == (r, r) {
        return Ok(mask.clone());
    }
    let rows = resample_axis(mask, r, true);
    let out = resample_axis(&rows, r, false);
    Ok(out.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Resamples one axis to length `r`: fractional box averaging when shrinking,
/// nearest-neighbor when growing.
fn resample_axis(input: &ScalarGrid, r: usize, rows: bool) -> ScalarGrid {
    let (h, w) = input.dim();
    let src = if rows { h } else { w };
    if src == r {
        return input.clone();
    }
    let out_shape = if rows { (r, w) } else { (h, r) };
    let mut out = Array2::zeros(out_shape);
    if r < src {
        let ratio = src as f64 / r as f64;
        for i in 0..r {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            for k in 0..(if rows { w } else { h }) {
                let mut acc = 0.0;
                for s in first..last {
                    let cover = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    let v = if rows { input[[s, k]] } else { input[[k, s]] };
                    acc += cover * v;
                }
                let v = acc / ratio;
                if rows {
                    out[[i, k]] = v;
                } else {
                    out[[k, i]] = v;
                }
            }
        }
    } else {
        for i in 0..r {
            let s = ((i as f64 + 0.5) * src as f64 / r as f64).floor() as usize;
            let s = s.min(src - 1);
            for k in 0..(if rows { w } else { h }) {
                if rows {
                    out[[i, k]] = input[[s, k]];
                } else {
                    out[[k, i]] = input[[k, s]];
                }
            }
        }
    }
    out
}

/// Source of the coarse foreground mask used as the early-stage prior.
pub trait ForegroundProvider {
    /// Returns an image-resolution mask; values are clamped to `[0, 1]` by
    /// the caller, so providers may hand back raw segmentations.
    fn segment(&self, image: &ImageGrid) -> Result<ScalarGrid>;

    fn name(&self) -> &str;
}

/// Whole-surface prior: every position is foreground.
#[derive(Debug, Default)]
pub struct FallbackForeground;

impl ForegroundProvider for FallbackForeground {
    fn segment(&self, image: &ImageGrid) -> Result<ScalarGrid> {
        let (h, w, _) = image.shape();
        Ok(Array2::ones((h, w)))
    }

    fn name(&self) -> &str {
        "fallback"
    }
}

/// Shells out to an external segmenter: the image is written as PNG, the
/// command is invoked as `<cmd> <input.png> <output.png>`, and the output is
/// read back as a single-channel 0/255 mask.
pub struct CommandForeground {
    command: String,
    timeout: Duration,
}

impl CommandForeground {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
        }
    }
}

impl ForegroundProvider for CommandForeground {
    fn segment(&self, image: &ImageGrid) -> Result<ScalarGrid> {
        let dir = std::env::temp_dir().join(format!(
            "deltadeno-fg-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        ));
        std::fs::create_dir_all(&dir)?;
        let input = dir.join("input.png");
        let output = dir.join("mask.png");
        let result = self.run(image, &input, &output);
        let _ = std::fs::remove_dir_all(&dir);
        result
    }

    fn name(&self) -> &str {
        &self.command
    }
}

impl CommandForeground {
    fn run(&self, image: &ImageGrid, input: &Path, output: &Path) -> Result<ScalarGrid> {
        crate::pipeline::artifacts::write_image_png(image, input)?;
        let mut child = Command::new(&self.command)
            .arg(input)
            .arg(output)
            .spawn()
            .map_err(|e| Error::ForegroundProvider(format!("spawn {:?}: {e}", self.command)))?;
        let deadline = std::time::Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(status)) if status.success() => break,
                Ok(Some(status)) => {
                    return Err(Error::ForegroundProvider(format!(
                        "{:?} exited with {status}",
                        self.command
                    )))
                }
                Ok(None) => {
                    if std::time::Instant::now() > deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(Error::ForegroundProvider(format!(
                            "{:?} timed out after {:?}",
                            self.command, self.timeout
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(Error::ForegroundProvider(format!("wait: {e}"))),
            }
        }
        let img = image::open(output)
            .map_err(|e| Error::ForegroundProvider(format!("read mask: {e}")))?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
        }))
    }
}

/// Obtains the early-stage prior at latent resolution. Provider failures fall
/// back to the whole-surface mask instead of aborting; the second return value
/// reports whether the fallback was used.
pub fn foreground_prior(
    image: &ImageGrid,
    provider: &dyn ForegroundProvider,
    latent_hw: (usize, usize),
) -> (ScalarGrid, bool) {
    match provider.segment(image) {
        Ok(raw) => {
            let clamped = raw.mapv(|v| v.clamp(0.0, 1.0));
            match resize_to(&clamped, latent_hw) {
                Ok(m) => (m, false),
                Err(e) => {
                    eprintln!(
                        "warning: foreground provider {:?} produced an unusable mask ({e}); using the whole-surface prior",
                        provider.name()
                    );
                    (Array2::ones(latent_hw), true)
                }
            }
        }
        Err(e) => {
            eprintln!(
                "warning: foreground provider {:?} failed ({e}); using the whole-surface prior",
                provider.name()
            );
            (Array2::ones(latent_hw), true)
        }
    }
}

/// Rectangular variant of [`resize_prior`] used when latent H and W differ
/// from the provider's mask shape.
pub fn resize_to(mask: &ScalarGrid, target: (usize, usize)) -> Result<ScalarGrid> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidConfig("target shape must be positive".into()));
    }
    if mask.dim() == target {
        return Ok(mask.clone());
    }
    let rows = resample_axis(mask, target.0, true);
    let out = resample_axis(&rows, target.1, false);
    Ok(out.mapv(|v| v.clamp(0.0, 1.0)))
}
