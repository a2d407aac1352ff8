//! Mask extraction from raw delta accumulators.
//!
//! The fixed processing order is normalize → smooth → threshold → clean, so
//! percentile normalization removes scale, the light blur acts on a continuous
//! map, and morphology acts on a binary mask.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarGrid;

/// Which stage of the run a delta map was extracted at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mid,
    Final,
}

/// A normalized delta map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMap {
    values: ScalarGrid,
    provenance: Provenance,
}

impl DeltaMap {
    pub fn values(&self) -> &ScalarGrid {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// A strictly binary mask at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Array2<bool>,
    pixel_count: usize,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        let pixel_count = values.iter().filter(|&&v| v).count();
        Self {
            values,
            pixel_count,
        }
    }

    pub fn empty(shape: (usize, usize)) -> Self {
        Self {
            values: Array2::from_elem(shape, false),
            pixel_count: 0,
        }
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }

    /// The mask as a `[0, 1]` scalar grid (for use as an attention prior).
    pub fn to_scalar(&self) -> ScalarGrid {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

/// Percentile-clipped min-max normalization.
///
/// Values are clipped at the 1st/99th percentiles and mapped affinely to
/// `[0, 1]`; a (near-)constant input maps to all-zeros.
pub fn normalize(s: &ScalarGrid, provenance: Provenance) -> Result<DeltaMap> {
    if s.iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeEntries("delta accumulator"));
    }
    let mut sorted: Vec<f64> = s.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite delta values"));
    let lo = percentile(&sorted, 1.0);
    let hi = percentile(&sorted, 99.0);
    let range = hi - lo;
    let values = if range <= f64::EPSILON * hi.abs().max(1.0) {
        Array2::zeros(s.dim())
    } else {
        s.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
    };
    Ok(DeltaMap { values, provenance })
}

/// Linear-interpolation percentile on a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = p / 100.0 * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Gaussian blur with symmetric (half-sample reflected) borders. The kernel is
/// a sampled Gaussian of radius `ceil(3·sigma)` normalized to unit sum;
/// `sigma = 0` is the identity. Output values are re-clamped to `[0, 1]`.
pub fn smooth(m: &DeltaMap, sigma: f64) -> Result<DeltaMap> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "smoothing sigma must be nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let rows = convolve_axis(&m.values, &kernel, true);
    let blurred = convolve_axis(&rows, &kernel, false);
    Ok(DeltaMap {
        values: blurred.mapv(|v| v.clamp(0.0, 1.0)),
        provenance: m.provenance,
    })
}

/// Sampled, unit-sum 1-D Gaussian with radius `ceil(3·sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn reflect(i: i64, n: i64) -> usize {
    // Half-sample symmetric: -1 -> 0, -2 -> 1, n -> n-1, n+1 -> n-2.
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn convolve_axis(input: &ScalarGrid, kernel: &[f64], rows: bool) -> ScalarGrid {
    let (h, w) = input.dim();
    let radius = (kernel.len() / 2) as i64;
    let n = if rows { h } else { w } as i64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let center = if rows { i } else { j } as i64;
        let mut acc = 0.0;
        for (ki, &kv) in kernel.iter().enumerate() {
            let offset = ki as i64 - radius;
            let s = reflect(center + offset, n);
            let v = if rows { input[[s, j]] } else { input[[i, s]] };
            acc += kv * v;
        }
        acc
    })
}

/// Binarizes a normalized delta map: 1 where `value > tau` (strict).
pub fn threshold(m: &DeltaMap, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!(
            "threshold must lie in [0, 1], got {tau}"
        )));
    }
    Ok(BinaryMask::new(m.values.mapv(|v| v > tau)))
}

/// Morphological open then close with a square `kernel×kernel` structuring
/// element, followed by removal of 4-connected components smaller than
/// `min_component` pixels.
///
/// Border convention: dilation clips to the frame and erosion treats
/// out-of-frame window positions as satisfied, which keeps erosion/dilation
/// an adjunction on the frame and open-then-close idempotent.
pub fn clean(mask: &BinaryMask, min_component: usize, kernel: usize) -> Result<BinaryMask> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "morphology kernel must be an odd positive integer, got {kernel}"
        )));
    }
    let radius = kernel / 2;
    let mut v = mask.values.clone();
    if radius > 0 {
        v = dilate_bool(&erode_bool(&v, radius), radius); // open
        v = erode_bool(&dilate_bool(&v, radius), radius); // close
    }
    if min_component > 1 {
        v = remove_small_components(&v, min_component);
    }
    Ok(BinaryMask::new(v))
}

fn erode_bool(v: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = v.dim();
    let r = radius as i64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                if !v[[y as usize, x as usize]] {
                    return false;
                }
            }
        }
        true
    })
}

fn dilate_bool(v: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = v.dim();
    let r = radius as i64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && v[[y as usize, x as usize]] {
                    return true;
                }
            }
        }
        false
    })
}

/// Dilates a binary mask by `radius` pixels with a square structuring element.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    BinaryMask::new(dilate_bool(&mask.values, radius))
}

fn remove_small_components(v: &Array2<bool>, min_component: usize) -> Array2<bool> {
    let (h, w) = v.dim();
    let mut out = v.clone();
    let mut seen = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if !v[[si, sj]] || seen[[si, sj]] {
                continue;
            }
            stack.push((si, sj));
            seen[[si, sj]] = true;
            let mut component = vec![(si, sj)];
            while let Some((i, j)) = stack.pop() {
                let neighbors = [
                    (i.wrapping_sub(1), j),
                    (i + 1, j),
                    (i, j.wrapping_sub(1)),
                    (i, j + 1),
                ];
                for (y, x) in neighbors {
                    if y < h && x < w && v[[y, x]] && !seen[[y, x]] {
                        seen[[y, x]] = true;
                        stack.push((y, x));
                        component.push((y, x));
                    }
                }
            }
            if component.len() < min_component {
                for (i, j) in component {
                    out[[i, j]] = false;
                }
            }
        }
    }
    out
}

/// Nearest-neighbor upsample of a latent-resolution mask to image resolution.
/// Image dimensions must be integer multiples of the mask dimensions.
pub fn to_image_mask(mask: &BinaryMask, image_hw: (usize, usize)) -> Result<Array2<bool>> {
    let (mh, mw) = mask.shape();
    let (ih, iw) = image_hw;
    if mh == 0 || mw == 0 || ih % mh != 0 || iw % mw != 0 {
        return Err(Error::InvalidConfig(format!(
            "image size {ih}x{iw} is not an integer multiple of mask size {mh}x{mw}"
        )));
    }
    let (sy, sx) = (ih / mh, iw / mw);
    Ok(Array2::from_shape_fn((ih, iw), |(i, j)| {
        mask.values[[i / sy, j / sx]]
    }))
}

/// Parameters for one mask extraction pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskExtractParams {
    pub tau: f64,
    pub smooth_sigma: f64,
    pub clean_kernel: usize,
    pub clean_min_component: usize,
}

/// The full chain: normalize → smooth → threshold → clean.
pub fn extract_mask(
    s: &ScalarGrid,
    params: &MaskExtractParams,
    provenance: Provenance,
) -> Result<(DeltaMap, BinaryMask)> {
    let normalized = normalize(s, provenance)?;
    let smoothed = smooth(&normalized, params.smooth_sigma)?;
    let raw = threshold(&smoothed, params.tau)?;
    let cleaned = clean(&raw, params.clean_min_component, params.clean_kernel)?;
    Ok((smoothed, cleaned))
}
