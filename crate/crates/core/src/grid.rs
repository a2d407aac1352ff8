//! Spatial grids: latent arrays, decoded images, and the scalar maps derived
//! from them. All heavy math in the crate runs on these types.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A 2-D scalar field at latent resolution (delta maps, masks-before-threshold,
/// attention priors).
pub type ScalarGrid = Array2<f64>;

/// An `H×W×C` real-valued latent array. The unit all branch and blend math
/// operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    data: Array3<f64>,
}

impl LatentGrid {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn(shape, |(h, w, c)| f(h, w, c)),
        }
    }

    /// Fills the grid with i.i.d. standard normal draws from `rng`.
    pub fn standard_normal(shape: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        Self {
            data: Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal)),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Spatial dimensions `(H, W)` without the channel axis.
    pub fn spatial(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            let (a, b, c) = self.shape();
            let (d, e, f) = other.shape();
            return Err(Error::shape(&[a, b, c], &[d, e, f]));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.mapv(&f),
        }
    }

    /// Elementwise combination of two same-shape grids.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let mut out = self.data.clone();
        out.zip_mut_with(&other.data, |a, &b| *a = f(*a, b));
        Ok(Self { data: out })
    }

    /// `a·self + b·other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.zip(other, |x, y| a * x + b * y)
    }

    /// Largest absolute entry difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            m = m.max((a - b).abs());
        }
        Ok(m)
    }

    /// True when every entry is bit-identical to `other`'s.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// An `H×W×C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    data: Array3<f64>,
}

impl ImageGrid {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn(shape, |(h, w, c)| f(h, w, c)),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    /// Quantizes to 8-bit interleaved rows (the PNG payload). Values are
    /// clamped to `[0, 1]` first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Peak signal-to-noise ratio against `other` in dB; `inf` for identical
    /// grids.
    pub fn psnr(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            let (a, b, c) = self.shape();
            let (d, e, f) = other.shape();
            return Err(Error::shape(&[a, b, c], &[d, e, f]));
        }
        let n = self.data.len() as f64;
        let mse = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(10.0 * (1.0 / mse).log10())
    }
}
