//! Fixed linear image/latent codecs for the toy backends.
//!
//! The default mirrors the 8× latent downscale of a real latent-diffusion
//! stack at desk scale: a 2× average pool followed by a fixed orthonormal
//! 3→4 channel lift. Round-trip distortion is exactly the pooling loss — the
//! channel lift is an isometry, so `decode(encode(x))` is the blockwise mean

//! of `x`. The identity variant is lossless and exists for tests.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};

#[derive(Debug, Clone)]
enum CodecKind {
    /// Latent == image, unchanged.
    Identity { shape: (usize, usize, usize) },
    /// `pool`× average pooling plus an orthonormal channel lift.
    PoolProject {
        image_shape: (usize, usize, usize),
        latent_channels: usize,
        pool: usize,
        /// latent_channels × image_channels, orthonormal columns.
        lift: Array2<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct LinearCodec {
    kind: CodecKind,
}

impl LinearCodec {
    pub fn identity(shape: (usize, usize, usize)) -> Self {
        Self {
            kind: CodecKind::Identity { shape },
        }
    }

    /// The default toy codec: 64×64×3 image, 2× pool, 32×32×4 latent.
    pub fn default_toy() -> Self {
        Self::pool_project((64, 64, 3), 4, 2)
    }

    pub fn pool_project(
        image_shape: (usize, usize, usize),
        latent_channels: usize,
        pool: usize,
    ) -> Self {
        let lift = orthonormal_lift(latent_channels, image_shape.2);
        Self {
            kind: CodecKind::PoolProject {
                image_shape,
                latent_channels,
                pool,
                lift,
            },
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match &self.kind {
            CodecKind::Identity { shape } => *shape,
            CodecKind::PoolProject { image_shape, .. } => *image_shape,
        }
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        match &self.kind {
            CodecKind::Identity { shape } => *shape,
            CodecKind::PoolProject {
                image_shape,
                latent_channels,
                pool,
                ..
            } => (
                image_shape.0 / pool,
                image_shape.1 / pool,
                *latent_channels,
            ),
        }
    }

    pub fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        let (h, w, c) = image.shape();
        let (eh, ew, ec) = self.image_shape();
        if (h, w, c) != (eh, ew, ec) {
            return Err(Error::shape(&[eh, ew, ec], &[h, w, c]));
        }
        match &self.kind {
            CodecKind::Identity { .. } => Ok(LatentGrid::new(image.data().clone())),
            CodecKind::PoolProject { pool, lift, .. } => {
                let (lh, lw, lc) = self.latent_shape();
                let data = image.data();
                let p = *pool;
                let area = (p * p) as f64;
                Ok(LatentGrid::from_fn((lh, lw, lc), |i, j, k| {
                    let mut out = 0.0;
                    for ic in 0..c {
                        let mut mean = 0.0;
                        for di in 0..p {
                            for dj in 0..p {
                                mean += data[[i * p + di, j * p + dj, ic]];
                            }
                        }
                        out += lift[[k, ic]] * (mean / area);
                    }
                    out
                }))
            }
        }
    }

    pub fn decode(&self, z0: &LatentGrid) -> Result<ImageGrid> {
        let (h, w, c) = z0.shape();
        let (eh, ew, ec) = self.latent_shape();
        if (h, w, c) != (eh, ew, ec) {
            return Err(Error::shape(&[eh, ew, ec], &[h, w, c]));
        }
        match &self.kind {
            CodecKind::Identity { .. } => Ok(ImageGrid::new(z0.data().clone())),
            CodecKind::PoolProject { pool, lift, .. } => {
                let (ih, iw, ic) = self.image_shape();
                let data = z0.data();
                let p = *pool;
                // Orthonormal columns make the transpose the exact pseudo-inverse.
                Ok(ImageGrid::from_fn((ih, iw, ic), |i, j, k| {
                    let mut v = 0.0;
                    for lc in 0..c {
                        v += lift[[lc, k]] * data[[i / p, j / p, lc]];
                    }
                    v.clamp(0.0, 1.0)
                }))
            }
        }
    }
}

/// A fixed `rows × cols` matrix with orthonormal columns (rows ≥ cols),
/// produced by Gram-Schmidt on a deterministic full-rank seed matrix.
fn orthonormal_lift(rows: usize, cols: usize) -> Array2<f64> {
    assert!(rows >= cols, "channel lift must not lose channels");
    let mut m = Array2::from_shape_fn((rows, cols), |(i, j)| {
        if i == j {
            1.0
        } else if i == rows - 1 {
            0.5
        } else {
            0.0
        }
    });
    for j in 0..cols {
        for prev in 0..j {
            let dot: f64 = (0..rows).map(|i| m[[i, j]] * m[[i, prev]]).sum();
            for i in 0..rows {
                m[[i, j]] -= dot * m[[i, prev]];
            }
        }
        let norm: f64 = (0..rows).map(|i| m[[i, j]] * m[[i, j]]).sum::<f64>().sqrt();
        for i in 0..rows {
            m[[i, j]] /= norm;
        }
    }
    m
}
