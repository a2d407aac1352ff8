//! Artifact serialization.
//!
//! Images and masks are PNG (masks single-channel 0/255); delta maps are raw
//! 32-bit little-endian floats, row-major, with a JSON sidecar recording the
//! shape; metadata is pretty-printed JSON. All formats are bit-exact and
//! language-neutral.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ScalarGrid};

pub fn write_image_png(image: &ImageGrid, path: &Path) -> Result<()> {
    let (h, w, c) = image.shape();
    let raw = image.to_u8();
    match c {
        1 => {
            let img = GrayImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| Error::Artifact("gray image buffer size mismatch".into()))?;
            img.save(path)?;
        }
        3 => {
            let img = RgbImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| Error::Artifact("rgb image buffer size mismatch".into()))?;
            img.save(path)?;
        }
        other => {
            return Err(Error::Artifact(format!(
                "cannot write a {other}-channel image as PNG"
            )))
        }
    }
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageGrid::from_fn(
        (h as usize, w as usize, 3),
        |y, x, c| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
    ))
}

pub fn write_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Artifact("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32).0[0] >= 128,
    ))
}

/// Shape/format sidecar for a raw delta map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RawMapSidecar {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub order: String,
}

/// Writes `<path>` as raw f32 little-endian, row-major, plus `<path>.json`.
pub fn write_scalar_raw(map: &ScalarGrid, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = Vec::with_capacity(h * w * 4);
    for &v in map.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    let sidecar = RawMapSidecar {
        height: h,
        width: w,
        dtype: "f32le".into(),
        order: "row-major".into(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_scalar_raw(path: &Path) -> Result<ScalarGrid> {
    let sidecar: RawMapSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.dtype != "f32le" || sidecar.order != "row-major" {
        return Err(Error::Artifact(format!(
            "unsupported raw map format {}/{}",
            sidecar.dtype, sidecar.order
        )));
    }
    let bytes = fs::read(path)?;
    let expected = sidecar.height * sidecar.width * 4;
    if bytes.len() != expected {
        return Err(Error::Artifact(format!(
            "raw map has {} bytes, sidecar implies {expected}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(sidecar.height * sidecar.width);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Array2::from_shape_vec((sidecar.height, sidecar.width), values)
        .map_err(|e| Error::Artifact(format!("raw map shape: {e}")))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Removes a partially written run directory when a generation fails.
pub struct ArtifactGuard {
    dir: PathBuf,
    armed: bool,
}

impl ArtifactGuard {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, armed: true }
    }

    pub fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for ArtifactGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
