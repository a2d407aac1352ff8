//! Desk-scale verification harness.
//!
//! Toy scenarios with construction-known ground truth stand in for benchmark
//! datasets: the analytic rectangle scenario knows exactly where the class
//! means differ, and the synthetic-attention scenario knows which region the
//! spatial prior points at. Mask metrics and a hyperparameter sweep report
//! replace the non-reproducible benchmark tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::attnbias::ForegroundProvider;
use crate::backend::{
    AnalyticGaussianBackend, DenoiserBackend, LinearCodec, SyntheticAttentionBackend,
};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid, ScalarGrid};
use crate::maskops::{dilate, BinaryMask};
use crate::pipeline::{generate_with_backend, DeltaDenoConfig, GenerationResult};

/// A generation scenario with construction-known ground truth: the region
/// where the anomaly-class latent mean differs from the normal one.
pub struct ToyScenario {
    pub mu_normal: LatentGrid,
    pub mu_anomaly: LatentGrid,
    pub gt: BinaryMask,
    pub sigma0: f64,
    pub seed: u64,
    pub normal_prompt: String,
    pub anomaly_prompt: String,
    codec: LinearCodec,
}

impl ToyScenario {
    /// A seeded rectangle scenario on the default toy geometry: a smooth
    /// normal texture with the anomaly mean offset inside a random rectangle.
    pub fn rectangle(seed: u64, sigma0: f64) -> Result<Self> {
        let codec = LinearCodec::default_toy();
        let (lh, lw, lc) = codec.latent_shape();
        let (ih, iw, ic) = codec.image_shape();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5CEA_A710);

        // Smooth seeded base texture, kept away from the [0, 1] clamp.
        let fx = rng.gen_range(1.0..3.0);
        let fy = rng.gen_range(1.0..3.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let base = ImageGrid::from_fn((ih, iw, ic), |i, j, c| {
            let x = j as f64 / iw as f64;
            let y = i as f64 / ih as f64;
            0.5 + 0.22
                * ((std::f64::consts::TAU * (fx * x + fy * y) + phase + c as f64).sin()
                    * (std::f64::consts::TAU * (fy * x - fx * y)).cos())
        });
        let mu_normal = codec.encode(&base)?;

        let height = rng.gen_range(7..=12usize);
        let width = rng.gen_range(7..=12usize);
        let top = rng.gen_range(2..lh - height - 1);
        let left = rng.gen_range(2..lw - width - 1);
        let amplitude = rng.gen_range(1.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

        let bump = LatentGrid::from_fn((lh, lw, lc), |i, j, _| {
            if (top..top + height).contains(&i) && (left..left + width).contains(&j) {
                amplitude
            } else {
                0.0
            }
        });
        let mu_anomaly = mu_normal.lin_comb(1.0, &bump, 1.0)?;
        let gt = BinaryMask::new(Array2::from_shape_fn((lh, lw), |(i, j)| {
            (top..top + height).contains(&i) && (left..left + width).contains(&j)
        }));

        Ok(Self {
            mu_normal,
            mu_anomaly,
            gt,
            sigma0,
            seed,
            normal_prompt: "a photo of a bottle".into(),
            anomaly_prompt: "a photo of a bottle with crack".into(),
            codec,
        })
    }

    /// The normal image the pipeline is fed; its encoding is exactly
    /// `mu_normal` because the mean was built through the codec.
    pub fn input_image(&self) -> Result<ImageGrid> {
        self.codec.decode(&self.mu_normal)
    }

    pub fn backend(&self) -> Result<Arc<dyn DenoiserBackend>> {
        let mut backend =
            AnalyticGaussianBackend::new(self.codec.clone(), 64, self.seed, self.sigma0);
        backend.register_mean(&self.normal_prompt, self.mu_normal.clone())?;
        backend.register_mean(&self.anomaly_prompt, self.mu_anomaly.clone())?;
        backend.register_mean("", self.mu_normal.clone())?;
        Ok(Arc::new(backend))
    }

    /// Everything a sweep needs to run this scenario.
    pub fn bundle(&self) -> Result<SweepScenario> {
        Ok(SweepScenario {
            backend: self.backend()?,
            image: self.input_image()?,
            gt: self.gt.clone(),
            provider: None,
            prompts: (self.normal_prompt.clone(), self.anomaly_prompt.clone()),
        })
    }
}

/// Foreground provider that returns a fixed mask; the synthetic-attention
/// scenario uses it to point the early-stage prior at the ground truth.
struct FixedForeground {
    mask: ScalarGrid,
}

impl ForegroundProvider for FixedForeground {
    fn segment(&self, _image: &ImageGrid) -> Result<ScalarGrid> {
        Ok(self.mask.clone())
    }

    fn name(&self) -> &str {
        "fixed"
    }
}

/// A prepared scenario for sweeps: backend, input, ground truth, and an
/// optional foreground provider override.
pub struct SweepScenario {
    pub backend: Arc<dyn DenoiserBackend>,
    pub image: ImageGrid,
    pub gt: BinaryMask,
    provider: Option<Arc<dyn ForegroundProvider + Send + Sync>>,
    prompts: (String, String),
}

impl SweepScenario {
    pub fn prompts(&self) -> (&str, &str) {
        (&self.prompts.0, &self.prompts.1)
    }

    /// Applies the scenario's prompts to a config.
    pub fn configure(&self, cfg: &mut DeltaDenoConfig) {
        cfg.prompts.normal_template = self.prompts.0.clone();
        cfg.prompts.anomaly_template = self.prompts.1.clone();
    }

    pub fn run(&self, cfg: &DeltaDenoConfig) -> Result<GenerationResult> {
        let fallback = crate::attnbias::FallbackForeground;
        let provider: &dyn ForegroundProvider = match &self.provider {
            Some(p) => p.as_ref(),
            None => &fallback,
        };
        generate_with_backend(cfg, &self.image, self.backend.as_ref(), provider, false)
    }
}

/// The synthetic-attention scenario: the early-stage prior points at a fixed
/// region and the anomaly token carries a strong registered target, so the
/// generated defect should land inside that region when biasing works.
pub fn attention_scenario(seed: u64) -> Result<SweepScenario> {
    let codec = LinearCodec::default_toy();
    let (lh, lw, lc) = codec.latent_shape();
    let (ih, iw, ic) = codec.image_shape();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xA77E);

    let top = rng.gen_range(4..lh - 14);
    let left = rng.gen_range(4..lw - 14);
    let (height, width) = (10usize, 10usize);
    let gt = BinaryMask::new(Array2::from_shape_fn((lh, lw), |(i, j)| {
        (top..top + height).contains(&i) && (left..left + width).contains(&j)
    }));

    let mut backend = SyntheticAttentionBackend::new(codec.clone(), 64, 16, seed, 0.05)?;
    let target: Vec<f64> = (0..lc).map(|c| if c % 2 == 0 { 3.0 } else { -3.0 }).collect();
    backend.register_target("crack", target)?;

    let image = ImageGrid::from_fn((ih, iw, ic), |i, j, c| {
        0.45 + 0.1 * ((i as f64 / 13.0).sin() * (j as f64 / 7.0).cos()) + 0.02 * c as f64
    });
    backend.set_content(codec.encode(&image)?)?;

    // Image-resolution prior over the ground-truth region.
    let scale = ih / lh;
    let prior = ScalarGrid::from_shape_fn((ih, iw), |(i, j)| {
        if gt.values()[[i / scale, j / scale]] {
            1.0
        } else {
            0.0
        }
    });

    Ok(SweepScenario {
        backend: Arc::new(backend),
        image,
        gt,
        provider: Some(Arc::new(FixedForeground { mask: prior })),
        prompts: (
            "a photo of a bottle".into(),
            "a photo of a bottle with crack".into(),
        ),
    })
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            &[gt.shape().0, gt.shape().1],
            &[pred.shape().0, pred.shape().1],
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.values().iter().zip(gt.values().iter()) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Fraction of the accumulator's total mass inside the dilated ground-truth
/// region; 0 when the accumulator is identically zero.
pub fn region_energy_ratio(s: &ScalarGrid, gt: &BinaryMask, dilate_px: usize) -> Result<f64> {
    if s.dim() != gt.shape() {
        return Err(Error::shape(
            &[gt.shape().0, gt.shape().1],
            &[s.dim().0, s.dim().1],
        ));
    }
    if s.iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeEntries("energy map"));
    }
    let region = dilate(gt, dilate_px);
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = s
        .iter()
        .zip(region.values().iter())
        .filter(|(_, &g)| g)
        .map(|(&v, _)| v)
        .sum();
    Ok(inside / total)
}

/// Mean absolute latent change outside the (dilated) ground truth between the
/// final anomaly latent and the encoded input — the outside-mask preservation
/// measure.
pub fn outside_change(result: &GenerationResult, gt: &BinaryMask, dilate_px: usize) -> Result<f64> {
    let region = dilate(gt, dilate_px);
    let (h, w, c) = result.z0_normal.shape();
    if region.shape() != (h, w) {
        return Err(Error::shape(&[h, w], &[region.shape().0, region.shape().1]));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let za = result.z_final_anomaly.data();
    let z0 = result.z0_normal.data();
    for i in 0..h {
        for j in 0..w {
            if region.values()[[i, j]] {
                continue;
            }
            for k in 0..c {
                total += (za[[i, j, k]] - z0[[i, j, k]]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// One sweep cell: the parameter assignment plus its measured metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub params: BTreeMap<String, serde_json::Value>,
    pub status: String,
    pub iou: Option<f64>,
    pub energy_ratio: Option<f64>,
    pub outside_change: Option<f64>,
    pub final_mask_pixels: Option<usize>,
    pub mid_mask_pixels: Option<usize>,
    pub refine_trace_len: Option<usize>,
    pub runtime_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Applies one sweep parameter by name to a config.
pub fn apply_param(cfg: &mut DeltaDenoConfig, name: &str, value: &serde_json::Value) -> Result<()> {
    let bad = || Error::InvalidConfig(format!("invalid value {value} for sweep parameter {name}"));
    let as_f64 = || value.as_f64().ok_or_else(bad);
    let as_u64 = || value.as_u64().ok_or_else(bad);
    let as_bool = || value.as_bool().ok_or_else(bad);
    match name {
        "beta" => cfg.beta = as_f64()?,
        "tau_mid" => cfg.tau_mid = as_f64()?,
        "tau_final" => cfg.tau_final = as_f64()?,
        "gamma" => cfg.gamma = as_f64()?,
        "guidance_scale" => cfg.guidance_scale = as_f64()?,
        "smooth_sigma" => cfg.smooth_sigma = as_f64()?,
        "num_inference_steps" => cfg.num_inference_steps = as_u64()? as usize,
        "seed" => cfg.seed = as_u64()?,
        "refine.num_iters" => cfg.refine.num_iters = as_u64()? as usize,
        "refine.lambda" => cfg.refine.lambda = as_f64()?,
        "refine.eta" => cfg.refine.eta = as_f64()?,
        "ablation.late_inpaint" => cfg.ablation.late_inpaint = as_bool()?,
        "ablation.attention_bias" => cfg.ablation.attention_bias = as_bool()?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown sweep parameter {other:?}"
            )))
        }
    }
    Ok(())
}

/// Runs the cartesian product of the parameter grid on a fixed scenario and
/// reports IoU, energy ratio, outside-mask change, and runtime per cell.
/// Per-cell failures are recorded and the sweep continues.
pub fn sweep(
    base: &DeltaDenoConfig,
    grid: &[(String, Vec<serde_json::Value>)],
    scenario: &SweepScenario,
) -> Result<Vec<SweepCell>> {
    if grid.iter().any(|(_, vs)| vs.is_empty()) {
        return Err(Error::InvalidConfig(
            "every sweep parameter needs at least one value".into(),
        ));
    }
    let mut cells: Vec<BTreeMap<String, serde_json::Value>> = vec![BTreeMap::new()];
    for (name, values) in grid {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.insert(name.clone(), v.clone());
                next.push(c);
            }
        }
        cells = next;
    }

    let mut report = Vec::with_capacity(cells.len());
    for params in cells {
        let started = Instant::now();
        let mut cfg = base.clone();
        scenario.configure(&mut cfg);
        let outcome = params
            .iter()
            .try_for_each(|(k, v)| apply_param(&mut cfg, k, v))
            .and_then(|_| scenario.run(&cfg));
        let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
        match outcome {
            Ok(result) => report.push(SweepCell {
                params,
                status: "ok".into(),
                iou: Some(mask_iou(&result.final_mask_latent, &scenario.gt)?),
                energy_ratio: Some(region_energy_ratio(&result.s_final_map, &scenario.gt, 1)?),
                outside_change: Some(outside_change(&result, &scenario.gt, 1)?),
                final_mask_pixels: Some(result.final_mask_latent.pixel_count()),
                mid_mask_pixels: Some(result.m_mid.pixel_count()),
                refine_trace_len: result.metadata.refine_loss_trace.as_ref().map(|t| t.len()),
                runtime_ms,
                error: None,
            }),
            Err(e) => report.push(SweepCell {
                params,
                status: "error".into(),
                iou: None,
                energy_ratio: None,
                outside_change: None,
                final_mask_pixels: None,
                mid_mask_pixels: None,
                refine_trace_len: None,
                runtime_ms,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(report)
}

/// Writes a sweep report as CSV. Columns: the parameter names in sorted
/// order, then status/iou/energy_ratio/outside_change/mask_pixels/runtime_ms.
/// Everything except `runtime_ms` is deterministic given seeds.
pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<()> {
    let mut names: Vec<String> = cells
        .iter()
        .flat_map(|c| c.params.keys().cloned())
        .collect();
    names.sort();
    names.dedup();

    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Artifact(e.to_string()))?;
    let mut header: Vec<String> = names.clone();
    header.extend(
        [
            "status",
            "iou",
            "energy_ratio",
            "outside_change",
            "final_mask_pixels",
            "mid_mask_pixels",
            "runtime_ms",
        ]
        .map(String::from),
    );
    w.write_record(&header)
        .map_err(|e| Error::Artifact(e.to_string()))?;
    for cell in cells {
        let mut record: Vec<String> = names
            .iter()
            .map(|n| {
                cell.params
                    .get(n)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            })
            .collect();
        record.push(cell.status.clone());
        record.push(cell.iou.map(fmt_f64).unwrap_or_default());
        record.push(cell.energy_ratio.map(fmt_f64).unwrap_or_default());
        record.push(cell.outside_change.map(fmt_f64).unwrap_or_default());
        record.push(
            cell.final_mask_pixels
                .map(|v| v.to_string())
                .unwrap_or_default(),
        );
        record.push(
            cell.mid_mask_pixels
                .map(|v| v.to_string())
                .unwrap_or_default(),
        );
        record.push(format!("{:.3}", cell.runtime_ms));
        w.write_record(&record)
            .map_err(|e| Error::Artifact(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Renders the sweep as an aligned text table.
pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<40} {:>8} {:>8} {:>10} {:>12} {:>10}\n",
        "params", "status", "iou", "energy", "outside", "runtime_ms"
    ));
    for cell in cells {
        let params = cell
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:<40} {:>8} {:>8} {:>10} {:>12} {:>10.1}\n",
            params,
            cell.status,
            cell.iou.map(|v| format!("{v:.3}")).unwrap_or_default(),
            cell.energy_ratio
                .map(|v| format!("{v:.3}"))
                .unwrap_or_default(),
            cell.outside_change
                .map(|v| format!("{v:.5}"))
                .unwrap_or_default(),
            cell.runtime_ms
        ));
    }
    out
}

/// Renders per-cell IoU as a minimal PNG bar chart (bars left to right in
/// cell order, full height = IoU 1.0).
pub fn render_iou_chart(cells: &[SweepCell], path: &Path) -> Result<()> {
    let n = cells.len().max(1);
    let (width, height, margin) = (40 * n + 20, 220usize, 10usize);
    let mut img = ImageGrid::from_fn((height, width, 3), |_, _, _| 1.0);
    // Horizontal gridlines every 0.25.
    for g in 0..=4 {
        let y = margin + (height - 2 * margin) * g / 4;
        for x in 0..width {
            for c in 0..3 {
                img.data_mut()[[y, x, c]] = 0.85;
            }
        }
    }
    for (i, cell) in cells.iter().enumerate() {
        let iou = cell.iou.unwrap_or(0.0).clamp(0.0, 1.0);
        let bar_h = ((height - 2 * margin) as f64 * iou).round() as usize;
        let x0 = 20 + i * 40;
        for y in 0..bar_h {
            for x in x0..x0 + 24 {
                let row = height - margin - 1 - y;
                img.data_mut()[[row, x, 0]] = 0.20;
                img.data_mut()[[row, x, 1]] = 0.45;
                img.data_mut()[[row, x, 2]] = 0.80;
            }
        }
    }
    crate::pipeline::artifacts::write_image_png(&img, path)
}
