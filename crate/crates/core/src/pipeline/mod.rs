//! End-to-end orchestration: config parsing, seeding, prompt construction,
//! stage planning, the full generation run, batch generation, and artifact
//! inspection.

pub mod artifacts;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attnbias::{foreground_prior, FallbackForeground, ForegroundProvider};
use crate::attribution::{run_dual_branch, DualBranchInputs, EngineConfig, StagePlan};
use crate::backend::{
    AnalyticGaussianBackend, Capabilities, DenoiserBackend, LinearCodec, SyntheticAttentionBackend,
};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid, ScalarGrid};
use crate::maskops::{self, BinaryMask, MaskExtractParams, Provenance};
use crate::promptopt::{self, RefinementConfig};
use crate::schedule::{GuidanceConfig, Schedule, ScheduleSpec};

/// Environment variable naming the external foreground-provider command.
pub const FG_PROVIDER_ENV: &str = "DELTADENO_FG_PROVIDER";
/// Environment variable overriding the provider timeout in milliseconds.
pub const FG_TIMEOUT_ENV: &str = "DELTADENO_FG_TIMEOUT_MS";

/// Prompt templates and their substitutions. The anomaly prompt differs from
/// the normal one only by the anomalous attribute; the descriptor is a richer
/// phrase distilled into the anomaly token and defaults to the anomaly type
/// itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub object: String,
    pub anomaly_type: String,
    pub normal_template: String,
    pub anomaly_template: String,
    pub descriptor: Option<String>,
    /// Overrides the automatically located anomaly token span.
    pub anomaly_token_indices: Option<Vec<usize>>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            object: "bottle".into(),
            anomaly_type: "crack".into(),
            normal_template: "a photo of a {object}".into(),
            anomaly_template: "a photo of a {object} with {anomaly type}".into(),
            descriptor: None,
            anomaly_token_indices: None,
        }
    }
}

impl PromptConfig {
    fn render(&self, template: &str) -> String {
        template
            .replace("{object}", &self.object)
            .replace("{anomaly type}", &self.anomaly_type)
    }

    pub fn normal_prompt(&self) -> String {
        self.render(&self.normal_template)
    }

    pub fn anomaly_prompt(&self) -> String {
        self.render(&self.anomaly_template)
    }

    pub fn descriptor_prompt(&self) -> String {
        self.descriptor
            .clone()
            .unwrap_or_else(|| self.anomaly_type.clone())
    }
}

/// A rectangle in latent coordinates where the analytic anomaly mean differs
/// from the normal mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Added to every latent channel inside the rectangle.
    pub amplitude: f64,
}

impl RectSpec {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.top + self.height).contains(&i)
            && (self.left..self.left + self.width).contains(&j)
    }

    pub fn mask(&self, shape: (usize, usize)) -> BinaryMask {
        BinaryMask::new(Array2::from_shape_fn(shape, |(i, j)| self.contains(i, j)))
    }
}

/// Which denoiser the run uses. Toy backends derive their class structure
/// from the input image; the external kind is an adapter contract only and
/// requires the caller to inject a backend instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Analytic {
        #[serde(default = "default_sigma0")]
        sigma0: f64,
        /// Where (and how strongly) the anomaly-class mean deviates from the
        /// encoded input; absent means the classes coincide.
        #[serde(default)]
        anomaly_rect: Option<RectSpec>,
        #[serde(default = "default_backend_seed")]
        seed: u64,
    },
    SyntheticAttention {
        #[serde(default = "default_sigma0")]
        sigma0: f64,
        #[serde(default = "default_embedding_dim")]
        embedding_dim: usize,
        #[serde(default = "default_head_dim")]
        head_dim: usize,
        /// Target patch amplitude registered for the anomaly-type tokens.
        #[serde(default = "default_target_amplitude")]
        target_amplitude: f64,
        #[serde(default = "default_backend_seed")]
        seed: u64,
    },
    External {
        model_id: String,
        #[serde(default = "default_device")]
        device: String,
    },
}

fn default_sigma0() -> f64 {
    0.05
}
fn default_backend_seed() -> u64 {
    7077
}
fn default_embedding_dim() -> usize {
    64
}
fn default_head_dim() -> usize {
    16
}
fn default_target_amplitude() -> f64 {
    2.5
}
fn default_device() -> String {
    "cpu".into()
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Analytic {
            sigma0: default_sigma0(),
            anomaly_rect: Some(RectSpec {
                top: 11,
                left: 11,
                height: 10,
                width: 10,
                amplitude: 1.5,
            }),
            seed: default_backend_seed(),
        }
    }
}

/// Ablation switches; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub late_inpaint: bool,
    pub attention_bias: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            late_inpaint: true,
            attention_bias: true,
        }
    }
}

/// The full run configuration. One JSON document with exactly these fields;
/// unknown keys are a hard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaDenoConfig {
    /// Inference step count T.
    pub num_inference_steps: usize,
    /// Warm-start ratio: the executed window is round(gamma·T) steps.
    pub gamma: f64,
    pub tau_mid: f64,
    pub tau_final: f64,
    pub beta: f64,
    pub guidance_scale: f64,
    pub refine: RefinementConfig,
    pub smooth_sigma: f64,
    pub clean_kernel: usize,
    pub clean_min_component: usize,
    pub seed: u64,
    pub backend: BackendConfig,
    pub prompts: PromptConfig,
    pub output_dir: PathBuf,
    /// Generations per input image in a batch run.
    pub batch_count: usize,
    pub schedule: ScheduleSpec,
    pub ablation: AblationConfig,
}

impl Default for DeltaDenoConfig {
    fn default() -> Self {
        Self {
            num_inference_steps: 100,
            gamma: 0.3,
            tau_mid: 0.6,
            tau_final: 0.35,
            beta: 2.0,
            guidance_scale: 7.5,
            refine: RefinementConfig::default(),
            smooth_sigma: 1.0,
            clean_kernel: 3,
            clean_min_component: 4,
            seed: 0,
            backend: BackendConfig::default(),
            prompts: PromptConfig::default(),
            output_dir: PathBuf::from("out"),
            batch_count: 1,
            schedule: ScheduleSpec::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl DeltaDenoConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_inference_steps < 2 {
            return Err(Error::InvalidConfig(
                "num_inference_steps must be at least 2".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        for (name, v) in [("tau_mid", self.tau_mid), ("tau_final", self.tau_final)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance_scale must be nonnegative, got {}",
                self.guidance_scale
            )));
        }
        if self.smooth_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "smooth_sigma must be nonnegative, got {}",
                self.smooth_sigma
            )));
        }
        if self.clean_kernel == 0 || self.clean_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "clean_kernel must be odd and positive, got {}",
                self.clean_kernel
            )));
        }
        if self.batch_count == 0 {
            return Err(Error::InvalidConfig("batch_count must be at least 1".into()));
        }
        if self.schedule.num_train_steps < self.num_inference_steps {
            return Err(Error::InvalidConfig(format!(
                "schedule.num_train_steps {} is smaller than num_inference_steps {}",
                self.schedule.num_train_steps, self.num_inference_steps
            )));
        }
        self.refine.validate()?;
        if self.prompts.normal_prompt().trim().is_empty()
            || self.prompts.anomaly_prompt().trim().is_empty()
        {
            return Err(Error::InvalidConfig("prompts must be non-empty".into()));
        }
        Ok(())
    }

    fn mid_mask_params(&self) -> MaskExtractParams {
        MaskExtractParams {
            tau: self.tau_mid,
            smooth_sigma: self.smooth_sigma,
            clean_kernel: self.clean_kernel,
            clean_min_component: self.clean_min_component,
        }
    }

    fn final_mask_params(&self) -> MaskExtractParams {
        MaskExtractParams {
            tau: self.tau_final,
            ..self.mid_mask_params()
        }
    }
}

/// Derives the executed window and the stage boundary from the config:
/// `k = round(gamma·T)` executed steps, mid mask after `k/2` of them.
pub fn plan_stages(cfg: &DeltaDenoConfig) -> Result<(Schedule, StagePlan)> {
    cfg.validate()?;
    let t = cfg.num_inference_steps;
    let k = (cfg.gamma * t as f64).round() as usize;
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "gamma {} with T = {t} leaves {k} executed steps; at least 2 are needed to split stages",
            cfg.gamma
        )));
    }
    let k = k.min(t);
    let schedule = Schedule::build(&cfg.schedule, t, t - k)?;
    let plan = StagePlan::new(schedule.executed_timesteps(), k / 2)?;
    Ok((schedule, plan))
}

/// Boolean run facts recorded in metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFlags {
    pub foreground_fallback: bool,
    pub attention_bias_active: bool,
    pub late_inpaint_active: bool,
    pub refinement_applied: bool,
    pub no_anomaly_tokens: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlanMeta {
    pub t_start: usize,
    pub executed_timesteps: Vec<usize>,
    pub mid_index: usize,
    pub timestep_spacing: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub name: String,
    pub capabilities: Capabilities,
    /// Round-trip PSNR of the codec on this input; absent when lossless.
    pub codec_roundtrip_psnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub mid_pixels: usize,
    pub final_pixels_latent: usize,
    pub final_pixels_image: usize,
}

/// Relative file names of everything a run persists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub anomaly_image: String,
    pub final_mask: String,
    pub mid_mask: String,
    pub s_mid: String,
    pub s_final: String,
    pub metadata: String,
    pub trace: String,
}

impl ArtifactIndex {
    fn standard() -> Self {
        Self {
            anomaly_image: "anomaly.png".into(),
            final_mask: "mask.png".into(),
            mid_mask: "mask_mid.png".into(),
            s_mid: "s_mid.raw".into(),
            s_final: "s_final.raw".into(),
            metadata: "metadata.json".into(),
            trace: "trace.json".into(),
        }
    }

    pub fn files(&self) -> Vec<&str> {
        vec![
            &self.anomaly_image,
            &self.final_mask,
            &self.mid_mask,
            &self.s_mid,
            &self.s_final,
            &self.metadata,
            &self.trace,
        ]
    }
}

/// Everything needed to reproduce and audit a run. Wall-clock timings are
/// deliberately not persisted; [`GenerationResult::timing_ms`] carries them
/// in memory for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: DeltaDenoConfig,
    pub seed: u64,
    pub normal_prompt: String,
    pub anomaly_prompt: String,
    pub descriptor_prompt: String,
    pub anomaly_token_indices: Vec<usize>,
    pub stage_plan: StagePlanMeta,
    pub flags: RunFlags,
    pub backend: BackendMeta,
    pub refine_loss_trace: Option<Vec<f64>>,
    pub mask_stats: MaskStats,
    pub artifacts: ArtifactIndex,
}

/// The in-memory product of one generation run.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub anomaly_image: ImageGrid,
    /// Final mask at image resolution.
    pub final_mask_image: Array2<bool>,
    pub final_mask_latent: BinaryMask,
    pub m_mid: BinaryMask,
    pub s_mid_map: ScalarGrid,
    pub s_final_map: ScalarGrid,
    pub metadata: RunMetadata,
    pub artifact_dir: Option<PathBuf>,
    pub timing_ms: f64,
    // Latents kept for evaluation harnesses; not serialized.
    pub z0_normal: LatentGrid,
    pub z_final_anomaly: LatentGrid,
    pub z_final_normal: LatentGrid,
}

/// Builds the toy backend described by the config around the input image.
/// The analytic backend registers the encoded input as the normal-class and
/// unconditional mean, with the anomaly-class mean offset inside the
/// configured rectangle.
pub fn build_backend(
    cfg: &DeltaDenoConfig,
    image: &ImageGrid,
) -> Result<Arc<dyn DenoiserBackend>> {
    let prompts = &cfg.prompts;
    match &cfg.backend {
        BackendConfig::Analytic {
            sigma0,
            anomaly_rect,
            seed,
        } => {
            let codec = codec_for_image(image)?;
            let mut backend =
                AnalyticGaussianBackend::new(codec, default_embedding_dim(), *seed, *sigma0);
            let mu_normal = backend.encode(image)?;
            let mu_anomaly = match anomaly_rect {
                Some(rect) => {
                    let bump = LatentGrid::from_fn(mu_normal.shape(), |i, j, _| {
                        if rect.contains(i, j) {
                            rect.amplitude
                        } else {
                            0.0
                        }
                    });
                    mu_normal.lin_comb(1.0, &bump, 1.0)?
                }
                None => mu_normal.clone(),
            };
            backend.register_mean(&prompts.normal_prompt(), mu_normal.clone())?;
            backend.register_mean(&prompts.anomaly_prompt(), mu_anomaly)?;
            backend.register_mean("", mu_normal)?;
            Ok(Arc::new(backend))
        }
        BackendConfig::SyntheticAttention {
            sigma0,
            embedding_dim,
            head_dim,
            target_amplitude,
            seed,
        } => {
            let codec = codec_for_image(image)?;
            let (_, _, lc) = codec.latent_shape();
            let mut backend =
                SyntheticAttentionBackend::new(codec, *embedding_dim, *head_dim, *seed, *sigma0)?;
            let target: Vec<f64> = (0..lc)
                .map(|c| if c % 2 == 0 { *target_amplitude } else { -target_amplitude })
                .collect();
            for word in prompts.anomaly_type.split_whitespace() {
                backend.register_target(word, target.clone())?;
            }
            backend.set_content(backend.encode(image)?)?;
            Ok(Arc::new(backend))
        }
        BackendConfig::External { model_id, .. } => Err(Error::BackendUnavailable(format!(
            "external backend {model_id:?} requires an injected adapter; use generate_with_backend"
        ))),
    }
}

fn codec_for_image(image: &ImageGrid) -> Result<LinearCodec> {
    let (h, w, c) = image.shape();
    if c != 3 || h % 2 != 0 || w % 2 != 0 || h == 0 {
        return Err(Error::InvalidConfig(format!(
            "toy backends expect an RGB image with even dimensions, got {h}x{w}x{c}"
        )));
    }
    Ok(LinearCodec::pool_project((h, w, 3), 4, 2))
}

/// Foreground provider selected by environment: `DELTADENO_FG_PROVIDER` names
/// an external command, otherwise the whole-surface fallback is used.
pub fn provider_from_env() -> Box<dyn ForegroundProvider> {
    match std::env::var(FG_PROVIDER_ENV) {
        Ok(cmd) if !cmd.trim().is_empty() => {
            let timeout_ms = std::env::var(FG_TIMEOUT_ENV)
                .ok()
                .and_then(|v| v.parse::<u64>().ok())
                .unwrap_or(10_000);
            Box::new(crate::attnbias::CommandForeground::new(
                cmd,
                std::time::Duration::from_millis(timeout_ms),
            ))
        }
        _ => Box::new(FallbackForeground),
    }
}

/// Runs the full generation on the configured toy backend and persists all
/// artifacts under the config's output directory.
pub fn generate(cfg: &DeltaDenoConfig, image: &ImageGrid) -> Result<GenerationResult> {
    let backend = build_backend(cfg, image)?;
    let provider = provider_from_env();
    generate_with_backend(cfg, image, backend.as_ref(), provider.as_ref(), true)
}

/// The full generation run against an arbitrary backend and foreground
/// provider. Set `persist` to write the artifact directory; the result is
/// identical either way.
pub fn generate_with_backend(
    cfg: &DeltaDenoConfig,
    image: &ImageGrid,
    backend: &dyn DenoiserBackend,
    provider: &dyn ForegroundProvider,
    persist: bool,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let started = Instant::now();
    let caps = backend.capabilities();
    if image.shape() != caps.image_shape {
        let (a, b, c) = caps.image_shape;
        let (d, e, f) = image.shape();
        return Err(Error::shape(&[a, b, c], &[d, e, f]));
    }

    let normal_prompt = cfg.prompts.normal_prompt();
    let anomaly_prompt = cfg.prompts.anomaly_prompt();
    let descriptor_prompt = cfg.prompts.descriptor_prompt();

    // Coarse foreground prior, at latent resolution.
    let (lh, lw, _) = caps.latent_shape;
    let (m_fg, foreground_fallback) = foreground_prior(image, provider, (lh, lw));

    // Encode and warm-start ingredients.
    let z0 = backend.encode(image)?;
    let reconstruction = backend.decode(&z0)?;
    let psnr = image.psnr(&reconstruction)?;

    // Prompt embeddings and the anomaly token span.
    let emb_normal = backend.encode_text(&normal_prompt)?;
    let mut emb_anomaly = backend.encode_text(&anomaly_prompt)?;
    let (anomaly_indices, no_anomaly_tokens) = match &cfg.prompts.anomaly_token_indices {
        Some(indices) => (indices.iter().copied().collect::<BTreeSet<_>>(), false),
        None => match promptopt::locate_anomaly_tokens(&emb_normal, &emb_anomaly) {
            Ok(span) => (span, false),
            Err(Error::NoAnomalyTokens) => (BTreeSet::new(), true),
            Err(e) => return Err(e),
        },
    };
    emb_anomaly = emb_anomaly.with_anomaly_indices(anomaly_indices.clone())?;

    // Token-level prompt refinement, before any denoising.
    let mut refine_loss_trace = None;
    let mut refinement_applied = false;
    if !anomaly_indices.is_empty() && cfg.refine.num_iters > 0 {
        let descriptor = backend.encode_text(&descriptor_prompt)?;
        let anchor = promptopt::distill_anchor(&descriptor)?;
        let outcome = promptopt::refine(&emb_anomaly, &anchor, &cfg.refine)?;
        emb_anomaly = outcome.embedding;
        refine_loss_trace = Some(outcome.loss_trace);
        refinement_applied = true;
    }

    // Stage plan and the shared noise draw.
    let (schedule, plan) = plan_stages(cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let eps_shared = LatentGrid::standard_normal(caps.latent_shape, &mut rng);

    let engine_cfg = EngineConfig {
        guidance: GuidanceConfig {
            guidance_scale: cfg.guidance_scale,
            eta: 0.0,
        },
        beta: cfg.beta,
        mid_mask: cfg.mid_mask_params(),
        bias_enabled: cfg.ablation.attention_bias,
        late_inpaint_enabled: cfg.ablation.late_inpaint,
    };
    let outcome = run_dual_branch(
        &DualBranchInputs {
            z0_normal: &z0,
            emb_normal: &emb_normal,
            emb_anomaly: &emb_anomaly,
            emb_uncond: None,
            schedule: &schedule,
            plan: &plan,
            foreground_prior: &m_fg,
            eps_shared: &eps_shared,
        },
        backend,
        &engine_cfg,
    )?;

    // Final mask: re-threshold the late-stage accumulator, then upsample.
    let (_, final_mask_latent) =
        maskops::extract_mask(&outcome.s_final, &cfg.final_mask_params(), Provenance::Final)?;
    let (ih, iw, _) = caps.image_shape;
    let final_mask_image = maskops::to_image_mask(&final_mask_latent, (ih, iw))?;
    let anomaly_image = backend.decode(&outcome.z_final_anomaly)?;

    let metadata = RunMetadata {
        config: cfg.clone(),
        seed: cfg.seed,
        normal_prompt,
        anomaly_prompt,
        descriptor_prompt,
        anomaly_token_indices: anomaly_indices.iter().copied().collect(),
        stage_plan: StagePlanMeta {
            t_start: plan.t_start(),
            executed_timesteps: schedule.executed_timesteps().to_vec(),
            mid_index: plan.mid_index(),
            timestep_spacing: "leading".into(),
        },
        flags: RunFlags {
            foreground_fallback,
            attention_bias_active: outcome.bias_applied,
            late_inpaint_active: outcome.inpaint_applied,
            refinement_applied,
            no_anomaly_tokens,
        },
        backend: BackendMeta {
            name: backend.name().to_string(),
            capabilities: caps,
            codec_roundtrip_psnr_db: psnr.is_finite().then_some(psnr),
        },
        refine_loss_trace,
        mask_stats: MaskStats {
            mid_pixels: outcome.m_mid.pixel_count(),
            final_pixels_latent: final_mask_latent.pixel_count(),
            final_pixels_image: final_mask_image.iter().filter(|&&v| v).count(),
        },
        artifacts: ArtifactIndex::standard(),
    };

    let mut result = GenerationResult {
        anomaly_image,
        final_mask_image,
        final_mask_latent,
        m_mid: outcome.m_mid,
        s_mid_map: outcome.s_mid,
        s_final_map: outcome.s_final,
        metadata,
        artifact_dir: None,
        timing_ms: 0.0,
        z0_normal: z0,
        z_final_anomaly: outcome.z_final_anomaly,
        z_final_normal: outcome.z_final_normal,
    };

    if persist {
        let dir = run_dir(cfg, None);
        persist_result(&mut result, &dir, &outcome.trace)?;
    }
    result.timing_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(result)
}

fn run_dir(cfg: &DeltaDenoConfig, item: Option<&str>) -> PathBuf {
    match item {
        Some(name) => cfg.output_dir.join(name),
        None => cfg.output_dir.join(format!("run-seed{}", cfg.seed)),
    }
}

fn persist_result(
    result: &mut GenerationResult,
    dir: &Path,
    trace: &[crate::attribution::StepTrace],
) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    let mut guard = artifacts::ArtifactGuard::new(dir.to_path_buf());

    let idx = &result.metadata.artifacts;
    artifacts::write_image_png(&result.anomaly_image, &dir.join(&idx.anomaly_image))?;
    artifacts::write_mask_png(&result.final_mask_image, &dir.join(&idx.final_mask))?;
    artifacts::write_mask_png(
        &result.m_mid.values().mapv(|v| v),
        &dir.join(&idx.mid_mask),
    )?;
    artifacts::write_scalar_raw(&result.s_mid_map, &dir.join(&idx.s_mid))?;
    artifacts::write_scalar_raw(&result.s_final_map, &dir.join(&idx.s_final))?;
    std::fs::write(
        dir.join(&idx.metadata),
        serde_json::to_string_pretty(&result.metadata)?,
    )?;
    std::fs::write(dir.join(&idx.trace), serde_json::to_string_pretty(trace)?)?;

    guard.disarm();
    result.artifact_dir = Some(dir.to_path_buf());
    Ok(())
}

/// One row of a batch manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub image_name: String,
    pub repeat: usize,
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchManifest {
    pub rows: Vec<ManifestRow>,
}

/// Runs the batch: `batch_count` generations per input image. Per-item seeds
/// are `seed + rank`, where rank is the item's position in the name-sorted
/// item list, so reordering the input list cannot change any individual
/// artifact. Item failures are recorded in the manifest and the batch
/// continues. `workers` caps the number of concurrent items.
pub fn generate_batch(
    cfg: &DeltaDenoConfig,
    images: &[(String, ImageGrid)],
    workers: usize,
) -> Result<BatchManifest> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidConfig("batch needs at least one image".into()));
    }

    struct Item {
        input_pos: usize,
        image_idx: usize,
        repeat: usize,
        name: String,
        dir_name: String,
        seed: u64,
    }

    // Canonical ranks come from the sorted (name, repeat) keys.
    let mut items: Vec<Item> = Vec::new();
    for (image_idx, (name, _)) in images.iter().enumerate() {
        for repeat in 0..cfg.batch_count {
            items.push(Item {
                input_pos: items.len(),
                image_idx,
                repeat,
                name: name.clone(),
                dir_name: format!("{}-r{repeat}", sanitize(name)),
                seed: 0,
            });
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        (&items[a].name, items[a].repeat, items[a].input_pos)
            .cmp(&(&items[b].name, items[b].repeat, items[b].input_pos))
    });
    for (rank, &i) in order.iter().enumerate() {
        items[i].seed = cfg.seed.wrapping_add(rank as u64);
    }

    std::fs::create_dir_all(&cfg.output_dir)?;
    let rows: Mutex<Vec<Option<ManifestRow>>> = Mutex::new(vec![None; items.len()]);
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, items.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let item = &items[i];
                let mut item_cfg = cfg.clone();
                item_cfg.seed = item.seed;
                let image = &images[item.image_idx].1;
                let row = match run_batch_item(&item_cfg, image, &item.dir_name) {
                    Ok(result) => {
                        let dir = result
                            .artifact_dir
                            .as_ref()
                            .expect("batch items persist artifacts");
                        ManifestRow {
                            index: item.input_pos,
                            image_name: item.name.clone(),
                            repeat: item.repeat,
                            seed: item.seed,
                            status: "ok".into(),
                            error: None,
                            artifact_dir: Some(rel_display(dir, &cfg.output_dir)),
                            anomaly_image: Some(
                                rel_display(&dir.join("anomaly.png"), &cfg.output_dir),
                            ),
                            final_mask: Some(rel_display(&dir.join("mask.png"), &cfg.output_dir)),
                            metadata: Some(
                                rel_display(&dir.join("metadata.json"), &cfg.output_dir),
                            ),
                        }
                    }
                    Err(e) => ManifestRow {
                        index: item.input_pos,
                        image_name: item.name.clone(),
                        repeat: item.repeat,
                        seed: item.seed,
                        status: "error".into(),
                        error: Some(e.to_string()),
                        artifact_dir: None,
                        anomaly_image: None,
                        final_mask: None,
                        metadata: None,
                    },
                };
                rows.lock().expect("manifest lock")[i] = Some(row);
            });
        }
    });

    let rows: Vec<ManifestRow> = rows
        .into_inner()
        .expect("manifest lock")
        .into_iter()
        .map(|r| r.expect("every item produces a row"))
        .collect();
    let manifest = BatchManifest { rows };
    std::fs::write(
        cfg.output_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn run_batch_item(
    cfg: &DeltaDenoConfig,
    image: &ImageGrid,
    dir_name: &str,
) -> Result<GenerationResult> {
    let backend = build_backend(cfg, image)?;
    let provider = provider_from_env();
    let mut result =
        generate_with_backend(cfg, image, backend.as_ref(), provider.as_ref(), false)?;
    let dir = run_dir(cfg, Some(dir_name));
    persist_result(&mut result, &dir, &[])?;
    Ok(result)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn rel_display(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

/// What `inspect` reports about a persisted run.
#[derive(Debug, Clone, Serialize)]
pub struct InspectionReport {
    pub metadata: RunMetadata,
    pub mask_pixels: usize,
    pub mask_fraction: f64,
    pub mid_mask_pixels: usize,
    pub s_final_total: f64,
    pub s_final_max: f64,
    pub all_artifacts_present: bool,
}

/// Loads a result directory, verifies every indexed artifact exists and
/// parses, and summarizes mask statistics.
pub fn inspect(dir: &Path) -> Result<InspectionReport> {
    let metadata: RunMetadata =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    let mut all_present = true;
    for f in metadata.artifacts.files() {
        if !dir.join(f).exists() {
            all_present = false;
        }
    }
    let mask = artifacts::read_mask_png(&dir.join(&metadata.artifacts.final_mask))?;
    let mid = artifacts::read_mask_png(&dir.join(&metadata.artifacts.mid_mask))?;
    let s_final = artifacts::read_scalar_raw(&dir.join(&metadata.artifacts.s_final))?;
    let mask_pixels = mask.iter().filter(|&&v| v).count();
    Ok(InspectionReport {
        mask_fraction: mask_pixels as f64 / mask.len() as f64,
        mask_pixels,
        mid_mask_pixels: mid.iter().filter(|&&v| v).count(),
        s_final_total: s_final.iter().sum(),
        s_final_max: s_final.iter().cloned().fold(0.0, f64::max),
        all_artifacts_present: all_present,
        metadata,
    })
}
