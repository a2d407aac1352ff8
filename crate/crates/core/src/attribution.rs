//! The delta-denoising engine.
//!
//! Two branches denoise the same warm-started latent under the normal and
//! anomaly prompts, synchronized step for step. The per-position channel norm
//! of their difference is accumulated along the trajectory; at the stage
//! boundary the accumulator is turned into the mid mask and reset, and the
//! late stage adds attention biasing with that mask plus mask-guided latent
//! inpainting against the forward-noised reference.

use ndarray::Array2;

use crate::attnbias::AttentionBias;
use crate::backend::{DenoiseStep, DenoiserBackend};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, ScalarGrid};
use crate::maskops::{self, BinaryMask, MaskExtractParams, Provenance};
use crate::promptopt::PromptEmbedding;
use crate::schedule::{cfg_combine, GuidanceConfig, Schedule, StepTarget};

/// Which half of the executed window a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Early,
    Late,
}

/// One executed step with its stage label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedStep {
    pub timestep: usize,
    pub stage: Stage,
}

/// The executed step list with the stage boundary. The mid mask is extracted
/// after `mid_index` steps have run; `mid_index` is strictly inside the
/// window so both stages are non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    steps: Vec<PlannedStep>,
    mid_index: usize,
}

impl StagePlan {
    pub fn new(executed_timesteps: &[usize], mid_index: usize) -> Result<Self> {
        if executed_timesteps.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a stage plan needs at least 2 executed steps, got {}",
                executed_timesteps.len()
            )));
        }
        if mid_index == 0 || mid_index >= executed_timesteps.len() {
            return Err(Error::InvalidConfig(format!(
                "mid_index {} must be strictly inside the executed window of {} steps",
                mid_index,
                executed_timesteps.len()
            )));
        }
        for w in executed_timesteps.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::InvalidConfig(
                    "executed timesteps must be strictly decreasing".into(),
                ));
            }
        }
        let steps = executed_timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| PlannedStep {
                timestep: t,
                stage: if i < mid_index { Stage::Early } else { Stage::Late },
            })
            .collect();
        Ok(Self { steps, mid_index })
    }

    pub fn t_start(&self) -> usize {
        self.steps[0].timestep
    }

    pub fn steps(&self) -> &[PlannedStep] {
        &self.steps
    }

    pub fn mid_index(&self) -> usize {
        self.mid_index
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Running sum of per-step discrepancies. Entrywise nonnegative and
/// non-decreasing between resets.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaAccumulator {
    s: ScalarGrid,
    steps_absorbed: usize,
}

impl DeltaAccumulator {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            s: Array2::zeros(shape),
            steps_absorbed: 0,
        }
    }

    pub fn accumulate(&mut self, d: &ScalarGrid) -> Result<()> {
        if d.dim() != self.s.dim() {
            return Err(Error::shape(
                &[self.s.dim().0, self.s.dim().1],
                &[d.dim().0, d.dim().1],
            ));
        }
        if d.iter().any(|&v| v < 0.0) {
            return Err(Error::NegativeEntries("step delta"));
        }
        self.s += d;
        self.steps_absorbed += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.s.fill(0.0);
        self.steps_absorbed = 0;
    }

    pub fn snapshot(&self) -> ScalarGrid {
        self.s.clone()
    }

    pub fn steps_absorbed(&self) -> usize {
        self.steps_absorbed
    }
}

/// Both branch latents at one timestep. The branches always share the
/// timestep; the engine advances them together.
#[derive(Debug, Clone)]
pub struct BranchState {
    pub z_normal: LatentGrid,
    pub z_anomaly: LatentGrid,
    pub t: usize,
    pub stage: Stage,
}

/// Per-position channel L2 norm of the branch difference.
pub fn step_delta(z_n: &LatentGrid, z_a: &LatentGrid) -> Result<ScalarGrid> {
    z_n.check_same_shape(z_a)?;
    let (h, w, c) = z_n.shape();
    let dn = z_n.data();
    let da = z_a.data();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let mut sq = 0.0;
        for k in 0..c {
            let d = dn[[i, j, k]] - da[[i, j, k]];
            sq += d * d;
        }
        sq.sqrt()
    }))
}

/// Mask-guided latent blend: the edited latent inside the mask, the source
/// latent outside, selected per position and broadcast across channels.
/// Outside-mask positions are bit-exact copies of the source.
pub fn blend_inpaint(
    z_edit: &LatentGrid,
    z_src: &LatentGrid,
    mask: &BinaryMask,
) -> Result<LatentGrid> {
    z_edit.check_same_shape(z_src)?;
    let (h, w, _) = z_edit.shape();
    if mask.shape() != (h, w) {
        return Err(Error::shape(&[h, w], &[mask.shape().0, mask.shape().1]));
    }
    let mv = mask.values();
    let edit = z_edit.data();
    let src = z_src.data();
    Ok(LatentGrid::from_fn(z_edit.shape(), |i, j, k| {
        if mv[[i, j]] {
            edit[[i, j, k]]
        } else {
            src[[i, j, k]]
        }
    }))
}

/// The source latent the late stage blends against: the normal reference
/// forward-noised to `target` with the single noise draw fixed at run start.
pub fn src_latent_at(
    schedule: &Schedule,
    z0_normal: &LatentGrid,
    target: StepTarget,
    eps_shared: &LatentGrid,
) -> Result<LatentGrid> {
    schedule.q_sample_at(z0_normal, target, eps_shared)
}

/// Engine knobs for one run.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// CFG weight plus reverse-step stochasticity. Branch synchronization
    /// requires deterministic stepping, so `eta` must be 0 here.
    pub guidance: GuidanceConfig,
    /// Bias strength for the anomaly branch's conditional prediction.
    pub beta: f64,
    /// Mid-mask extraction parameters (threshold is tau_mid).
    pub mid_mask: MaskExtractParams,
    /// Ablation switch for spatially biased attention.
    pub bias_enabled: bool,
    /// Ablation switch for late-stage latent inpainting.
    pub late_inpaint_enabled: bool,
}

/// Everything a dual-branch run consumes.
pub struct DualBranchInputs<'a> {
    pub z0_normal: &'a LatentGrid,
    pub emb_normal: &'a PromptEmbedding,
    pub emb_anomaly: &'a PromptEmbedding,
    /// `None` asks the backend for its native unconditional prediction.
    pub emb_uncond: Option<&'a PromptEmbedding>,
    pub schedule: &'a Schedule,
    pub plan: &'a StagePlan,
    /// Early-stage attention prior at latent resolution.
    pub foreground_prior: &'a ScalarGrid,
    /// The shared noise draw used for the warm start and every source latent.
    pub eps_shared: &'a LatentGrid,
}

/// Per-step diagnostics recorded during a run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepTrace {
    pub index: usize,
    pub timestep: usize,
    pub stage: Stage,
    pub mean_delta: f64,
    pub accumulator_total: f64,
    /// Largest absolute deviation of the anomaly branch from the source
    /// latent over outside-mask positions; only measured on blended steps.
    pub outside_mask_src_dev: Option<f64>,
}

/// What a dual-branch run produces.
#[derive(Debug, Clone)]
pub struct DualBranchOutcome {
    pub z_final_anomaly: LatentGrid,
    pub z_final_normal: LatentGrid,
    pub s_mid: ScalarGrid,
    pub s_final: ScalarGrid,
    pub m_mid: BinaryMask,
    pub bias_applied: bool,
    pub inpaint_applied: bool,
    pub trace: Vec<StepTrace>,
}

/// Runs the two synchronized branches over the planned steps.
///
/// Per step: the anomaly branch's conditional prediction is biased with the
/// stage prior (foreground early, mid mask late), both branches are
/// CFG-combined and reverse-stepped, the late-stage anomaly latent is blended
/// toward the noised reference inside the mid mask, and the post-update
/// (post-blend where applicable) branch delta is accumulated. At the stage
/// boundary the accumulator becomes the mid mask and is reset.
///
/// An empty mid mask disables late-stage inpainting and biasing for the rest
/// of the run: there is no anomaly region to confine edits to, so the anomaly
/// branch simply keeps denoising. This keeps the identical-prompt null run
/// exactly equal to the normal branch.
pub fn run_dual_branch(
    inputs: &DualBranchInputs<'_>,
    backend: &dyn DenoiserBackend,
    cfg: &EngineConfig,
) -> Result<DualBranchOutcome> {
    cfg.guidance.validate()?;
    if cfg.guidance.eta != 0.0 {
        return Err(Error::InvalidConfig(
            "dual-branch runs require eta = 0: synchronized branches depend on deterministic stepping".into(),
        ));
    }
    let caps = backend.capabilities();
    let latent_shape = caps.latent_shape;
    if inputs.z0_normal.shape() != latent_shape {
        let (a, b, c) = latent_shape;
        let (d, e, f) = inputs.z0_normal.shape();
        return Err(Error::shape(&[a, b, c], &[d, e, f]));
    }
    inputs.z0_normal.check_same_shape(inputs.eps_shared)?;
    let spatial = inputs.z0_normal.spatial();
    if inputs.foreground_prior.dim() != spatial {
        return Err(Error::shape(
            &[spatial.0, spatial.1],
            &[inputs.foreground_prior.dim().0, inputs.foreground_prior.dim().1],
        ));
    }
    for emb in [inputs.emb_normal, inputs.emb_anomaly] {
        if emb.dim() != caps.embedding_dim {
            return Err(Error::shape(&[caps.embedding_dim], &[emb.dim()]));
        }
    }
    let planned: Vec<usize> = inputs.plan.steps().iter().map(|s| s.timestep).collect();
    if planned != inputs.schedule.executed_timesteps() {
        return Err(Error::InvalidConfig(
            "stage plan does not match the schedule's executed timesteps".into(),
        ));
    }

    let warm = inputs
        .schedule
        .q_sample(inputs.z0_normal, inputs.plan.t_start(), inputs.eps_shared)?;
    let mut state = BranchState {
        z_normal: warm.clone(),
        z_anomaly: warm,
        t: inputs.plan.t_start(),
        stage: Stage::Early,
    };
    let mut acc = DeltaAccumulator::zeros(spatial);
    let mut s_mid: Option<ScalarGrid> = None;
    let mut m_mid: Option<BinaryMask> = None;
    let mut bias_applied = false;
    let mut inpaint_applied = false;
    let mut trace = Vec::with_capacity(inputs.plan.num_steps());

    let want_bias = cfg.bias_enabled
        && caps.supports_attention_bias
        && cfg.beta > 0.0
        && !inputs.emb_anomaly.anomaly_indices().is_empty();

    for (i, step) in inputs.plan.steps().iter().enumerate() {
        // Synchronization invariant: both branches sit at the planned timestep.
        debug_assert_eq!(state.t, step.timestep);
        state.stage = step.stage;
        let target = match inputs.plan.steps().get(i + 1) {
            Some(next) => StepTarget::Timestep(next.timestep),
            None => StepTarget::Terminal,
        };
        let dstep = DenoiseStep {
            t: step.timestep,
            alpha_bar: inputs.schedule.alpha_bar(step.timestep)?,
        };

        let bias = if want_bias {
            let prior = match step.stage {
                Stage::Early => Some(inputs.foreground_prior.clone()),
                Stage::Late => m_mid
                    .as_ref()
                    .filter(|m| !m.is_empty())
                    .map(|m| m.to_scalar()),
            };
            match prior {
                Some(p) => Some(AttentionBias::new(
                    p,
                    inputs.emb_anomaly.anomaly_indices().clone(),
                    cfg.beta,
                )?),
                None => None,
            }
        } else {
            None
        };
        if bias.is_some() {
            bias_applied = true;
        }

        let eps_n_cond = backend.predict_eps(&state.z_normal, &dstep, Some(inputs.emb_normal), None)?;
        let eps_n_uncond = backend.predict_eps(&state.z_normal, &dstep, inputs.emb_uncond, None)?;
        let eps_a_cond =
            backend.predict_eps(&state.z_anomaly, &dstep, Some(inputs.emb_anomaly), bias.as_ref())?;
        let eps_a_uncond = backend.predict_eps(&state.z_anomaly, &dstep, inputs.emb_uncond, None)?;

        let eps_n = cfg_combine(&eps_n_cond, &eps_n_uncond, cfg.guidance.guidance_scale)?;
        let eps_a = cfg_combine(&eps_a_cond, &eps_a_uncond, cfg.guidance.guidance_scale)?;

        let z_n_next = inputs
            .schedule
            .reverse_step(&state.z_normal, &eps_n, state.t, target, 0.0, None)?;
        let z_a_proposed = inputs
            .schedule
            .reverse_step(&state.z_anomaly, &eps_a, state.t, target, 0.0, None)?;

        let mut outside_dev = None;
        let z_a_next = match (&m_mid, step.stage) {
            (Some(mask), Stage::Late) if cfg.late_inpaint_enabled && !mask.is_empty() => {
                let z_src =
                    src_latent_at(inputs.schedule, inputs.z0_normal, target, inputs.eps_shared)?;
                let blended = blend_inpaint(&z_a_proposed, &z_src, mask)?;
                inpaint_applied = true;
                let mut dev = 0.0f64;
                let mv = mask.values();
                let (h, w, c) = blended.shape();
                for y in 0..h {
                    for x in 0..w {
                        if mv[[y, x]] {
                            continue;
                        }
                        for k in 0..c {
                            dev = dev
                                .max((blended.data()[[y, x, k]] - z_src.data()[[y, x, k]]).abs());
                        }
                    }
                }
                outside_dev = Some(dev);
                blended
            }
            _ => z_a_proposed,
        };

        let d = step_delta(&z_n_next, &z_a_next)?;
        acc.accumulate(&d)?;

        trace.push(StepTrace {
            index: i,
            timestep: step.timestep,
            stage: step.stage,
            mean_delta: d.iter().sum::<f64>() / d.len() as f64,
            accumulator_total: acc.snapshot().iter().sum(),
            outside_mask_src_dev: outside_dev,
        });

        state.z_normal = z_n_next;
        state.z_anomaly = z_a_next;
        if let StepTarget::Timestep(t_next) = target {
            state.t = t_next;
        }

        if i + 1 == inputs.plan.mid_index() {
            let s = acc.snapshot();
            let (_, mask) = maskops::extract_mask(&s, &cfg.mid_mask, Provenance::Mid)?;
            s_mid = Some(s);
            m_mid = Some(mask);
            acc.reset();
        }
    }

    let s_mid = s_mid.expect("mid_index is strictly inside the window");
    let m_mid = m_mid.expect("mid_index is strictly inside the window");
    Ok(DualBranchOutcome {
        z_final_anomaly: state.z_anomaly,
        z_final_normal: state.z_normal,
        s_mid,
        s_final: acc.snapshot(),
        m_mid,
        bias_applied,
        inpaint_applied,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{AnalyticGaussianBackend, LinearCodec};
    use crate::schedule::ScheduleSpec;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn step_delta_zero_for_identical_branches() {
        let z = LatentGrid::from_fn((4, 4, 3), |h, w, c| (h + w + c) as f64);
        let d = step_delta(&z, &z).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_delta_three_four_five() {
        let mut a = LatentGrid::zeros((3, 3, 2));
        let b = {
            let mut g = LatentGrid::zeros((3, 3, 2));
            g.data_mut()[[1, 2, 0]] = 3.0;
            g.data_mut()[[1, 2, 1]] = 4.0;
            g
        };
        a.data_mut()[[1, 2, 0]] = 0.0;
        let d = step_delta(&a, &b).unwrap();
        for ((i, j), &v) in d.indexed_iter() {
            assert_eq!(v, if (i, j) == (1, 2) { 5.0 } else { 0.0 });
        }
    }

    #[test]
    fn step_delta_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = LatentGrid::standard_normal((5, 4, 3), &mut rng);
        let b = LatentGrid::standard_normal((5, 4, 3), &mut rng);
        let d = step_delta(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut sq = 0.0;
                for k in 0..3 {
                    let x = a.data()[[i, j, k]] - b.data()[[i, j, k]];
                    sq += x * x;
                }
                assert!((d[[i, j]] - sq.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn accumulator_initial_condition_and_additivity() {
        let mut acc = DeltaAccumulator::zeros((2, 2));
        let d = Array2::from_shape_fn((2, 2), |(i, j)| (i + j) as f64);
        acc.accumulate(&d).unwrap();
        assert_eq!(acc.snapshot(), d);
        acc.accumulate(&d).unwrap();
        assert_eq!(acc.snapshot(), &d * 2.0);
        assert_eq!(acc.steps_absorbed(), 2);
        acc.reset();
        assert!(acc.snapshot().iter().all(|&v| v == 0.0));
        assert_eq!(acc.steps_absorbed(), 0);
    }

    #[test]
    fn accumulator_rejects_negative_deltas() {
        let mut acc = DeltaAccumulator::zeros((2, 2));
        let mut d = Array2::zeros((2, 2));
        d[[0, 1]] = -1e-9;
        assert!(acc.accumulate(&d).is_err());
    }

    #[test]
    fn blend_selects_per_position() {
        let edit = LatentGrid::from_fn((2, 2, 2), |_, _, _| 1.0);
        let src = LatentGrid::from_fn((2, 2, 2), |_, _, _| -1.0);
        let all = BinaryMask::new(Array2::from_elem((2, 2), true));
        assert!(blend_inpaint(&edit, &src, &all).unwrap().bit_eq(&edit));
        let none = BinaryMask::empty((2, 2));
        assert!(blend_inpaint(&edit, &src, &none).unwrap().bit_eq(&src));

        let half = BinaryMask::new(Array2::from_shape_fn((2, 2), |(i, _)| i == 0));
        let out = blend_inpaint(&edit, &src, &half).unwrap();
        for ((i, _, _), &v) in out.data().indexed_iter() {
            assert_eq!(v, if i == 0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn src_latent_endpoints_and_monotone_magnitude() {
        let spec = ScheduleSpec::default();
        let schedule = Schedule::build(&spec, 50, 0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z0 = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let eps = LatentGrid::standard_normal((4, 4, 2), &mut rng);

        let at_terminal = src_latent_at(&schedule, &z0, StepTarget::Terminal, &eps).unwrap();
        assert!(at_terminal.bit_eq(&z0));

        // Noise magnitude grows with the noise level along the schedule.
        let mut prev = 0.0;
        for &t in schedule.executed_timesteps().iter().rev() {
            let z = src_latent_at(&schedule, &z0, StepTarget::Timestep(t), &eps).unwrap();
            let dist = z
                .zip(&z0, |a, b| (a - b) * (a - b))
                .unwrap()
                .data()
                .iter()
                .sum::<f64>()
                .sqrt();
            assert!(dist + 1e-9 >= prev, "magnitude shrank at t={t}");
            prev = dist;
        }
    }

    fn null_setup() -> (AnalyticGaussianBackend, LatentGrid, Schedule, StagePlan) {
        let codec = LinearCodec::identity((8, 8, 2));
        let mut backend = AnalyticGaussianBackend::new(codec, 16, 1, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mu = LatentGrid::standard_normal((8, 8, 2), &mut rng);
        backend.register_mean("a photo of a bottle", mu.clone()).unwrap();
        backend.register_mean("", mu.clone()).unwrap();
        let schedule = Schedule::build(&ScheduleSpec::default(), 20, 10).unwrap();
        let plan = StagePlan::new(schedule.executed_timesteps(), 5).unwrap();
        (backend, mu, schedule, plan)
    }

    #[test]
    fn identical_embeddings_null_run_is_bit_exact() {
        let (backend, mu, schedule, plan) = null_setup();
        let emb = backend.encode_text("a photo of a bottle").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let eps = LatentGrid::standard_normal((8, 8, 2), &mut rng);
        let prior = Array2::ones((8, 8));
        let cfg = EngineConfig {
            guidance: GuidanceConfig {
                guidance_scale: 7.5,
                eta: 0.0,
            },
            beta: 2.0,
            mid_mask: MaskExtractParams {
                tau: 0.6,
                smooth_sigma: 1.0,
                clean_kernel: 3,
                clean_min_component: 4,
            },
            bias_enabled: true,
            late_inpaint_enabled: true,
        };
        let out = run_dual_branch(
            &DualBranchInputs {
                z0_normal: &mu,
                emb_normal: &emb,
                emb_anomaly: &emb,
                emb_uncond: None,
                schedule: &schedule,
                plan: &plan,
                foreground_prior: &prior,
                eps_shared: &eps,
            },
            &backend,
            &cfg,
        )
        .unwrap();

        assert!(out.s_mid.iter().all(|&v| v == 0.0));
        assert!(out.s_final.iter().all(|&v| v == 0.0));
        assert!(out.m_mid.is_empty());
        assert!(out.z_final_anomaly.bit_eq(&out.z_final_normal));
        assert!(!out.inpaint_applied);
    }

    #[test]
    fn dual_runs_are_bit_deterministic() {
        let (mut backend, mu, schedule, plan) = null_setup();
        let bump = LatentGrid::from_fn((8, 8, 2), |h, w, _| {
            if (2..5).contains(&h) && (3..6).contains(&w) {
                1.5
            } else {
                0.0
            }
        });
        let mu_a = mu.lin_comb(1.0, &bump, 1.0).unwrap();
        backend
            .register_mean("a photo of a bottle with crack", mu_a)
            .unwrap();
        let emb_n = backend.encode_text("a photo of a bottle").unwrap();
        let emb_a = backend
            .encode_text("a photo of a bottle with crack")
            .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let eps = LatentGrid::standard_normal((8, 8, 2), &mut rng);
        let prior = Array2::ones((8, 8));
        let cfg = EngineConfig {
            guidance: GuidanceConfig {
                guidance_scale: 2.0,
                eta: 0.0,
            },
            beta: 0.0,
            mid_mask: MaskExtractParams {
                tau: 0.6,
                smooth_sigma: 1.0,
                clean_kernel: 3,
                clean_min_component: 4,
            },
            bias_enabled: false,
            late_inpaint_enabled: true,
        };
        let inputs = DualBranchInputs {
            z0_normal: &mu,
            emb_normal: &emb_n,
            emb_anomaly: &emb_a,
            emb_uncond: None,
            schedule: &schedule,
            plan: &plan,
            foreground_prior: &prior,
            eps_shared: &eps,
        };
        let a = run_dual_branch(&inputs, &backend, &cfg).unwrap();
        let b = run_dual_branch(&inputs, &backend, &cfg).unwrap();
        assert!(a.z_final_anomaly.bit_eq(&b.z_final_anomaly));
        assert!(a.z_final_normal.bit_eq(&b.z_final_normal));
        assert_eq!(a.s_final, b.s_final);
        assert_eq!(a.m_mid.values(), b.m_mid.values());
    }

    #[test]
    fn late_stage_preserves_source_outside_mask_exactly() {
        let (mut backend, mu, schedule, plan) = null_setup();
        let bump = LatentGrid::from_fn((8, 8, 2), |h, w, _| {
            if (2..6).contains(&h) && (2..6).contains(&w) {
                2.0
            } else {
                0.0
            }
        });
        let mu_a = mu.lin_comb(1.0, &bump, 1.0).unwrap();
        backend
            .register_mean("a photo of a bottle with crack", mu_a)
            .unwrap();
        let emb_n = backend.encode_text("a photo of a bottle").unwrap();
        let emb_a = backend
            .encode_text("a photo of a bottle with crack")
            .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let eps = LatentGrid::standard_normal((8, 8, 2), &mut rng);
        let prior = Array2::ones((8, 8));
        let cfg = EngineConfig {
            guidance: GuidanceConfig {
                guidance_scale: 3.0,
                eta: 0.0,
            },
            beta: 0.0,
            mid_mask: MaskExtractParams {
                tau: 0.6,
                smooth_sigma: 0.5,
                clean_kernel: 1,
                clean_min_component: 1,
            },
            bias_enabled: false,
            late_inpaint_enabled: true,
        };
        let out = run_dual_branch(
            &DualBranchInputs {
                z0_normal: &mu,
                emb_normal: &emb_n,
                emb_anomaly: &emb_a,
                emb_uncond: None,
                schedule: &schedule,
                plan: &plan,
                foreground_prior: &prior,
                eps_shared: &eps,
            },
            &backend,
            &cfg,
        )
        .unwrap();
        assert!(out.inpaint_applied);
        assert!(!out.m_mid.is_empty());
        let late_devs: Vec<f64> = out
            .trace
            .iter()
            .filter_map(|t| t.outside_mask_src_dev)
            .collect();
        assert!(!late_devs.is_empty());
        assert!(late_devs.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn delta_mass_concentrates_in_the_differing_rectangle() {
        let (mut backend, mu, schedule, plan) = null_setup();
        let bump = LatentGrid::from_fn((8, 8, 2), |h, w, _| {
            if (2..6).contains(&h) && (3..7).contains(&w) {
                2.0
            } else {
                0.0
            }
        });
        let mu_a = mu.lin_comb(1.0, &bump, 1.0).unwrap();
        backend
            .register_mean("a photo of a bottle with crack", mu_a)
            .unwrap();
        let emb_n = backend.encode_text("a photo of a bottle").unwrap();
        let emb_a = backend
            .encode_text("a photo of a bottle with crack")
            .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let eps = LatentGrid::standard_normal((8, 8, 2), &mut rng);
        let prior = Array2::ones((8, 8));
        let cfg = EngineConfig {
            guidance: GuidanceConfig {
                guidance_scale: 7.5,
                eta: 0.0,
            },
            beta: 0.0,
            mid_mask: MaskExtractParams {
                tau: 0.6,
                smooth_sigma: 1.0,
                clean_kernel: 3,
                clean_min_component: 4,
            },
            bias_enabled: false,
            late_inpaint_enabled: true,
        };
        let out = run_dual_branch(
            &DualBranchInputs {
                z0_normal: &mu,
                emb_normal: &emb_n,
                emb_anomaly: &emb_a,
                emb_uncond: None,
                schedule: &schedule,
                plan: &plan,
                foreground_prior: &prior,
                eps_shared: &eps,
            },
            &backend,
            &cfg,
        )
        .unwrap();

        let gt = BinaryMask::new(Array2::from_shape_fn((8, 8), |(i, j)| {
            (2..6).contains(&i) && (3..7).contains(&j)
        }));
        let ratio = crate::evalkit::region_energy_ratio(&out.s_final, &gt, 1).unwrap();
        assert!(ratio >= 0.9, "energy ratio {ratio}");
    }

    proptest! {
        #[test]
        fn accumulate_is_order_independent(seed in 0u64..300) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = Array2::from_shape_simple_fn((4, 4), || rng.gen_range(0.0..2.0));
            let b = Array2::from_shape_simple_fn((4, 4), || rng.gen_range(0.0..2.0));
            let mut acc1 = DeltaAccumulator::zeros((4, 4));
            acc1.accumulate(&a).unwrap();
            acc1.accumulate(&b).unwrap();
            let mut acc2 = DeltaAccumulator::zeros((4, 4));
            acc2.accumulate(&b).unwrap();
            acc2.accumulate(&a).unwrap();
            for (x, y) in acc1.snapshot().iter().zip(acc2.snapshot().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn accumulator_entries_never_decrease(seed in 0u64..300, n in 1usize..6) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut acc = DeltaAccumulator::zeros((3, 3));
            let mut prev = acc.snapshot();
            for _ in 0..n {
                let d = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(0.0..1.0));
                acc.accumulate(&d).unwrap();
                let cur = acc.snapshot();
                for (p, c) in prev.iter().zip(cur.iter()) {
                    prop_assert!(c >= p);
                }
                prev = cur;
            }
        }
    }
}
