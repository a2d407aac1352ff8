//! Diffusion noise schedule, forward noising, classifier-free guidance, and
//! the deterministic reverse-step operator.
//!
//! The schedule stores the cumulative signal-retention coefficients ᾱ_t over
//! the native training range and the strictly decreasing subsequence of
//! timesteps actually executed at inference time. With σ_t = sqrt(1 − ᾱ_t)
//! the forward process is variance preserving: the noisy latent is
//! `sqrt(ᾱ_t)·z0 + σ_t·ε`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// How the per-step betas evolve over the native training range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    /// Linear interpolation of sqrt(beta), then squared. The convention of the
    /// reference latent-diffusion release.
    ScaledLinear,
    /// Plain linear betas; handy for toy backends.
    Linear,
}

/// Parameters the noise schedule is generated from. Endpoints are exposed so
/// toy setups can deviate from the latent-diffusion defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 0.000_85,
            beta_end: 0.012,
            kind: BetaKind::ScaledLinear,
        }
    }
}

/// Classifier-free guidance weight plus the reverse-step stochasticity knob.
/// `eta = 0` keeps reverse stepping fully deterministic, which is what the
/// synchronized dual-branch run relies on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub guidance_scale: f64,
    pub eta: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            eta: 0.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance_scale must be a nonnegative real, got {}",
                self.guidance_scale
            )));
        }
        if !self.eta.is_finite() || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// The target of a reverse step: either an earlier timestep of the same
/// schedule or the fully denoised endpoint (ᾱ = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTarget {
    Timestep(usize),
    /// Final step of the trajectory; the output is the x0 prediction.
    Terminal,
}

/// Immutable noise schedule: per-timestep ᾱ_t over the native range plus the
/// executed inference subsequence. Safe to share across concurrent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    num_train_steps: usize,
    alphas_bar: Vec<f64>,
    executed_timesteps: Vec<usize>,
}

impl Schedule {
    /// Builds the evenly spaced ("leading" alignment) inference schedule over
    /// `spec`'s native range, truncated so the run begins `start_index` steps
    /// into the full descending sequence. `start_index = 0` is a full run.
    pub fn build(spec: &ScheduleSpec, num_inference_steps: usize, start_index: usize) -> Result<Self> {
        if spec.num_train_steps == 0 {
            return Err(Error::InvalidSchedule(
                "num_train_steps must be positive".into(),
            ));
        }
        if num_inference_steps == 0 {
            return Err(Error::InvalidSchedule(
                "num_inference_steps must be positive".into(),
            ));
        }
        if num_inference_steps > spec.num_train_steps {
            return Err(Error::InvalidSchedule(format!(
                "num_inference_steps {} exceeds num_train_steps {}",
                num_inference_steps, spec.num_train_steps
            )));
        }
        if start_index >= num_inference_steps {
            return Err(Error::InvalidSchedule(format!(
                "start_index {} must be smaller than num_inference_steps {}",
                start_index, num_inference_steps
            )));
        }
        if !(spec.beta_start > 0.0 && spec.beta_end < 1.0 && spec.beta_start <= spec.beta_end) {
            return Err(Error::InvalidSchedule(format!(
                "beta endpoints must satisfy 0 < beta_start <= beta_end < 1, got ({}, {})",
                spec.beta_start, spec.beta_end
            )));
        }

        let n = spec.num_train_steps;
        let betas: Vec<f64> = match spec.kind {
            BetaKind::ScaledLinear => {
                let s0 = spec.beta_start.sqrt();
                let s1 = spec.beta_end.sqrt();
                (0..n)
                    .map(|i| {
                        let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                        let s = s0 + (s1 - s0) * f;
                        s * s
                    })
                    .collect()
            }
            BetaKind::Linear => (0..n)
                .map(|i| {
                    let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                    spec.beta_start + (spec.beta_end - spec.beta_start) * f
                })
                .collect(),
        };
        let mut alphas_bar = Vec::with_capacity(n);
        let mut acc = 1.0f64;
        for beta in betas {
            acc *= 1.0 - beta;
            alphas_bar.push(acc);
        }

        let step_ratio = spec.num_train_steps / num_inference_steps;
        let full: Vec<usize> = (0..num_inference_steps)
            .map(|i| i * step_ratio)
            .rev()
            .collect();
        let executed_timesteps = full[start_index..].to_vec();

        Self::from_alphas_bar(alphas_bar, executed_timesteps)
    }

    /// Assembles a schedule from explicit ᾱ values and an executed timestep
    /// subsequence, validating the variance-preserving invariants.
    pub fn from_alphas_bar(alphas_bar: Vec<f64>, executed_timesteps: Vec<usize>) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::InvalidSchedule("alphas_bar must be non-empty".into()));
        }
        if alphas_bar[0] <= 0.99 {
            return Err(Error::InvalidSchedule(format!(
                "alphas_bar[0] must exceed 0.99, got {}",
                alphas_bar[0]
            )));
        }
        for (i, &a) in alphas_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alphas_bar[{}] = {} is outside (0, 1]",
                    i, a
                )));
            }
            if i > 0 && a >= alphas_bar[i - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "alphas_bar must be strictly decreasing, violated at index {}",
                    i
                )));
            }
        }
        if executed_timesteps.is_empty() {
            return Err(Error::InvalidSchedule(
                "executed_timesteps must be non-empty".into(),
            ));
        }
        for (i, &t) in executed_timesteps.iter().enumerate() {
            if t >= alphas_bar.len() {
                return Err(Error::InvalidSchedule(format!(
                    "executed timestep {} is outside the native range of {}",
                    t,
                    alphas_bar.len()
                )));
            }
            if i > 0 && t >= executed_timesteps[i - 1] {
                return Err(Error::InvalidSchedule(
                    "executed_timesteps must be strictly decreasing".into(),
                ));
            }
        }
        Ok(Self {
            num_train_steps: alphas_bar.len(),
            alphas_bar,
            executed_timesteps,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    pub fn executed_timesteps(&self) -> &[usize] {
        &self.executed_timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange(t))
    }

    /// σ_t = sqrt(1 − ᾱ_t).
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    fn alpha_bar_of(&self, target: StepTarget) -> Result<f64> {
        match target {
            StepTarget::Timestep(t) => self.alpha_bar(t),
            StepTarget::Terminal => Ok(1.0),
        }
    }

    /// Forward noising: `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn q_sample(&self, z0: &LatentGrid, t: usize, eps: &LatentGrid) -> Result<LatentGrid> {
        let a = self.alpha_bar(t)?;
        z0.lin_comb(a.sqrt(), eps, (1.0 - a).sqrt())
    }

    /// Forward noising to an arbitrary step target; `Terminal` returns `z0`
    /// itself up to the exact `1·z0 + 0·eps` arithmetic.
    pub fn q_sample_at(
        &self,
        z0: &LatentGrid,
        target: StepTarget,
        eps: &LatentGrid,
    ) -> Result<LatentGrid> {
        let a = self.alpha_bar_of(target)?;
        z0.lin_comb(a.sqrt(), eps, (1.0 - a).sqrt())
    }

    /// Recovers the x0 prediction implied by a noise prediction at step `t`.
    pub fn predict_x0(&self, z_t: &LatentGrid, eps_hat: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let a = self.alpha_bar(t)?;
        let sqrt_a = a.sqrt();
        z_t.lin_comb(1.0 / sqrt_a, eps_hat, -(1.0 - a).sqrt() / sqrt_a)
    }

    /// One reverse step from `t` toward `target`.
    ///
    /// With `eta = 0` this is the deterministic form: reconstruct the x0
    /// prediction, then re-noise it to the target level with the same noise
    /// prediction. With `eta > 0` the standard stochastic variance split is
    /// applied and `noise` must supply the extra draw.
    pub fn reverse_step(
        &self,
        z_t: &LatentGrid,
        eps_hat: &LatentGrid,
        t: usize,
        target: StepTarget,
        eta: f64,
        noise: Option<&LatentGrid>,
    ) -> Result<LatentGrid> {
        z_t.check_same_shape(eps_hat)?;
        if let StepTarget::Timestep(t_prev) = target {
            if t_prev >= t {
                return Err(Error::ScheduleOrder { t, t_prev });
            }
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidConfig(format!("eta must lie in [0, 1], got {eta}")));
        }

        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar_of(target)?;
        let x0_hat = self.predict_x0(z_t, eps_hat, t)?;

        if eta == 0.0 {
            return x0_hat.lin_comb(a_prev.sqrt(), eps_hat, (1.0 - a_prev).sqrt());
        }

        let noise = noise.ok_or_else(|| {
            Error::InvalidConfig("eta > 0 requires a caller-supplied noise draw".into())
        })?;
        z_t.check_same_shape(noise)?;
        let variance = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev);
        let std_dev = eta * variance.max(0.0).sqrt();
        let dir_coeff = (1.0 - a_prev - std_dev * std_dev).max(0.0).sqrt();
        x0_hat
            .lin_comb(a_prev.sqrt(), eps_hat, dir_coeff)?
            .lin_comb(1.0, noise, std_dev)
    }
}

/// Classifier-free guidance: `eps_uncond + w·(eps_cond − eps_uncond)`.
pub fn cfg_combine(eps_cond: &LatentGrid, eps_uncond: &LatentGrid, w: f64) -> Result<LatentGrid> {
    eps_cond.lin_comb(w, eps_uncond, 1.0 - w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_schedule() -> Schedule {
        Schedule::build(&ScheduleSpec::default(), 100, 0).unwrap()
    }

    #[test]
    fn full_run_has_evenly_spaced_timesteps() {
        let s = toy_schedule();
        let ts = s.executed_timesteps();
        assert_eq!(ts.len(), 100);
        assert_eq!(ts[0], 990);
        assert_eq!(*ts.last().unwrap(), 0);
        for w in ts.windows(2) {
            assert_eq!(w[0] - w[1], 10);
        }
    }

    #[test]
    fn truncated_run_keeps_exactly_k_timesteps() {
        for k in [1usize, 17, 30, 99] {
            let s = Schedule::build(&ScheduleSpec::default(), 100, 100 - k).unwrap();
            assert_eq!(s.executed_timesteps().len(), k);
            // The retained steps are the low-noise tail of the full sequence.
            assert_eq!(*s.executed_timesteps().last().unwrap(), 0);
        }
    }

    #[test]
    fn alphas_bar_monotone_and_variance_preserving() {
        let s = toy_schedule();
        let mut prev = f64::INFINITY;
        for t in 0..s.num_train_steps() {
            let a = s.alpha_bar(t).unwrap();
            assert!(a > 0.0 && a <= 1.0);
            assert!(a < prev);
            let sig = s.sigma(t).unwrap();
            assert!((sig * sig + a - 1.0).abs() < 1e-9);
            prev = a;
        }
        assert!(s.alpha_bar(0).unwrap() > 0.99);
    }

    #[test]
    fn build_rejects_bad_arguments() {
        let spec = ScheduleSpec::default();
        assert!(Schedule::build(&spec, 0, 0).is_err());
        assert!(Schedule::build(&spec, 2000, 0).is_err());
        assert!(Schedule::build(&spec, 100, 100).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        // Hand schedule with an ᾱ = 1 head and a pure-noise tail.
        let s = Schedule::from_alphas_bar(vec![1.0, 0.25, 1e-300], vec![2, 1, 0]).unwrap();
        let z0 = LatentGrid::from_fn((2, 2, 2), |h, w, c| (h + 2 * w + 4 * c) as f64);
        let eps = LatentGrid::from_fn((2, 2, 2), |_, _, _| 1.0);

        let at_one = s.q_sample(&z0, 0, &eps).unwrap();
        assert!(at_one.bit_eq(&z0));

        // ᾱ ≈ 0: output is eps to machine precision.
        let at_zero = s.q_sample(&z0, 2, &eps).unwrap();
        assert!(at_zero.max_abs_diff(&eps).unwrap() < 1e-140);

        let mid = s.q_sample(&LatentGrid::zeros((2, 2, 2)), 1, &eps).unwrap();
        for &v in mid.data().iter() {
            assert!((v - 0.75f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_combine_examples() {
        let u = LatentGrid::from_fn((2, 2, 1), |h, w, _| (1 + h + w) as f64);
        let c = u.map(|v| 2.0 * v);

        assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
        assert!(cfg_combine(&c, &u, 1.0).unwrap().bit_eq(&c));

        let g = cfg_combine(&c, &u, 7.5).unwrap();
        let expect = u.map(|v| 8.5 * v);
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn reverse_step_inverts_q_sample() {
        let s = toy_schedule();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let z0 = LatentGrid::standard_normal((4, 4, 3), &mut rng);
        let eps = LatentGrid::standard_normal((4, 4, 3), &mut rng);
        for &t in &[990usize, 500, 290, 10] {
            let z_t = s.q_sample(&z0, t, &eps).unwrap();
            let x0 = s.predict_x0(&z_t, &eps, t).unwrap();
            assert!(x0.max_abs_diff(&z0).unwrap() < 1e-6);

            let back = s
                .reverse_step(&z_t, &eps, t, StepTarget::Terminal, 0.0, None)
                .unwrap();
            assert!(back.max_abs_diff(&z0).unwrap() < 1e-6);
        }
    }

    #[test]
    fn reverse_step_rejects_order_violation() {
        let s = toy_schedule();
        let z = LatentGrid::zeros((2, 2, 1));
        let err = s.reverse_step(&z, &z, 10, StepTarget::Timestep(20), 0.0, None);
        assert!(matches!(err, Err(Error::ScheduleOrder { .. })));
    }

    #[test]
    fn stochastic_reverse_step_matches_variance_split_formula() {
        let s = toy_schedule();
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let z = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let eps_hat = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let noise = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let (t, t_prev, eta) = (500usize, 490usize, 0.7f64);

        let out = s
            .reverse_step(&z, &eps_hat, t, StepTarget::Timestep(t_prev), eta, Some(&noise))
            .unwrap();

        let a_t = s.alpha_bar(t).unwrap();
        let a_p = s.alpha_bar(t_prev).unwrap();
        let variance = (1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p);
        let std_dev = eta * variance.sqrt();
        let expect = LatentGrid::from_fn((4, 4, 2), |i, j, k| {
            let zv = z.data()[[i, j, k]];
            let ev = eps_hat.data()[[i, j, k]];
            let x0 = (zv - (1.0 - a_t).sqrt() * ev) / a_t.sqrt();
            a_p.sqrt() * x0
                + (1.0 - a_p - std_dev * std_dev).sqrt() * ev
                + std_dev * noise.data()[[i, j, k]]
        });
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);

        // eta > 0 without a noise draw is an error; eta = 0 reduces to the
        // deterministic form regardless of the supplied noise.
        assert!(s
            .reverse_step(&z, &eps_hat, t, StepTarget::Timestep(t_prev), eta, None)
            .is_err());
        let det = s
            .reverse_step(&z, &eps_hat, t, StepTarget::Timestep(t_prev), 0.0, Some(&noise))
            .unwrap();
        let det2 = s
            .reverse_step(&z, &eps_hat, t, StepTarget::Timestep(t_prev), 0.0, None)
            .unwrap();
        assert!(det.bit_eq(&det2));
    }

    #[test]
    fn reverse_step_is_deterministic_at_eta_zero() {
        let s = toy_schedule();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z = LatentGrid::standard_normal((3, 3, 2), &mut rng);
        let e = LatentGrid::standard_normal((3, 3, 2), &mut rng);
        let a = s
            .reverse_step(&z, &e, 500, StepTarget::Timestep(490), 0.0, None)
            .unwrap();
        let b = s
            .reverse_step(&z, &e, 500, StepTarget::Timestep(490), 0.0, None)
            .unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn two_step_chain_recovers_class_mean_against_hand_oracle() {
        // Two executed steps on a hand schedule, driven by the exact
        // degenerate-posterior predictions toward the class mean mu.
        let a1 = 0.36f64;
        let a0 = 0.995f64;
        let s = Schedule::from_alphas_bar(vec![a0, a1], vec![1, 0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mu = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let eps = LatentGrid::standard_normal((4, 4, 2), &mut rng);
        let z_start = s.q_sample(&mu, 1, &eps).unwrap();

        let predict = |z: &LatentGrid, a: f64| {
            // sigma0 = 0 posterior: (z - sqrt(a)·mu) / sqrt(1 - a)
            z.lin_comb(1.0 / (1.0 - a).sqrt(), &mu, -a.sqrt() / (1.0 - a).sqrt())
                .unwrap()
        };

        // Library path: step t=1 -> t=0 -> terminal.
        let e1 = predict(&z_start, a1);
        let z_mid = s
            .reverse_step(&z_start, &e1, 1, StepTarget::Timestep(0), 0.0, None)
            .unwrap();
        let e0 = predict(&z_mid, a0);
        let z_final = s
            .reverse_step(&z_mid, &e0, 0, StepTarget::Terminal, 0.0, None)
            .unwrap();

        // Hand-rolled oracle with scalar arithmetic per entry.
        let oracle = {
            let zs = z_start.data();
            let mud = mu.data();
            LatentGrid::from_fn((4, 4, 2), |h, w, c| {
                let z1 = zs[[h, w, c]];
                let m = mud[[h, w, c]];
                let e1 = (z1 - a1.sqrt() * m) / (1.0 - a1).sqrt();
                let x0 = (z1 - (1.0 - a1).sqrt() * e1) / a1.sqrt();
                let z0 = a0.sqrt() * x0 + (1.0 - a0).sqrt() * e1;
                let e0 = (z0 - a0.sqrt() * m) / (1.0 - a0).sqrt();
                (z0 - (1.0 - a0).sqrt() * e0) / a0.sqrt()
            })
        };

        assert!(z_final.max_abs_diff(&oracle).unwrap() < 1e-12);
        assert!(z_final.max_abs_diff(&mu).unwrap() < 1e-4);
    }

    proptest! {
        #[test]
        fn cfg_combine_is_linear_in_w(w1 in -4.0f64..8.0, w2 in -4.0f64..8.0, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let c = LatentGrid::standard_normal((3, 3, 2), &mut rng);
            let u = LatentGrid::standard_normal((3, 3, 2), &mut rng);
            let mid = cfg_combine(&c, &u, 0.5 * (w1 + w2)).unwrap();
            let avg = cfg_combine(&c, &u, w1)
                .unwrap()
                .lin_comb(0.5, &cfg_combine(&c, &u, w2).unwrap(), 0.5)
                .unwrap();
            prop_assert!(mid.max_abs_diff(&avg).unwrap() < 1e-9);
        }

        #[test]
        fn cfg_combine_fixed_point(w in -10.0f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = LatentGrid::standard_normal((2, 3, 2), &mut rng);
            let out = cfg_combine(&a, &a, w).unwrap();
            prop_assert!(out.max_abs_diff(&a).unwrap() < 1e-12);
        }

        #[test]
        fn q_sample_then_inversion_is_identity(seed in 0u64..500, t_idx in 0usize..100) {
            let s = toy_schedule();
            let t = s.executed_timesteps()[t_idx];
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let z0 = LatentGrid::standard_normal((3, 3, 2), &mut rng);
            let eps = LatentGrid::standard_normal((3, 3, 2), &mut rng);
            let z_t = s.q_sample(&z0, t, &eps).unwrap();
            let x0 = s.predict_x0(&z_t, &eps, t).unwrap();
            prop_assert!(x0.max_abs_diff(&z0).unwrap() < 1e-6);
        }
    }
}
