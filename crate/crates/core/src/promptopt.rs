//! Token-level prompt refinement.
//!
//! Before any denoising starts, the anomaly-prompt embedding is nudged so that
//! its anomaly tokens align with a semantic anchor distilled from a richer
//! descriptor phrase, while the remaining content tokens are regularized
//! toward their own centroid. Both losses have closed-form gradients and the
//! whole procedure is a handful of full-gradient descent steps.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tokenized prompt with per-token embedding vectors.
///
/// `anomaly_indices` marks the token span present only in the anomaly prompt;
/// `special_indices` marks start/end/padding tokens that never carry content
/// and never move during refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    tokens: Vec<u32>,
    vectors: Array2<f64>,
    anomaly_indices: BTreeSet<usize>,
    special_indices: BTreeSet<usize>,
    prompt_key: String,
}

impl PromptEmbedding {
    pub fn new(
        tokens: Vec<u32>,
        vectors: Array2<f64>,
        special_indices: BTreeSet<usize>,
        prompt_key: String,
    ) -> Result<Self> {
        if vectors.nrows() != tokens.len() {
            return Err(Error::shape(&[tokens.len()], &[vectors.nrows()]));
        }
        let emb = Self {
            tokens,
            vectors,
            anomaly_indices: BTreeSet::new(),
            special_indices,
            prompt_key,
        };
        emb.check_index_sets()?;
        Ok(emb)
    }

    fn check_index_sets(&self) -> Result<()> {
        let z = self.tokens.len();
        for &i in self.anomaly_indices.iter().chain(self.special_indices.iter()) {
            if i >= z {
                return Err(Error::TokenIndexOutOfRange { index: i, len: z });
            }
        }
        if !self.anomaly_indices.is_disjoint(&self.special_indices) {
            return Err(Error::InvalidConfig(
                "anomaly and special token index sets must be disjoint".into(),
            ));
        }
        Ok(())
    }

    pub fn with_anomaly_indices(mut self, anomaly_indices: BTreeSet<usize>) -> Result<Self> {
        self.anomaly_indices = anomaly_indices;
        self.check_index_sets()?;
        Ok(self)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn anomaly_indices(&self) -> &BTreeSet<usize> {
        &self.anomaly_indices
    }

    pub fn special_indices(&self) -> &BTreeSet<usize> {
        &self.special_indices
    }

    /// Canonicalized prompt string; toy backends key class means on it.
    pub fn prompt_key(&self) -> &str {
        &self.prompt_key
    }

    /// Indices of content tokens outside the anomaly span (the L_ctx set).
    pub fn context_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|i| !self.anomaly_indices.contains(i) && !self.special_indices.contains(i))
            .collect()
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(i)
    }
}

/// Weights and budget for the refinement descent. `num_iters = 0` disables it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    /// L2 weight inside the anomaly distillation loss.
    pub lambda: f64,
    /// Weight of the context alignment loss in the joint objective.
    pub eta: f64,
    /// Gradient descent step size.
    pub refine_lr: f64,
    pub num_iters: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 1.0,
            refine_lr: 1e-2,
            num_iters: 10,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("refine_lr", self.refine_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a nonnegative real, got {v}"
                )));
            }
        }
        if self.num_iters > 0 && self.refine_lr == 0.0 {
            return Err(Error::InvalidConfig(
                "refine_lr must be positive when num_iters > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Refined embedding plus the loss evaluated at every iterate (length
/// `num_iters + 1`, starting at the unrefined prompt).
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub embedding: PromptEmbedding,
    pub loss_trace: Vec<f64>,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Distills a descriptor prompt into a single anchor vector: the mean of its
/// content-token embeddings, rescaled to the mean norm of those tokens.
pub fn distill_anchor(descriptor: &PromptEmbedding) -> Result<Array1<f64>> {
    let content: Vec<usize> = (0..descriptor.len())
        .filter(|i| !descriptor.special_indices.contains(i))
        .collect();
    if content.is_empty() {
        return Err(Error::DegenerateEmbedding(
            "descriptor contains only special tokens".into(),
        ));
    }
    let d = descriptor.dim();
    let mut mean = Array1::<f64>::zeros(d);
    let mut mean_norm = 0.0;
    for &i in &content {
        let row = descriptor.vectors.row(i);
        mean += &row;
        mean_norm += norm(&row.to_owned());
    }
    let m = content.len() as f64;
    mean /= m;
    mean_norm /= m;
    let mn = norm(&mean);
    if mn == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "descriptor tokens cancel to a zero anchor".into(),
        ));
    }
    Ok(mean * (mean_norm / mn))
}

/// Anomaly semantic distillation loss:
/// `1 − cos(e, e_detail) + lambda·‖e − e_detail‖²`.
pub fn loss_anom(e: &Array1<f64>, e_detail: &Array1<f64>, lambda: f64) -> Result<f64> {
    if e.len() != e_detail.len() {
        return Err(Error::shape(&[e_detail.len()], &[e.len()]));
    }
    let ne = norm(e);
    let nd = norm(e_detail);
    if nd == 0.0 {
        return Err(Error::DegenerateEmbedding("e_detail must be nonzero".into()));
    }
    if ne == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "cosine is undefined for a zero token vector".into(),
        ));
    }
    let diff = e - e_detail;
    Ok(1.0 - e.dot(e_detail) / (ne * nd) + lambda * diff.dot(&diff))
}

/// Gradient of [`loss_anom`] with respect to `e`.
pub fn grad_loss_anom(e: &Array1<f64>, e_detail: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if e.len() != e_detail.len() {
        return Err(Error::shape(&[e_detail.len()], &[e.len()]));
    }
    let ne = norm(e);
    let nd = norm(e_detail);
    if nd == 0.0 || ne == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "gradient is undefined for zero vectors".into(),
        ));
    }
    // d/de cos(e, a) = a/(‖e‖‖a‖) − (e·a)·e/(‖e‖³‖a‖)
    let dot = e.dot(e_detail);
    let grad_cos = e_detail / (ne * nd) - &(e * (dot / (ne.powi(3) * nd)));
    Ok(-grad_cos + (e - e_detail) * (2.0 * lambda))
}

/// Context alignment loss: mean squared distance of the supplied vectors to
/// their own centroid.
pub fn loss_ctx(vectors: &[Array1<f64>]) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::DegenerateEmbedding(
            "context loss needs at least one vector".into(),
        ));
    }
    let m = vectors.len() as f64;
    let mut centroid = Array1::<f64>::zeros(vectors[0].len());
    for v in vectors {
        centroid += v;
    }
    centroid /= m;
    let mut total = 0.0;
    for v in vectors {
        let diff = v - &centroid;
        total += diff.dot(&diff);
    }
    Ok(total / m)
}

/// Gradient of [`loss_ctx`] with respect to member `i`: since the centroid
/// deviations sum to zero, it collapses to `(2/m)·(e_i − ē)`.
pub fn grad_loss_ctx(vectors: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
    if vectors.is_empty() {
        return Err(Error::DegenerateEmbedding(
            "context loss needs at least one vector".into(),
        ));
    }
    let m = vectors.len() as f64;
    let mut centroid = Array1::<f64>::zeros(vectors[0].len());
    for v in vectors {
        centroid += v;
    }
    centroid /= m;
    Ok(vectors
        .iter()
        .map(|v| (v - &centroid) * (2.0 / m))
        .collect())
}

fn prompt_loss(
    emb: &PromptEmbedding,
    e_detail: &Array1<f64>,
    cfg: &RefinementConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in emb.anomaly_indices.iter() {
        total += loss_anom(&emb.vectors.row(i).to_owned(), e_detail, cfg.lambda)?;
    }
    if cfg.eta > 0.0 {
        let ctx: Vec<Array1<f64>> = emb
            .context_indices()
            .iter()
            .map(|&i| emb.vectors.row(i).to_owned())
            .collect();
        if !ctx.is_empty() {
            total += cfg.eta * loss_ctx(&ctx)?;
        }
    }
    Ok(total)
}

/// Runs `num_iters` full-gradient descent steps on the joint prompt loss.
///
/// Only anomaly-token rows receive the distillation gradient; content rows
/// move solely through the context loss and only when `eta > 0`; special rows
/// never move. Returns the refined embedding together with the loss evaluated
/// at every iterate.
pub fn refine(
    emb: &PromptEmbedding,
    e_detail: &Array1<f64>,
    cfg: &RefinementConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    if emb.anomaly_indices.is_empty() {
        return Err(Error::NoAnomalyTokens);
    }
    if e_detail.len() != emb.dim() {
        return Err(Error::shape(&[emb.dim()], &[e_detail.len()]));
    }

    let mut current = emb.clone();
    let mut trace = Vec::with_capacity(cfg.num_iters + 1);
    trace.push(prompt_loss(&current, e_detail, cfg)?);

    for _ in 0..cfg.num_iters {
        let mut grad = Array2::<f64>::zeros(current.vectors.raw_dim());
        for &i in current.anomaly_indices.iter() {
            let g = grad_loss_anom(&current.vectors.row(i).to_owned(), e_detail, cfg.lambda)?;
            grad.row_mut(i).assign(&g);
        }
        if cfg.eta > 0.0 {
            let ctx_idx = current.context_indices();
            if !ctx_idx.is_empty() {
                let ctx: Vec<Array1<f64>> = ctx_idx
                    .iter()
                    .map(|&i| current.vectors.row(i).to_owned())
                    .collect();
                let gs = grad_loss_ctx(&ctx)?;
                for (&i, g) in ctx_idx.iter().zip(gs.iter()) {
                    let mut row = grad.row_mut(i);
                    row += &(g * cfg.eta);
                }
            }
        }
        current.vectors.scaled_add(-cfg.refine_lr, &grad);
        trace.push(prompt_loss(&current, e_detail, cfg)?);
    }

    Ok(RefineOutcome {
        embedding: current,
        loss_trace: trace,
    })
}

/// Finds the token span of `anomaly` not covered by the longest common prefix
/// and suffix against `normal`. Both prompts must come from the same
/// tokenizer. Identical token sequences yield [`Error::NoAnomalyTokens`].
pub fn locate_anomaly_tokens(
    normal: &PromptEmbedding,
    anomaly: &PromptEmbedding,
) -> Result<BTreeSet<usize>> {
    let a = normal.tokens();
    let b = anomaly.tokens();
    let mut prefix = 0usize;
    while prefix < a.len() && prefix < b.len() && a[prefix] == b[prefix] {
        prefix += 1;
    }
    let mut suffix = 0usize;
    while suffix < a.len().saturating_sub(prefix)
        && suffix < b.len().saturating_sub(prefix)
        && a[a.len() - 1 - suffix] == b[b.len() - 1 - suffix]
    {
        suffix += 1;
    }
    let span: BTreeSet<usize> = (prefix..b.len() - suffix).collect();
    if span.is_empty() {
        return Err(Error::NoAnomalyTokens);
    }
    Ok(span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn emb_from_rows(rows: Vec<Array1<f64>>, tokens: Vec<u32>) -> PromptEmbedding {
        let d = rows[0].len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        PromptEmbedding::new(tokens, m, BTreeSet::new(), "test".into()).unwrap()
    }

    fn random_emb(rng: &mut ChaCha12Rng, z: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((z, d), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn anchor_of_single_token_preserves_vector() {
        let v: Array1<f64> = array![3.0, 4.0, 0.0];
        let e = emb_from_rows(vec![v.clone()], vec![10]);
        let anchor = distill_anchor(&e).unwrap();
        assert!((&anchor - &v).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn anchor_of_identical_tokens_is_that_vector() {
        let v: Array1<f64> = array![1.0, -2.0, 2.0];
        let e = emb_from_rows(vec![v.clone(), v.clone()], vec![10, 10]);
        let anchor = distill_anchor(&e).unwrap();
        assert!((&anchor - &v).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn anchor_of_orthogonal_units_matches_brute_force() {
        let u: Array1<f64> = array![1.0, 0.0];
        let v: Array1<f64> = array![0.0, 1.0];
        let e = emb_from_rows(vec![u.clone(), v.clone()], vec![10, 11]);
        let anchor = distill_anchor(&e).unwrap();
        // Brute-force mean then rescale to the mean token norm (1.0).
        let mean = (&u + &v) / 2.0;
        let expect = &mean / norm(&mean);
        assert!((norm(&anchor) - 1.0).abs() < 1e-12);
        assert!((&anchor - &expect).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn anchor_rejects_special_only_descriptor() {
        let m = Array2::zeros((2, 3));
        let e = PromptEmbedding::new(
            vec![1, 2],
            m,
            BTreeSet::from([0usize, 1usize]),
            "".into(),
        )
        .unwrap();
        assert!(distill_anchor(&e).is_err());
    }

    #[test]
    fn loss_anom_known_values() {
        let a: Array1<f64> = array![1.0, 0.0];
        assert!(loss_anom(&a, &a, 0.3).unwrap().abs() < 1e-12);

        let b: Array1<f64> = array![0.0, 1.0];
        assert!((loss_anom(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-12);

        let c = -&a;
        // antipodal: 1 - (-1) + 1·‖2a‖² = 2 + 4
        assert!((loss_anom(&c, &a, 1.0).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn loss_anom_rejects_zero_vectors() {
        let z: Array1<f64> = Array1::zeros(3);
        let a: Array1<f64> = array![1.0, 0.0, 0.0];
        assert!(loss_anom(&z, &a, 0.0).is_err());
        assert!(loss_anom(&a, &z, 0.0).is_err());
    }

    #[test]
    fn loss_ctx_known_values() {
        let v: Array1<f64> = array![2.0, -1.0];
        assert!(loss_ctx(&[v.clone(), v.clone(), v.clone()]).unwrap().abs() < 1e-12);

        let w = -&v;
        let expect = v.dot(&v);
        assert!((loss_ctx(&[v, w]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_ctx_matches_brute_force_double_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rows: Vec<Array1<f64>> = (0..5)
            .map(|_| Array1::from_shape_simple_fn(8, || rng.gen_range(-2.0..2.0)))
            .collect();
        let got = loss_ctx(&rows).unwrap();

        // Brute force: compute the centroid with explicit loops.
        let m = rows.len();
        let d = rows[0].len();
        let mut centroid = vec![0.0f64; d];
        for r in &rows {
            for (c, x) in centroid.iter_mut().zip(r.iter()) {
                *c += x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= m as f64;
        }
        let mut total = 0.0;
        for r in &rows {
            for (x, c) in r.iter().zip(centroid.iter()) {
                total += (x - c) * (x - c);
            }
        }
        assert!((got - total / m as f64).abs() < 1e-9);
    }

    fn finite_diff(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, h: f64) -> Array1<f64> {
        let mut g = Array1::zeros(x.len());
        for i in 0..x.len() {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += h;
            lo[i] -= h;
            g[i] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for trial in 0..20 {
            let d = 6;
            let e = Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0f64)) + 0.1;
            let a = Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0f64)) + 0.1;
            let lambda = rng.gen_range(0.0..0.5);

            let ga = grad_loss_anom(&e, &a, lambda).unwrap();
            let fa = finite_diff(|x| loss_anom(x, &a, lambda).unwrap(), &e, 1e-6);
            let denom = fa.dot(&fa).sqrt().max(1e-8);
            let diff = (&ga - &fa).dot(&(&ga - &fa)).sqrt();
            assert!(
                diff / denom < 1e-5,
                "trial {trial}: anom gradient rel err {}",
                diff / denom
            );

            let rows: Vec<Array1<f64>> = (0..4)
                .map(|_| Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0)))
                .collect();
            let gc = grad_loss_ctx(&rows).unwrap();
            for i in 0..rows.len() {
                let fc = finite_diff(
                    |x| {
                        let mut rs = rows.clone();
                        rs[i] = x.clone();
                        loss_ctx(&rs).unwrap()
                    },
                    &rows[i],
                    1e-6,
                );
                let denom = fc.dot(&fc).sqrt().max(1e-8);
                let diff = (&gc[i] - &fc).dot(&(&gc[i] - &fc)).sqrt();
                assert!(diff / denom < 1e-5, "ctx gradient rel err {}", diff / denom);
            }
        }
    }

    #[test]
    fn refine_with_zero_iters_returns_input_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let m = random_emb(&mut rng, 4, 6);
        let emb = PromptEmbedding::new(vec![1, 10, 11, 2], m, BTreeSet::from([0, 3]), "k".into())
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([2]))
            .unwrap();
        let anchor = Array1::from_shape_simple_fn(6, || rng.gen_range(-1.0..1.0f64)) + 0.2;
        let cfg = RefinementConfig {
            num_iters: 0,
            ..Default::default()
        };
        let out = refine(&emb, &anchor, &cfg).unwrap();
        assert_eq!(out.embedding, emb);
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn refine_drives_anomaly_loss_down() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let m = random_emb(&mut rng, 3, 8);
        let emb = PromptEmbedding::new(vec![1, 10, 2], m, BTreeSet::from([0, 2]), "k".into())
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([1]))
            .unwrap();
        let anchor = Array1::from_shape_simple_fn(8, || rng.gen_range(-1.0..1.0f64)) + 0.3;
        let cfg = RefinementConfig {
            lambda: 0.1,
            eta: 0.0,
            refine_lr: 0.05,
            num_iters: 3000,
        };
        let out = refine(&emb, &anchor, &cfg).unwrap();
        for w in out.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
        let final_loss = *out.loss_trace.last().unwrap();
        let g = grad_loss_anom(
            &out.embedding.vectors().row(1).to_owned(),
            &anchor,
            cfg.lambda,
        )
        .unwrap();
        assert!(final_loss < 1e-6 || g.dot(&g).sqrt() < 1e-8);
    }

    #[test]
    fn refine_cosine_nondecreasing_without_regularizers() {
        let mut failures = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let m = random_emb(&mut rng, 3, 8);
            let emb =
                PromptEmbedding::new(vec![1, 10, 2], m, BTreeSet::from([0, 2]), "k".into())
                    .unwrap()
                    .with_anomaly_indices(BTreeSet::from([1]))
                    .unwrap();
            let anchor = Array1::from_shape_simple_fn(8, || rng.gen_range(-1.0..1.0f64)) + 0.25;
            let cfg = RefinementConfig {
                lambda: 0.0,
                eta: 0.0,
                refine_lr: 1e-2,
                num_iters: 10,
            };
            let cos = |v: &Array1<f64>| v.dot(&anchor) / (norm(v) * norm(&anchor));
            let mut prev = cos(&emb.vectors().row(1).to_owned());
            let mut cur = emb;
            for _ in 0..cfg.num_iters {
                let one = RefinementConfig { num_iters: 1, ..cfg };
                cur = refine(&cur, &anchor, &one).unwrap().embedding;
                let c = cos(&cur.vectors().row(1).to_owned());
                if c < prev - 1e-12 {
                    failures += 1;
                    break;
                }
                prev = c;
            }
        }
        assert_eq!(failures, 0, "cosine decreased in {failures} of 100 trials");
    }

    #[test]
    fn refine_moves_only_the_rows_it_should() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let m = random_emb(&mut rng, 5, 6);
        let emb = PromptEmbedding::new(vec![1, 10, 11, 12, 2], m, BTreeSet::from([0, 4]), "k".into())
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([3]))
            .unwrap();
        let anchor = Array1::from_shape_simple_fn(6, || rng.gen_range(-1.0..1.0f64)) + 0.2;

        // eta = 0: only the anomaly row moves, all others bit-identical.
        let cfg = RefinementConfig {
            eta: 0.0,
            num_iters: 5,
            ..Default::default()
        };
        let out = refine(&emb, &anchor, &cfg).unwrap();
        for i in [0usize, 1, 2, 4] {
            for (a, b) in out.embedding.row(i).iter().zip(emb.row(i).iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "row {i} moved with eta = 0");
            }
        }

        // eta > 0: special rows still never move.
        let cfg = RefinementConfig {
            eta: 2.0,
            num_iters: 5,
            ..Default::default()
        };
        let out = refine(&emb, &anchor, &cfg).unwrap();
        for i in [0usize, 4] {
            for (a, b) in out.embedding.row(i).iter().zip(emb.row(i).iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "special row {i} moved");
            }
        }
    }

    #[test]
    fn refine_trace_is_consistent_with_recomputation() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let m = random_emb(&mut rng, 4, 6);
        let emb = PromptEmbedding::new(vec![1, 10, 11, 2], m, BTreeSet::from([0, 3]), "k".into())
            .unwrap()
            .with_anomaly_indices(BTreeSet::from([2]))
            .unwrap();
        let anchor = Array1::from_shape_simple_fn(6, || rng.gen_range(-1.0..1.0f64)) + 0.2;
        let cfg = RefinementConfig::default();
        let out = refine(&emb, &anchor, &cfg).unwrap();

        // Re-run the descent one step at a time and recompute the loss at
        // every stored iterate.
        let mut cur = emb;
        let one = RefinementConfig { num_iters: 1, ..cfg };
        for (i, &expected) in out.loss_trace.iter().enumerate() {
            let here = prompt_loss(&cur, &anchor, &cfg).unwrap();
            assert!(
                (here - expected).abs() < 1e-9,
                "trace[{i}] = {expected} but recomputed {here}"
            );
            if i < out.loss_trace.len() - 1 {
                cur = refine(&cur, &anchor, &one).unwrap().embedding;
            }
        }
    }

    #[test]
    fn locate_tokens_finds_trailing_insertion() {
        let mk = |tokens: Vec<u32>| {
            let m = Array2::zeros((tokens.len(), 2));
            PromptEmbedding::new(tokens, m, BTreeSet::new(), "k".into()).unwrap()
        };
        // "a photo of a bottle" vs "a photo of a bottle with crack"
        let n = mk(vec![1, 20, 21, 22, 20, 23, 2]);
        let a = mk(vec![1, 20, 21, 22, 20, 23, 24, 25, 2]);
        let span = locate_anomaly_tokens(&n, &a).unwrap();
        assert_eq!(span, BTreeSet::from([6, 7]));
    }

    #[test]
    fn locate_tokens_rejects_identical_prompts() {
        let m = Array2::zeros((3, 2));
        let n = PromptEmbedding::new(vec![1, 20, 2], m.clone(), BTreeSet::new(), "k".into()).unwrap();
        let a = PromptEmbedding::new(vec![1, 20, 2], m, BTreeSet::new(), "k".into()).unwrap();
        assert!(matches!(
            locate_anomaly_tokens(&n, &a),
            Err(Error::NoAnomalyTokens)
        ));
    }

    #[test]
    fn locate_tokens_finds_middle_insertion_against_brute_force() {
        let mk = |tokens: Vec<u32>| {
            let m = Array2::zeros((tokens.len(), 2));
            PromptEmbedding::new(tokens, m, BTreeSet::new(), "k".into()).unwrap()
        };
        // "a bottle" vs "a cracked bottle"
        let n = mk(vec![1, 20, 23, 2]);
        let a = mk(vec![1, 20, 30, 23, 2]);
        let span = locate_anomaly_tokens(&n, &a).unwrap();
        assert_eq!(span, BTreeSet::from([2]));

        // Brute force: the span must be the unique minimal contiguous window
        // whose removal makes the sequences equal.
        let nt = n.tokens();
        let at = a.tokens();
        let mut best: Option<(usize, usize)> = None;
        for start in 0..=at.len() {
            for end in start..=at.len() {
                let mut rest: Vec<u32> = at[..start].to_vec();
                rest.extend_from_slice(&at[end..]);
                if rest == nt && best.is_none_or(|(s, e)| end - start < e - s) {
                    best = Some((start, end));
                }
            }
        }
        let (s, e) = best.unwrap();
        assert_eq!(span, (s..e).collect::<BTreeSet<_>>());
    }
}
