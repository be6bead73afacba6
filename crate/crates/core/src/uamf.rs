//! Margin softmax over vMF similarities with a feature-norm driven margin.
//!
//! For sample `i` with label `y_i` the logits are `sim(W_j, z_i)/τ`, with the
//! target logit lowered by `m/τ`. The margin `m = 0.35 · μ_‖z‖` follows an
//! exponential moving average of the batch feature norms, so batches of
//! confident (large-norm) features are pushed harder.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sphere_math::{vmf_normalizer, KAPPA_MIN};

/// Unnormalized features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `N × d`.
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(z: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        if labels.len() != z.nrows() {
            return Err(Error::Domain(format!(
                "{} labels for {} features",
                labels.len(),
                z.nrows()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite feature".into()));
        }
        Ok(Self { z, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// Per-row L2 norms.
    pub fn norms(&self) -> Array1<f64> {
        self.z.map_axis(Axis(1), |r| r.dot(&r).sqrt())
    }

    /// Rows scaled to unit length; zero rows stay zero.
    pub fn normalized(&self) -> Array2<f64> {
        let mut out = self.z.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        out
    }

    pub(crate) fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(y) => Err(Error::Domain(format!("label {y} outside 0..{classes}"))),
            None => Ok(()),
        }
    }
}

/// Class proxies, one row per class. Rows are unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMatrix {
    w: Array2<f64>,
}

impl ProxyMatrix {
    /// Accepts `w` if every row has norm `1 ± 1e-6`.
    pub fn new(w: Array2<f64>) -> Result<Self> {
        for (j, row) in w.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!("proxy {j} has norm {n}")));
            }
        }
        Ok(Self { w })
    }

    /// Wraps `w` as-is. The losses treat rows as unit vectors; this is for
    /// probing them off the sphere (finite differences).
    pub fn from_raw(w: Array2<f64>) -> Self {
        Self { w }
    }

    /// Normalizes each row of `w`.
    pub fn from_unnormalized(w: Array2<f64>) -> Result<Self> {
        let mut p = Self { w };
        p.renormalize()?;
        Ok(p)
    }

    /// Rows drawn uniformly on the unit sphere.
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_simple_fn((classes, dim), || rng.sample::<f64, _>(StandardNormal));
        Self::from_unnormalized(w).expect("gaussian rows are non-zero")
    }

    /// Projects every row back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for (j, mut row) in self.w.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Value(format!("proxy {j} cannot be normalized (norm {n})")));
            }
            row /= n;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.w.row(j)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }

    pub fn into_array(self) -> Array2<f64> {
        self.w
    }
}

/// Scalar loss value, its named components and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: IndexMap<String, f64>,
    /// `N × d`.
    pub grad_z: Array2<f64>,
    /// `C × d`.
    pub grad_w: Array2<f64>,
    pub warnings: Vec<String>,
}

impl LossReport {
    pub fn zeros(samples: usize, classes: usize, dim: usize) -> Self {
        Self {
            total: 0.0,
            terms: IndexMap::new(),
            grad_z: Array2::zeros((samples, dim)),
            grad_w: Array2::zeros((classes, dim)),
            warnings: Vec::new(),
        }
    }

    pub(crate) fn single(name: &str, value: f64, grad_z: Array2<f64>, grad_w: Array2<f64>) -> Self {
        let mut terms = IndexMap::new();
        terms.insert(name.to_string(), value);
        Self {
            total: value,
            terms,
            grad_z,
            grad_w,
            warnings: Vec::new(),
        }
    }

    /// Adds `other` into `self`: totals and gradients sum, terms are appended.
    pub fn absorb(&mut self, other: LossReport) {
        self.total += other.total;
        for (k, v) in other.terms {
            *self.terms.entry(k).or_insert(0.0) += v;
        }
        self.grad_z += &other.grad_z;
        self.grad_w += &other.grad_w;
        self.warnings.extend(other.warnings);
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }
}

/// Exponential moving average of the feature norm, which sets the margin.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTracker {
    pub mu_norm: f64,
    /// Weight of the current batch mean.
    pub alpha: f64,
    pub margin_coef: f64,
    /// Number of updates applied so far.
    pub step: usize,
}

impl NormTracker {
    pub const INITIAL_MU_NORM: f64 = 20.0;
    pub const MARGIN_COEF: f64 = 0.35;

    pub fn new(alpha: f64) -> Self {
        Self {
            mu_norm: Self::INITIAL_MU_NORM,
            alpha,
            margin_coef: Self::MARGIN_COEF,
            step: 0,
        }
    }

    pub fn margin(&self) -> f64 {
        self.margin_coef * self.mu_norm
    }

    /// Folds the batch mean norm into the average and returns the new margin.
    pub fn update(&mut self, batch: &EmbeddingBatch) -> f64 {
        let mean = batch.norms().mean().unwrap_or(self.mu_norm);
        self.mu_norm = self.alpha * mean + (1.0 - self.alpha) * self.mu_norm;
        self.step += 1;
        self.margin()
    }
}

/// Margin softmax cross-entropy over vMF similarities, averaged over the batch.
pub fn uamf_loss(batch: &EmbeddingBatch, proxies: &ProxyMatrix, margin: f64, tau: f64, n: usize) -> Result<LossReport> {
    uamf_loss_shifted(batch, proxies, margin, tau, n, 0.0)
}

/// `uamf_loss` with a constant added to every similarity before the softmax.
fn uamf_loss_shifted(
    batch: &EmbeddingBatch,
    proxies: &ProxyMatrix,
    margin: f64,
    tau: f64,
    n: usize,
    shift: f64,
) -> Result<LossReport> {
    let classes = proxies.num_classes();
    if classes < 1 {
        return Err(Error::Domain("need at least one class".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if !(margin >= 0.0) {
        return Err(Error::Domain(format!("margin must be >= 0, got {margin}")));
    }
    if proxies.dim() != batch.dim() {
        return Err(Error::Domain(format!(
            "proxy dim {} != feature dim {}",
            proxies.dim(),
            batch.dim()
        )));
    }
    batch.check_labels(classes)?;

    let samples = batch.len();
    let w = proxies.as_array();
    let mut grad_z = Array2::zeros((samples, batch.dim()));
    let mut grad_w = Array2::zeros(w.raw_dim());
    let mut loss = 0.0;
    let mut logits = Array1::zeros(classes);

    for (i, z) in batch.z.rows().into_iter().enumerate() {
        let y = batch.labels[i];
        let norm = z.dot(&z).sqrt();
        let clamped = norm <= KAPPA_MIN;
        let normalizer = vmf_normalizer(norm.max(KAPPA_MIN), n)?;
        // proxyᵀz is κ cos θ
        logits.assign(&w.dot(&z));
        logits.mapv_inplace(|s| (s + normalizer.log_norm + shift) / tau);
        logits[y] -= margin / tau;

        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum_exp: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - logits[y];

        // ∂L/∂sim_j = (p_j - [j = y]) / τ
        let mut g = logits.mapv(|v| (v - lse).exp() / tau);
        g[y] -= 1.0 / tau;
        let g_sum = g.sum();
        let mut gz = w.t().dot(&g);
        if !clamped {
            // normalizer part of ∂sim/∂z: -ratio · ẑ for every class
            gz.scaled_add(-g_sum * normalizer.ratio / norm, &z);
        }
        grad_z.row_mut(i).assign(&gz);
        for (j, mut row) in grad_w.rows_mut().into_iter().enumerate() {
            row.scaled_add(g[j], &z);
        }
    }

    let scale = 1.0 / samples as f64;
    grad_z *= scale;
    grad_w *= scale;
    Ok(LossReport::single("vmf", loss * scale, grad_z, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere_math::vmf_similarity;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, samples: usize, classes: usize, dim: usize) -> (EmbeddingBatch, ProxyMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proxies = ProxyMatrix::random(classes, dim, &mut rng);
        let z = Array2::from_shape_simple_fn((samples, dim), || 3.0 * rng.sample::<f64, _>(StandardNormal));
        let labels = (0..samples).map(|_| rng.random_range(0..classes)).collect();
        (EmbeddingBatch::new(z, labels).unwrap(), proxies)
    }

    #[test]
    fn tracker_examples() {
        let batch = EmbeddingBatch::new(array![[30.0, 0.0], [0.0, -30.0]], vec![0, 0]).unwrap();
        let mut t = NormTracker::new(1.0);
        assert!((t.update(&batch) - 10.5).abs() < 1e-12);
        assert_eq!(t.mu_norm, 30.0);

        let mut t = NormTracker::new(0.0);
        assert!((t.update(&batch) - 7.0).abs() < 1e-12);
        assert_eq!(t.mu_norm, 20.0);

        let mut t = NormTracker::new(0.1);
        let m = t.update(&batch);
        assert!((t.mu_norm - 21.0).abs() < 1e-12);
        assert!((m - 7.35).abs() < 1e-12);
        assert_eq!(t.step, 1);
    }

    #[test]
    fn single_class_is_zero() {
        let (batch, _) = random_case(1, 4, 3, 5);
        let batch = EmbeddingBatch::new(batch.z, vec![0; 4]).unwrap();
        let proxies = ProxyMatrix::random(1, 5, &mut ChaCha8Rng::seed_from_u64(2));
        let r = uamf_loss(&batch, &proxies, 7.0, 1.0, 8).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.grad_z.iter().chain(r.grad_w.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn two_class_scalar_oracle() {
        let w = array![[0.6, 0.8], [1.0, 0.0]];
        let proxies = ProxyMatrix::new(w.clone()).unwrap();
        let z = array![[6.0, 8.0]];
        let batch = EmbeddingBatch::new(z, vec![0]).unwrap();
        let r = uamf_loss(&batch, &proxies, 0.0, 1.0, 2).unwrap();
        let s0 = vmf_similarity(&[0.6, 0.8], &[6.0, 8.0], 2).unwrap();
        let s1 = vmf_similarity(&[1.0, 0.0], &[6.0, 8.0], 2).unwrap();
        let want = -(1.0 / (1.0 + (-(s0 - s1)).exp())).ln();
        assert!((r.total - want).abs() < 1e-14);
    }

    #[test]
    fn margin_increases_loss() {
        let (batch, proxies) = random_case(3, 5, 6, 4);
        let mut prev = uamf_loss(&batch, &proxies, 0.0, 1.0, 16).unwrap().total;
        for k in 1..10 {
            let cur = uamf_loss(&batch, &proxies, k as f64 * 0.5, 1.0, 16).unwrap().total;
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn invariant_to_non_target_permutation() {
        let (batch, proxies) = random_case(4, 1, 5, 3);
        let batch = EmbeddingBatch::new(batch.z, vec![0]).unwrap();
        let base = uamf_loss(&batch, &proxies, 1.0, 0.5, 8).unwrap().total;
        let w = proxies.as_array();
        let permuted = ndarray::stack(Axis(0), &[w.row(0), w.row(3), w.row(1), w.row(4), w.row(2)]).unwrap();
        let other = uamf_loss(&batch, &ProxyMatrix::from_raw(permuted), 1.0, 0.5, 8)
            .unwrap()
            .total;
        assert!((base - other).abs() < 1e-12);
    }

    #[test]
    fn shift_invariant_and_overflow_safe() {
        let (batch, proxies) = random_case(5, 6, 7, 4);
        let a = uamf_loss_shifted(&batch, &proxies, 2.0, 0.7, 16, 0.0).unwrap();
        let b = uamf_loss_shifted(&batch, &proxies, 2.0, 0.7, 16, 100.0).unwrap();
        assert!((a.total - b.total).abs() < 1e-10);
        // similarities far past exp overflow still give a finite loss
        let c = uamf_loss_shifted(&batch, &proxies, 2.0, 0.01, 16, 1e4).unwrap();
        assert!(c.total.is_finite());
        let big = EmbeddingBatch::new(&batch.z * 1e3, batch.labels.clone()).unwrap();
        assert!(uamf_loss(&big, &proxies, 50.0, 0.1, 16).unwrap().total.is_finite());
    }

    #[test]
    fn loss_ranks_follow_target_cosine() {
        // equal norms, m = 0, two classes: loss grows as the target cosine falls
        let proxies = ProxyMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let angles = [0.1f64, 0.4, 0.7, 1.0, 1.3];
        let losses: Vec<f64> = angles
            .iter()
            .map(|&a| {
                let b = EmbeddingBatch::new(array![[5.0 * a.cos(), 5.0 * a.sin()]], vec![0]).unwrap();
                uamf_loss(&b, &proxies, 0.0, 1.0, 4).unwrap().total
            })
            .collect();
        assert!(losses.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn every_proxy_receives_gradient() {
        let (batch, proxies) = random_case(6, 3, 8, 5);
        let r = uamf_loss(&batch, &proxies, 1.0, 1.0, 10).unwrap();
        for row in r.grad_w.rows() {
            assert!(row.iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (batch, proxies) = random_case(7, 2, 3, 4);
        assert!(uamf_loss(&batch, &proxies, 1.0, 0.0, 4).is_err());
        assert!(uamf_loss(&batch, &proxies, -1.0, 1.0, 4).is_err());
        let empty = ProxyMatrix::from_raw(Array2::zeros((0, 4)));
        assert!(matches!(uamf_loss(&batch, &empty, 0.0, 1.0, 4), Err(Error::Domain(_))));
        let bad = EmbeddingBatch::new(batch.z.clone(), vec![0, 9]).unwrap();
        assert!(uamf_loss(&bad, &proxies, 0.0, 1.0, 4).is_err());
        assert!(ProxyMatrix::new(array![[2.0, 0.0]]).is_err());
        assert!(EmbeddingBatch::new(Array2::zeros((0, 2)), vec![]).is_err());
    }
}
