//! Absolute-angle regularizers on proxies and samples.
//!
//! * `pps`: pull positive cosines that fall below the epoch midpoint up to it.
//! * `pns`: push negative cosines toward zero.
//! * `pp`: push sampled proxy pairs toward orthogonality.
//! * `sns`: sample/negative-sample cosine (off by default).
//!
//! Features are normalized internally; proxy rows are used as given and are
//! expected to be unit length.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::uamf::{EmbeddingBatch, LossReport, ProxyMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyLossConfig {
    pub lambda_pps: f64,
    pub lambda_pns: f64,
    pub lambda_pp: f64,
    pub lambda_sns: f64,
    pub sns_enabled: bool,
    pub cos_min: f64,
    pub cos_max: f64,
    /// Track only the first sample of each batch for the epoch midpoint.
    pub mid_strict_mode: bool,
}

impl Default for ProxyLossConfig {
    fn default() -> Self {
        Self {
            lambda_pps: 5.0,
            lambda_pns: 20.0,
            lambda_pp: 150.0,
            lambda_sns: 150.0,
            sns_enabled: false,
            cos_min: 0.5,
            cos_max: 0.9,
            mid_strict_mode: false,
        }
    }
}

impl ProxyLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.cos_min && self.cos_min <= self.cos_max && self.cos_max <= 1.0) {
            return Err(Error::Domain(format!(
                "need 0 <= cos_min <= cos_max <= 1, got {} and {}",
                self.cos_min, self.cos_max
            )));
        }
        let lambdas = [self.lambda_pps, self.lambda_pns, self.lambda_pp, self.lambda_sns];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Domain("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Positive-cosine midpoint carried from one epoch to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMidState {
    pub mid: f64,
    sum: f64,
    count: usize,
}

impl EpochMidState {
    pub fn new(cfg: &ProxyLossConfig) -> Self {
        Self {
            mid: cfg.cos_min,
            sum: 0.0,
            count: 0,
        }
    }

    pub fn with_mid(mid: f64) -> Self {
        Self {
            mid,
            sum: 0.0,
            count: 0,
        }
    }

    /// Records positive cosines of `batch` (or only its first sample in strict mode).
    pub fn observe(&mut self, batch: &EmbeddingBatch, proxies: &ProxyMatrix, strict: bool) {
        let take = if strict { 1 } else { batch.len() };
        for i in 0..take {
            let z = batch.z.row(i);
            if let Some(c) = cosine_to(proxies.row(batch.labels[i]), z) {
                self.sum += c;
                self.count += 1;
            }
        }
    }

    pub fn record(&mut self, cosine: f64) {
        self.sum += cosine;
        self.count += 1;
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    pub fn accumulated_mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Closes an epoch: the clipped mean of observed cosines becomes the new midpoint.
pub fn end_epoch(state: &EpochMidState, cfg: &ProxyLossConfig) -> EpochMidState {
    let mid = match state.accumulated_mean() {
        Some(m) => m.clamp(cfg.cos_min, cfg.cos_max),
        None => state.mid,
    };
    EpochMidState::with_mid(mid)
}

fn cosine_to(w: ArrayView1<f64>, z: ArrayView1<f64>) -> Option<f64> {
    let n = z.dot(&z).sqrt();
    (n > 0.0).then(|| w.dot(&z) / n)
}

/// Unit feature rows and their norms. Zero rows stay zero.
fn unit_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = z.clone();
    let mut norms = Array1::zeros(z.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        norms[i] = n;
        if n > 0.0 {
            row /= n;
        }
    }
    (out, norms)
}

/// Pulls `g_hat` (gradient wrt ẑ) back through the normalization of `z`.
fn through_normalization(g_hat: ArrayView1<f64>, z_hat: ArrayView1<f64>, norm: f64) -> Array1<f64> {
    if norm == 0.0 {
        return Array1::zeros(g_hat.len());
    }
    let radial = g_hat.dot(&z_hat);
    (&g_hat - &(&z_hat * radial)) / norm
}

fn check(batch: &EmbeddingBatch, proxies: &ProxyMatrix) -> Result<()> {
    if proxies.dim() != batch.dim() {
        return Err(Error::Domain(format!(
            "proxy dim {} != feature dim {}",
            proxies.dim(),
            batch.dim()
        )));
    }
    batch.check_labels(proxies.num_classes())
}

pub fn pps_loss(
    batch: &EmbeddingBatch,
    proxies: &ProxyMatrix,
    state: &EpochMidState,
    cfg: &ProxyLossConfig,
) -> Result<LossReport> {
    check(batch, proxies)?;
    let (z_hat, norms) = unit_rows(&batch.z);
    let w = proxies.as_array();
    let mut grad_z = Array2::zeros(batch.z.raw_dim());
    let mut grad_w = Array2::zeros(w.raw_dim());

    let left: Vec<(usize, f64)> = (0..batch.len())
        .filter(|&i| norms[i] > 0.0)
        .map(|i| (i, w.row(batch.labels[i]).dot(&z_hat.row(i))))
        .filter(|&(_, c)| c < state.mid)
        .collect();
    if left.is_empty() {
        return Ok(LossReport::single("pps", 0.0, grad_z, grad_w));
    }

    let k = cfg.lambda_pps / left.len() as f64;
    let mut loss = 0.0;
    for &(i, c) in &left {
        let y = batch.labels[i];
        let d = c - state.mid;
        loss += d * d;
        let g = 2.0 * k * d;
        grad_z
            .row_mut(i)
            .assign(&through_normalization((&w.row(y) * g).view(), z_hat.row(i), norms[i]));
        grad_w.row_mut(y).scaled_add(g, &z_hat.row(i));
    }
    Ok(LossReport::single("pps", k * loss, grad_z, grad_w))
}

pub fn pns_loss(batch: &EmbeddingBatch, proxies: &ProxyMatrix, cfg: &ProxyLossConfig) -> Result<LossReport> {
    check(batch, proxies)?;
    let classes = proxies.num_classes();
    let mut grad_z = Array2::zeros(batch.z.raw_dim());
    let mut grad_w = Array2::zeros(proxies.as_array().raw_dim());
    if classes < 2 {
        let mut r = LossReport::single("pns", 0.0, grad_z, grad_w);
        r.warnings.push("pns: fewer than two classes, skipped".into());
        return Ok(r);
    }

    let (z_hat, norms) = unit_rows(&batch.z);
    let w = proxies.as_array();
    let k = cfg.lambda_pns / (batch.len() * (classes - 1)) as f64;
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let y = batch.labels[i];
        let mut cos = w.dot(&z_hat.row(i));
        cos[y] = 0.0;
        loss += cos.dot(&cos);
        let g = &cos * (2.0 * k);
        let g_hat = w.t().dot(&g);
        grad_z
            .row_mut(i)
            .assign(&through_normalization(g_hat.view(), z_hat.row(i), norms[i]));
        for (j, mut row) in grad_w.rows_mut().into_iter().enumerate() {
            if j != y {
                row.scaled_add(g[j], &z_hat.row(i));
            }
        }
    }
    Ok(LossReport::single("pns", k * loss, grad_z, grad_w))
}

/// Distinct batch labels plus `n_sampled` proxies drawn without replacement, deduplicated.
pub fn pp_selection<R: Rng + ?Sized>(labels: &[usize], classes: usize, n_sampled: usize, rng: &mut R) -> Vec<usize> {
    let mut set: BTreeSet<usize> = labels.iter().copied().collect();
    let amount = n_sampled.min(classes);
    set.extend(sample(rng, classes, amount));
    set.into_iter().collect()
}

/// Mean squared cosine over all unordered pairs of the given proxy rows.
pub fn pp_loss_on(selection: &[usize], proxies: &ProxyMatrix, cfg: &ProxyLossConfig) -> LossReport {
    let w = proxies.as_array();
    let mut grad_w = Array2::zeros(w.raw_dim());
    let grad_z = Array2::zeros((0, w.ncols()));
    let s = selection.len();
    if s < 2 {
        return LossReport::single("pp", 0.0, grad_z, grad_w);
    }
    let pairs = s * (s - 1) / 2;
    let k = cfg.lambda_pp / pairs as f64;
    let mut loss = 0.0;
    for (ia, &a) in selection.iter().enumerate() {
        for &b in &selection[ia + 1..] {
            let c = w.row(a).dot(&w.row(b));
            loss += c * c;
            let g = 2.0 * k * c;
            let (ra, rb) = (w.row(a).to_owned(), w.row(b).to_owned());
            grad_w.row_mut(a).scaled_add(g, &rb);
            grad_w.row_mut(b).scaled_add(g, &ra);
        }
    }
    LossReport::single("pp", k * loss, grad_z, grad_w)
}

/// Proxy orthogonality loss over the batch's proxies plus `N` random ones.
/// The returned `grad_z` has zero rows matching the batch.
pub fn pp_loss<R: Rng + ?Sized>(
    batch_labels: &[usize],
    proxies: &ProxyMatrix,
    cfg: &ProxyLossConfig,
    rng: &mut R,
) -> Result<LossReport> {
    let classes = proxies.num_classes();
    if let Some(y) = batch_labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {y} outside 0..{classes}")));
    }
    let selection = pp_selection(batch_labels, classes, batch_labels.len(), rng);
    let mut r = pp_loss_on(&selection, proxies, cfg);
    r.grad_z = Array2::zeros((batch_labels.len(), proxies.dim()));
    Ok(r)
}

pub fn sns_loss(batch: &EmbeddingBatch, cfg: &ProxyLossConfig) -> Result<LossReport> {
    let (z_hat, norms) = unit_rows(&batch.z);
    let mut g_hat = Array2::<f64>::zeros(batch.z.raw_dim());
    let mut loss = 0.0;
    let mut pairs = 0usize;
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            if batch.labels[i] == batch.labels[j] {
                continue;
            }
            pairs += 1;
            loss += z_hat.row(i).dot(&z_hat.row(j));
            let (zi, zj) = (z_hat.row(i).to_owned(), z_hat.row(j).to_owned());
            g_hat.row_mut(i).scaled_add(1.0, &zj);
            g_hat.row_mut(j).scaled_add(1.0, &zi);
        }
    }
    let mut grad_z = Array2::zeros(batch.z.raw_dim());
    let grad_w = Array2::zeros((0, batch.dim()));
    if pairs == 0 {
        return Ok(LossReport::single("sns", 0.0, grad_z, grad_w));
    }
    let k = cfg.lambda_sns / pairs as f64;
    for i in 0..batch.len() {
        let g = &g_hat.row(i) * k;
        grad_z
            .row_mut(i)
            .assign(&through_normalization(g.view(), z_hat.row(i), norms[i]));
    }
    Ok(LossReport::single("sns", k * loss, grad_z, grad_w))
}

/// pps + pns + pp (+ sns when enabled). `state` is read, not updated.
pub fn proxy_based_total<R: Rng + ?Sized>(
    batch: &EmbeddingBatch,
    proxies: &ProxyMatrix,
    state: &EpochMidState,
    cfg: &ProxyLossConfig,
    rng: &mut R,
) -> Result<LossReport> {
    let classes = proxies.num_classes();
    if let Some(y) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {y} outside 0..{classes}")));
    }
    let selection = pp_selection(&batch.labels, classes, batch.len(), rng);
    proxy_based_total_on(batch, proxies, state, cfg, &selection)
}

/// [`proxy_based_total`] with a fixed pp selection.
pub fn proxy_based_total_on(
    batch: &EmbeddingBatch,
    proxies: &ProxyMatrix,
    state: &EpochMidState,
    cfg: &ProxyLossConfig,
    selection: &[usize],
) -> Result<LossReport> {
    cfg.validate()?;
    let mut total = LossReport::zeros(batch.len(), proxies.num_classes(), batch.dim());
    total.absorb(pps_loss(batch, proxies, state, cfg)?);
    total.absorb(pns_loss(batch, proxies, cfg)?);
    let mut pp = pp_loss_on(selection, proxies, cfg);
    pp.grad_z = Array2::zeros(batch.z.raw_dim());
    total.absorb(pp);
    if cfg.sns_enabled {
        let mut sns = sns_loss(batch, cfg)?;
        sns.grad_w = Array2::zeros(total.grad_w.raw_dim());
        total.absorb(sns);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg() -> ProxyLossConfig {
        ProxyLossConfig::default()
    }

    fn random_case(seed: u64, samples: usize, classes: usize, dim: usize) -> (EmbeddingBatch, ProxyMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proxies = ProxyMatrix::random(classes, dim, &mut rng);
        let z = Array2::from_shape_simple_fn((samples, dim), || 2.0 * rng.sample::<f64, _>(StandardNormal));
        let labels = (0..samples).map(|_| rng.random_range(0..classes)).collect();
        (EmbeddingBatch::new(z, labels).unwrap(), proxies)
    }

    fn scalar_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / nb
    }

    #[test]
    fn pps_examples() {
        let proxies = ProxyMatrix::new(array![[1.0, 0.0]]).unwrap();
        let c = 0.4f64;
        let batch = EmbeddingBatch::new(array![[2.0 * c, 2.0 * (1.0 - c * c).sqrt()]], vec![0]).unwrap();
        let r = pps_loss(&batch, &proxies, &EpochMidState::with_mid(0.5), &cfg()).unwrap();
        assert!((r.total - 0.05).abs() < 1e-14);

        let r = pps_loss(&batch, &proxies, &EpochMidState::with_mid(0.3), &cfg()).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn pps_matches_scalar_version() {
        for seed in 0..20 {
            let (batch, proxies) = random_case(seed, 12, 5, 6);
            let mid = 0.1;
            let got = pps_loss(&batch, &proxies, &EpochMidState::with_mid(mid), &cfg())
                .unwrap()
                .total;
            let mut terms = Vec::new();
            for i in 0..batch.len() {
                let z: Vec<f64> = batch.z.row(i).to_vec();
                let w: Vec<f64> = proxies.row(batch.labels[i]).to_vec();
                let c = scalar_cos(&w, &z);
                if c < mid {
                    terms.push((c - mid).powi(2));
                }
            }
            let want = if terms.is_empty() {
                0.0
            } else {
                5.0 * terms.iter().sum::<f64>() / terms.len() as f64
            };
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{got} {want}");
        }
    }

    #[test]
    fn pns_examples() {
        let proxies = ProxyMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let batch = EmbeddingBatch::new(array![[3.0, 0.0]], vec![0]).unwrap();
        assert_eq!(pns_loss(&batch, &proxies, &cfg()).unwrap().total, 0.0);

        let a = 60f64.to_radians();
        let proxies = ProxyMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let batch = EmbeddingBatch::new(array![[a.cos(), a.sin()]], vec![0]).unwrap();
        assert!((pns_loss(&batch, &proxies, &cfg()).unwrap().total - 5.0).abs() < 1e-12);

        let one = ProxyMatrix::new(array![[1.0, 0.0]]).unwrap();
        let r = pns_loss(&batch, &one, &cfg()).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn pp_examples() {
        let proxies = ProxyMatrix::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(pp_loss_on(&[0, 1], &proxies, &cfg()).total, 0.0);
        assert!((pp_loss_on(&[0, 2], &proxies, &cfg()).total - 150.0).abs() < 1e-12);
        assert_eq!(pp_loss_on(&[1], &proxies, &cfg()).total, 0.0);
    }

    #[test]
    fn pp_selection_is_distinct_and_covers_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let labels = vec![3, 3, 7, 1];
            let sel = pp_selection(&labels, 20, labels.len(), &mut rng);
            assert!(sel.windows(2).all(|p| p[0] < p[1]));
            for y in [1, 3, 7] {
                assert!(sel.contains(&y));
            }
            assert!(sel.len() >= 4 && sel.len() <= 7);
        }
        // more draws than classes just selects everything
        assert_eq!(pp_selection(&[0], 3, 10, &mut rng), vec![0, 1, 2]);
    }

    #[test]
    fn sns_examples() {
        let batch = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 2.0]], vec![0, 1]).unwrap();
        assert_eq!(sns_loss(&batch, &cfg()).unwrap().total, 0.0);
        let batch = EmbeddingBatch::new(array![[1.0, 1.0], [3.0, 3.0]], vec![0, 1]).unwrap();
        assert!((sns_loss(&batch, &cfg()).unwrap().total - 150.0).abs() < 1e-10);
        let batch = EmbeddingBatch::new(array![[1.0, 1.0], [3.0, 3.0]], vec![1, 1]).unwrap();
        assert_eq!(sns_loss(&batch, &cfg()).unwrap().total, 0.0);
    }

    #[test]
    fn sns_matches_scalar_version() {
        let (batch, _) = random_case(11, 9, 3, 4);
        let got = sns_loss(&batch, &cfg()).unwrap().total;
        let rows: Vec<Vec<f64>> = batch.z.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                if batch.labels[i] != batch.labels[j] {
                    let nj: f64 = rows[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                    sum += scalar_cos(&rows[j], &rows[i]) / nj;
                    n += 1;
                }
            }
        }
        let want = 150.0 * sum / n as f64;
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn end_epoch_examples() {
        let c = cfg();
        for (mean, want) in [(0.3, 0.5), (0.95, 0.9), (0.7, 0.7)] {
            let mut s = EpochMidState::new(&c);
            s.record(mean);
            s.record(mean);
            let next = end_epoch(&s, &c);
            assert!((next.mid - want).abs() < 1e-15);
            assert_eq!(next.pending(), 0);
        }
        let s = EpochMidState::with_mid(0.62);
        assert_eq!(end_epoch(&s, &c).mid, 0.62);
    }

    #[test]
    fn strict_mode_observes_first_sample_only() {
        let (batch, proxies) = random_case(2, 6, 3, 4);
        let mut s = EpochMidState::new(&cfg());
        s.observe(&batch, &proxies, true);
        assert_eq!(s.pending(), 1);
        s.observe(&batch, &proxies, false);
        assert_eq!(s.pending(), 7);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let (batch, proxies) = random_case(3, 5, 6, 4);
        let state = EpochMidState::with_mid(0.5);
        let mut c = cfg();
        c.sns_enabled = true;
        let t = proxy_based_total(&batch, &proxies, &state, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pps = pps_loss(&batch, &proxies, &state, &c).unwrap();
        let pns = pns_loss(&batch, &proxies, &c).unwrap();
        let pp = pp_loss(&batch.labels, &proxies, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sns = sns_loss(&batch, &c).unwrap();
        let want = pps.total + pns.total + pp.total + sns.total;
        assert!((t.total - want).abs() < 1e-12);
        assert_eq!(t.terms.len(), 4);
        let summed: f64 = t.terms.values().sum();
        assert!((summed - t.total).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let (batch, proxies) = random_case(4, 7, 5, 3);
        let scaled = EmbeddingBatch::new(&batch.z * 3.0, batch.labels.clone()).unwrap();
        let c = cfg();
        let s = EpochMidState::with_mid(0.6);
        let a = pps_loss(&batch, &proxies, &s, &c).unwrap().total;
        let b = pps_loss(&scaled, &proxies, &s, &c).unwrap().total;
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        let a = pns_loss(&batch, &proxies, &c).unwrap().total;
        let b = pns_loss(&scaled, &proxies, &c).unwrap().total;
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn validates_config() {
        let mut c = cfg();
        c.cos_min = 0.95;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lambda_pp = -1.0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
