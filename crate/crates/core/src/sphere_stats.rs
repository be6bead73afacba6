//! Extreme-value estimates for uniformly scattered unit vectors and the
//! Monte-Carlo runs that check them, plus the proxy spread trackers used
//! during training.

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::uamf::{EmbeddingBatch, ProxyMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvtEstimate {
    pub cos_min: f64,
    pub theta_min_rad: f64,
    pub theta_min_deg: f64,
    pub std_cos: f64,
}

impl EvtEstimate {
    /// Builds an estimate directly from a nearest-pair angle (radians).
    pub fn from_angle(theta: f64, d: usize) -> Self {
        Self {
            cos_min: theta.cos(),
            theta_min_rad: theta,
            theta_min_deg: theta.to_degrees(),
            std_cos: (1.0 / d as f64).sqrt(),
        }
    }
}

/// Expected cosine between the closest pair of `c` random unit vectors in `d` dimensions.
pub fn evt_estimate(c: usize, d: usize) -> Result<EvtEstimate> {
    if c < 2 || d < 2 {
        return Err(Error::Domain(format!("need C >= 2 and d >= 2, got C={c}, d={d}")));
    }
    let q = 2.0 * (c as f64).ln() / d as f64;
    if q > 1.0 {
        return Err(Error::Range(format!(
            "2 ln C = {:.4} exceeds d = {d}; the estimate would exceed cos = 1",
            2.0 * (c as f64).ln()
        )));
    }
    let cos_min = q.sqrt();
    let theta = cos_min.acos();
    Ok(EvtEstimate {
        cos_min,
        theta_min_rad: theta,
        theta_min_deg: theta.to_degrees(),
        std_cos: (1.0 / d as f64).sqrt(),
    })
}

/// `(cos(θ/2), cos(θ/4))` for the nearest-pair angle θ.
pub fn half_quarter_cosines(est: &EvtEstimate) -> (f64, f64) {
    let t = est.theta_min_rad;
    ((t / 2.0).cos(), (t / 4.0).cos())
}

/// Tail approximation `sqrt(2 ln(1/(1-p)))` to the standard normal quantile.
///
/// Only meaningful as `p → 1`; it overestimates noticeably at moderate `p`
/// (about 20% at p = 0.999) and tends to 0 rather than -∞ as `p → 0`.
pub fn normal_quantile_approx(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p must be in (0, 1), got {p}")));
    }
    Ok((-2.0 * (-p).ln_1p()).sqrt())
}

/// Approximate `p`-quantile of the minimum of `c` standard normals,
/// `-sqrt(2 ln(C/p))`.
pub fn min_quantile(p: f64, c: usize) -> Result<f64> {
    if c < 1 {
        return Err(Error::Domain("C must be >= 1".into()));
    }
    Ok(-normal_quantile_approx(1.0 - p / c as f64)?)
}

/// Standard normal inverse CDF.
pub fn normal_quantile_exact(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p must be in (0, 1), got {p}")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

/// Exact `p`-quantile of the minimum of `c` iid standard normals:
/// solves `1 - (1 - Φ(x))^C = p`.
pub fn min_quantile_exact(p: f64, c: usize) -> Result<f64> {
    if c < 1 {
        return Err(Error::Domain("C must be >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p must be in (0, 1), got {p}")));
    }
    // 1 - (1-p)^(1/C), without cancellation for large C
    let inner = -((-p).ln_1p() / c as f64).exp_m1();
    normal_quantile_exact(inner)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSummary {
    /// Nearest-neighbour |cos| per vector, averaged over vectors and trials.
    pub max_cos_mean: f64,
    /// Largest |cos| over all pairs, averaged over trials.
    pub global_max_cos_mean: f64,
    /// Standard deviation of pairwise cosines, averaged over trials.
    pub std_cos_emp: f64,
    /// Mean pairwise cosine, averaged over trials.
    pub mean_cos_emp: f64,
    pub pairs_per_trial: usize,
}

struct TrialStats {
    nn_mean: f64,
    global_max: f64,
    std: f64,
    mean: f64,
}

const GRAM_BLOCK: usize = 512;

fn uniform_unit_rows(c: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut x: Array2<f64> = Array2::from_shape_simple_fn((c, d), || StandardNormal.sample(rng));
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    x
}

fn one_trial(c: usize, d: usize, seed: u64) -> TrialStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_unit_rows(c, d, &mut rng);
    let mut nn = vec![0.0f64; c];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for start in (0..c).step_by(GRAM_BLOCK) {
        let end = (start + GRAM_BLOCK).min(c);
        let block = x.slice(s![start..end, ..]).dot(&x.t());
        for (r, row) in block.axis_iter(Axis(0)).enumerate() {
            let i = start + r;
            for (j, &v) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                nn[i] = nn[i].max(v.abs());
                if j > i {
                    sum += v;
                    sum_sq += v * v;
                }
            }
        }
    }
    let pairs = (c * (c - 1) / 2) as f64;
    let mean = sum / pairs;
    TrialStats {
        nn_mean: nn.iter().sum::<f64>() / c as f64,
        global_max: nn.iter().cloned().fold(0.0, f64::max),
        std: (sum_sq / pairs - mean * mean).max(0.0).sqrt(),
        mean,
    }
}

/// Samples `c` uniform unit vectors per trial and summarizes their pairwise cosines.
///
/// Trial `t` uses its own generator seeded from `seed + t`, so results do not
/// depend on how trials are scheduled across threads.
pub fn monte_carlo_pairwise(c: usize, d: usize, trials: usize, seed: u64) -> Result<McSummary> {
    if trials == 0 {
        return Err(Error::Domain("trials must be >= 1".into()));
    }
    if c < 2 || d < 1 {
        return Err(Error::Domain(format!("need C >= 2 and d >= 1, got C={c}, d={d}")));
    }
    let stats: Vec<TrialStats> = (0..trials)
        .into_par_iter()
        .map(|t| one_trial(c, d, seed.wrapping_add(t as u64)))
        .collect();
    let k = trials as f64;
    Ok(McSummary {
        max_cos_mean: stats.iter().map(|s| s.nn_mean).sum::<f64>() / k,
        global_max_cos_mean: stats.iter().map(|s| s.global_max).sum::<f64>() / k,
        std_cos_emp: stats.iter().map(|s| s.std).sum::<f64>() / k,
        mean_cos_emp: stats.iter().map(|s| s.mean).sum::<f64>() / k,
        pairs_per_trial: c * (c - 1) / 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadStats {
    pub std: f64,
    pub std_mean: f64,
}

/// Root-mean-square pairwise cosine over `selection`, and the same for the
/// part of each cosine above the nearest-pair estimate for `(c, d)`.
pub fn proxy_spread_trackers(proxies: &ProxyMatrix, c: usize, d: usize, selection: &[usize]) -> SpreadStats {
    let w = proxies.as_array();
    let floor = (2.0 * (c as f64).ln() / d as f64).sqrt();
    let (mut sq, mut excess, mut pairs) = (0.0, 0.0, 0usize);
    for (ia, &a) in selection.iter().enumerate() {
        for &b in &selection[ia + 1..] {
            let cos = w.row(a).dot(&w.row(b));
            sq += cos * cos;
            let r = (cos - floor).max(0.0);
            excess += r * r;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return SpreadStats {
            std: 0.0,
            std_mean: 0.0,
        };
    }
    SpreadStats {
        std: (sq / pairs as f64).sqrt(),
        std_mean: (excess / pairs as f64).sqrt(),
    }
}

/// Root-mean-square cosine between samples with different labels.
pub fn sns_tracker(batch: &EmbeddingBatch) -> f64 {
    let z = batch.normalized();
    let (mut sq, mut pairs) = (0.0, 0usize);
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            if batch.labels[i] != batch.labels[j] {
                let c = z.row(i).dot(&z.row(j));
                sq += c * c;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        (sq / pairs as f64).sqrt()
    }
}
