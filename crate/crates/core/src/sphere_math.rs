//! Log-domain modified Bessel functions and the von Mises-Fisher similarity.
//!
//! The vMF normalizer contains `I_{n/2-1}(κ)`, which under- or overflows in
//! double precision for the orders used with high-dimensional embeddings.
//! Everything here is therefore evaluated as logarithms: the power series of
//! `I_α(x)` is summed with a streaming log-sum-exp.

use crate::error::{Error, Result};

/// Lower clamp applied to the concentration `κ = ‖z‖`.
pub const KAPPA_MIN: f64 = 1e-6;

/// Series terms this far (in log units) below the running maximum are
/// negligible: ln(1e18).
const LOG_TERM_CUTOFF: f64 = 41.446_531_673_892_82;
const MAX_TERMS: usize = 1_000_000;

/// Result of [`log_bessel_i`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesselEval {
    /// `ln I_α(x)`; `-∞` when `x = 0` and `α > 0`.
    pub log_value: f64,
    /// `I_{α+1}(x) / I_α(x)`, in `(0, 1)` for `x > 0`; 0 at `x = 0`.
    pub ratio_next: f64,
    pub terms_used: usize,
}

/// Streaming `ln Σ exp(t_k)`. The largest term is kept out of `rest` so the
/// final logarithm can use `ln_1p`, which matters when one term dominates.
#[derive(Debug, Clone, Copy)]
struct LogSumExp {
    max: f64,
    /// Sum of the other terms, scaled by `exp(-max)`.
    rest: f64,
}

impl LogSumExp {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            rest: 0.0,
        }
    }

    fn push(&mut self, t: f64) {
        if t > self.max {
            self.rest = if self.max == f64::NEG_INFINITY {
                0.0
            } else {
                (1.0 + self.rest) * (self.max - t).exp()
            };
            self.max = t;
        } else {
            self.rest += (t - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.rest.ln_1p()
    }
}

/// `ln I_α(x)` and the ratio `I_{α+1}(x)/I_α(x)` from the power series
///
/// ```text
/// I_α(x) = Σ_m (x/2)^(2m+α) / (m! Γ(m+α+1))
/// ```
///
/// summed in log space until the terms past the peak fall 1e-18 below the
/// running maximum.
pub fn log_bessel_i(alpha: f64, x: f64) -> Result<BesselEval> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "Bessel order must be finite and >= 0, got {alpha}"
        )));
    }
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!(
            "Bessel argument must be finite and >= 0, got {x}"
        )));
    }
    if x == 0.0 {
        let log_value = if alpha == 0.0 { 0.0 } else { f64::NEG_INFINITY };
        return Ok(BesselEval {
            log_value,
            ratio_next: 0.0,
            terms_used: 1,
        });
    }

    let log_half_x = (0.5 * x).ln();
    // index of the largest term
    let peak = 0.5 * ((alpha * alpha + x * x).sqrt() - alpha);

    let mut order = LogSumExp::new();
    let mut next = LogSumExp::new();
    // log term_m of I_α; term_m of I_{α+1} is term_m · (x/2) / (m + α + 1)
    let mut log_term = alpha * log_half_x - libm::lgamma(alpha + 1.0);
    let mut m = 0usize;
    loop {
        let mf = m as f64;
        let log_term_next = log_term + log_half_x - (mf + alpha + 1.0).ln();
        order.push(log_term);
        next.push(log_term_next);
        m += 1;
        if mf > peak && log_term < order.max - LOG_TERM_CUTOFF && log_term_next < next.max - LOG_TERM_CUTOFF {
            break;
        }
        if m >= MAX_TERMS {
            return Err(Error::Domain(format!(
                "Bessel series for alpha={alpha}, x={x} did not converge"
            )));
        }
        log_term += 2.0 * log_half_x - (mf + 1.0).ln() - (mf + alpha + 1.0).ln();
    }

    let log_value = order.value();
    Ok(BesselEval {
        log_value,
        ratio_next: (next.value() - log_value).exp(),
        terms_used: m,
    })
}

/// Parameters of a von Mises-Fisher distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    /// Unit mean direction.
    pub mu: Vec<f64>,
    /// Concentration.
    pub kappa: f64,
    /// Dimension entering the normalizer; may differ from `mu.len()`.
    pub n: usize,
}

impl VmfParams {
    /// Validates `‖mu‖ = 1 ± 1e-9` and `n ≥ 2`, clamping `kappa` up to [`KAPPA_MIN`].
    pub fn new(mu: Vec<f64>, kappa: f64, n: usize) -> Result<Self> {
        let norm = l2_norm(&mu);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mean direction has norm {norm}")));
        }
        if !(kappa >= 0.0) {
            return Err(Error::Domain(format!("kappa must be >= 0, got {kappa}")));
        }
        if n < 2 {
            return Err(Error::Domain(format!("vMF dimension must be >= 2, got {n}")));
        }
        Ok(Self {
            mu,
            kappa: kappa.max(KAPPA_MIN),
            n,
        })
    }
}

/// The `κ`-dependent part of the vMF log-density and the Bessel ratio used
/// by its derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfNormalizer {
    /// `(n/2-1) ln κ - (n/2) ln 2π - ln I_{n/2-1}(κ)`.
    pub log_norm: f64,
    /// `I_{n/2}(κ) / I_{n/2-1}(κ)`.
    pub ratio: f64,
}

pub fn vmf_normalizer(kappa: f64, n: usize) -> Result<VmfNormalizer> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("kappa must be > 0, got {kappa}")));
    }
    if n < 2 {
        return Err(Error::Domain(format!("vMF dimension must be >= 2, got {n}")));
    }
    let half = n as f64 / 2.0;
    let nu = half - 1.0;
    let bessel = log_bessel_i(nu, kappa)?;
    Ok(VmfNormalizer {
        log_norm: nu * kappa.ln() - half * std::f64::consts::TAU.ln() - bessel.log_value,
        ratio: bessel.ratio_next,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// vMF log-density of the unit vector `x`.
pub fn vmf_log_pdf(x: &[f64], params: &VmfParams) -> Result<f64> {
    if x.len() != params.mu.len() {
        return Err(Error::Domain(format!(
            "dimension mismatch: x has {}, mu has {}",
            x.len(),
            params.mu.len()
        )));
    }
    let norm = l2_norm(x);
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("x must be a unit vector, norm is {norm}")));
    }
    let normalizer = vmf_normalizer(params.kappa, params.n)?;
    Ok(params.kappa * dot(&params.mu, x) + normalizer.log_norm)
}

fn check_pair(proxy: &[f64], z: &[f64]) -> Result<()> {
    if proxy.len() != z.len() {
        return Err(Error::Domain(format!(
            "dimension mismatch: proxy has {}, z has {}",
            proxy.len(),
            z.len()
        )));
    }
    if proxy.iter().all(|&p| p == 0.0) {
        return Err(Error::Domain("zero proxy".into()));
    }
    Ok(())
}

/// vMF similarity between a unit proxy and an unnormalized feature.
///
/// The feature norm is the concentration, `κ = max(‖z‖, KAPPA_MIN)`, and the
/// angle is measured in the feature space, so `κ cos θ = proxyᵀz`. The
/// distribution dimension `n` only enters the normalizer.
pub fn vmf_similarity(proxy: &[f64], z: &[f64], n: usize) -> Result<f64> {
    check_pair(proxy, z)?;
    let kappa = l2_norm(z).max(KAPPA_MIN);
    Ok(dot(proxy, z) + vmf_normalizer(kappa, n)?.log_norm)
}

/// Similarity value with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrad {
    pub value: f64,
    /// `∂sim/∂proxy = z`.
    pub d_proxy: Vec<f64>,
    /// `∂sim/∂z = proxy - (I_{n/2}(κ)/I_{n/2-1}(κ)) ẑ`.
    pub d_z: Vec<f64>,
    /// `‖z‖` sat at the clamp; norm-dependent terms were frozen and
    /// `d_z = proxy`.
    pub clamped: bool,
}

pub fn vmf_similarity_grad(proxy: &[f64], z: &[f64], n: usize) -> Result<SimilarityGrad> {
    check_pair(proxy, z)?;
    let norm = l2_norm(z);
    let clamped = norm <= KAPPA_MIN;
    let kappa = norm.max(KAPPA_MIN);
    let normalizer = vmf_normalizer(kappa, n)?;
    let d_z = if clamped {
        proxy.to_vec()
    } else {
        let s = normalizer.ratio / norm;
        proxy.iter().zip(z).map(|(p, zi)| p - s * zi).collect()
    };
    Ok(SimilarityGrad {
        value: dot(proxy, z) + normalizer.log_norm,
        d_proxy: z.to_vec(),
        d_z,
        clamped,
    })
}
