//! Reconstruction-side losses: Laplace and Gaussian-feature NLLs, depth
//! smoothness, rotation-angle variance hinge, and the weighted composites.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::depth_renderer::{DepthMap, RgbImage};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn check_images(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Value(format!(
            "image shapes differ: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

fn check_pixels<T>(img: &RgbImage, per_pixel: &Array2<T>, what: &str) -> Result<()> {
    if per_pixel.dim() != (img.height(), img.width()) {
        return Err(Error::Value(format!("{what} shape does not match the image")));
    }
    Ok(())
}

/// Laplace NLL of the residuals `Î - I` with per-pixel scale `σ`, averaged
/// over masked pixels and channels.
pub fn laplace_nll(i_hat: &RgbImage, i: &RgbImage, sigma: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    Ok(laplace_nll_grad(i_hat, i, sigma, mask)?.0)
}

/// Value, `∂/∂Î` and `∂/∂σ`. At zero residual the subgradient 0 is used.
pub fn laplace_nll_grad(
    i_hat: &RgbImage,
    i: &RgbImage,
    sigma: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<(f64, Array3<f64>, Array2<f64>)> {
    check_images(i_hat, i)?;
    check_pixels(i, sigma, "sigma")?;
    check_pixels(i, mask, "mask")?;
    if sigma.iter().zip(mask.iter()).any(|(s, &m)| m && !(*s > 0.0)) {
        return Err(Error::Value("sigma must be positive".into()));
    }
    let count = 3 * mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Mask);
    }
    let k = 1.0 / count as f64;
    let mut value = 0.0;
    let mut d_img = Array3::zeros(i.data.raw_dim());
    let mut d_sigma = Array2::zeros(sigma.raw_dim());
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let s = sigma[(r, c)];
        for ch in 0..3 {
            let res = i_hat.data[(r, c, ch)] - i.data[(r, c, ch)];
            value += (SQRT_2 * s).ln() + SQRT_2 * res.abs() / s;
            d_img[(r, c, ch)] = k * SQRT_2 * sign(res) / s;
            d_sigma[(r, c)] += k * (1.0 / s - SQRT_2 * res.abs() / (s * s));
        }
    }
    Ok((k * value, d_img, d_sigma))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fixed random linear feature map from a flattened `H × W × 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    /// `features × (H · W · 3)`, unit rows.
    pub weights: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl PerceptualExtractor {
    pub const FEATURES: usize = 64;

    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights: Array2<f64> =
            Array2::from_shape_simple_fn((Self::FEATURES, height * width * 3), || StandardNormal.sample(&mut rng));
        for mut row in weights.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        Self {
            weights,
            height,
            width,
            seed,
        }
    }

    pub fn features(&self, img: &RgbImage) -> Result<Array1<f64>> {
        if (img.height(), img.width()) != (self.height, self.width) {
            return Err(Error::Value("image size does not match the extractor".into()));
        }
        let flat: Array1<f64> = img.data.iter().copied().collect();
        Ok(self.weights.dot(&flat))
    }
}

/// Mean over features of `½ ln(2πσ²) + |e(Î) - e(I)| / (2σ²)`.
///
/// The absolute difference (rather than its square) over `2σ²` is kept as
/// written in the source formulation.
pub fn perceptual_nll(
    i_hat: &RgbImage,
    i: &RgbImage,
    extractor: &PerceptualExtractor,
    feature_sigma: &Array1<f64>,
) -> Result<f64> {
    Ok(perceptual_nll_grad(i_hat, i, extractor, feature_sigma)?.0)
}

/// Value, `∂/∂Î` and `∂/∂σ`.
pub fn perceptual_nll_grad(
    i_hat: &RgbImage,
    i: &RgbImage,
    extractor: &PerceptualExtractor,
    feature_sigma: &Array1<f64>,
) -> Result<(f64, Array3<f64>, Array1<f64>)> {
    check_images(i_hat, i)?;
    let f = PerceptualExtractor::FEATURES;
    if feature_sigma.len() != f || feature_sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Value(format!("need {f} positive feature sigmas")));
    }
    let delta = extractor.features(i_hat)? - extractor.features(i)?;
    let k = 1.0 / f as f64;
    let mut value = 0.0;
    let mut g_feat = Array1::zeros(f);
    let mut d_sigma = Array1::zeros(f);
    for j in 0..f {
        let (s, a) = (feature_sigma[j], delta[j].abs());
        value += 0.5 * (2.0 * std::f64::consts::PI * s * s).ln() + a / (2.0 * s * s);
        g_feat[j] = k * sign(delta[j]) / (2.0 * s * s);
        d_sigma[j] = k * (1.0 / s - a / (s * s * s));
    }
    let d_flat = extractor.weights.t().dot(&g_feat);
    let d_img = d_flat
        .into_shape_with_order((extractor.height, extractor.width, 3))
        .expect("extractor size");
    Ok((k * value, d_img, d_sigma))
}

/// Range-normalized absolute depth differences along rows and columns, each
/// direction divided by the pixel count.
pub fn smoothness_loss(depth: &DepthMap) -> f64 {
    smoothness_grad(depth.values(), depth.valid(), depth.max_depth() - depth.min_depth()).0
}

/// Value and gradient wrt the depth values, treating `range` as a constant.
/// Only pairs of valid pixels contribute.
pub fn smoothness_grad(values: &Array2<f64>, valid: &Array2<bool>, range: f64) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(values.raw_dim());
    if !(range > 0.0) || !range.is_finite() {
        return (0.0, grad);
    }
    let (h, w) = values.dim();
    let k = 1.0 / ((h * w) as f64 * range);
    let mut value = 0.0;
    let mut pair = |a: (usize, usize), b: (usize, usize), grad: &mut Array2<f64>| {
        if valid[a] && valid[b] {
            let d = values[b] - values[a];
            value += d.abs();
            grad[b] += k * sign(d);
            grad[a] -= k * sign(d);
        }
    };
    for r in 0..h {
        for c in 0..w {
            if r + 1 < h {
                pair((r, c), (r + 1, c), &mut grad);
            }
            if c + 1 < w {
                pair((r, c), (r, c + 1), &mut grad);
            }
        }
    }
    (k * value, grad)
}

/// Default hinge thresholds for the three rotation-angle variances.
pub const VIEW_THRESHOLDS: [f64; 3] = [0.01, 0.04, 0.01];

/// `Σ_a relu(v_a - var_a)` with `var_a` the population variance of column `a`.
pub fn view_variance_loss(views: &Array2<f64>, thresholds: [f64; 3]) -> Result<f64> {
    Ok(view_variance_grad(views, thresholds)?.0)
}

pub fn view_variance_grad(views: &Array2<f64>, thresholds: [f64; 3]) -> Result<(f64, Array2<f64>)> {
    let b = views.nrows();
    if views.ncols() != 3 {
        return Err(Error::Value(format!("views must be B x 3, got {:?}", views.dim())));
    }
    if b < 2 {
        return Err(Error::Domain(format!("need at least 2 views, got {b}")));
    }
    let mean = views.mean_axis(Axis(0)).expect("non-empty");
    let mut value = 0.0;
    let mut grad = Array2::zeros(views.raw_dim());
    for a in 0..3 {
        let col = views.column(a);
        let var = col.iter().map(|x| (x - mean[a]).powi(2)).sum::<f64>() / b as f64;
        let short = thresholds[a] - var;
        if short > 0.0 {
            value += short;
            for (row, x) in col.iter().enumerate() {
                grad[(row, a)] = -2.0 * (x - mean[a]) / b as f64;
            }
        }
    }
    Ok((value, grad))
}

/// Everything the reconstruction loss looks at.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconInputs {
    pub i: RgbImage,
    pub i_hat: RgbImage,
    pub i_hat_flip: RgbImage,
    pub mask: Array2<bool>,
    pub sigma: Array2<f64>,
    pub depth: DepthMap,
    /// `B × 3` rotation angles.
    pub views: Array2<f64>,
    pub feature_sigma: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconWeights {
    pub lambda_flip: f64,
    pub lambda_perc: f64,
    pub lambda_smooth: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self {
            lambda_flip: 0.5,
            lambda_perc: 1.0,
            lambda_smooth: 1.0,
        }
    }
}

/// Weighted total with its raw (unweighted) components.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTotal {
    pub total: f64,
    pub terms: IndexMap<String, f64>,
}

/// `L(Î) + λ_flip L(Î') + λ_perc (P(Î) + λ_flip P(Î')) + λ_smooth S(d)`.
pub fn reco_total(inputs: &ReconInputs, extractor: &PerceptualExtractor, w: &ReconWeights) -> Result<WeightedTotal> {
    let rec = laplace_nll(&inputs.i_hat, &inputs.i, &inputs.sigma, &inputs.mask)?;
    let rec_flip = laplace_nll(&inputs.i_hat_flip, &inputs.i, &inputs.sigma, &inputs.mask)?;
    let perc = perceptual_nll(&inputs.i_hat, &inputs.i, extractor, &inputs.feature_sigma)?;
    let perc_flip = perceptual_nll(&inputs.i_hat_flip, &inputs.i, extractor, &inputs.feature_sigma)?;
    let smooth = smoothness_loss(&inputs.depth);
    let total =
        rec + w.lambda_flip * rec_flip + w.lambda_perc * (perc + w.lambda_flip * perc_flip) + w.lambda_smooth * smooth;
    let terms = [
        ("laplace", rec),
        ("laplace_flip", rec_flip),
        ("perceptual", perc),
        ("perceptual_flip", perc_flip),
        ("smooth", smooth),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(WeightedTotal { total, terms })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainWeights {
    pub lambda_reco: f64,
    pub lambda_canon: f64,
    pub lambda_view: f64,
}

impl Default for TrainWeights {
    fn default() -> Self {
        Self {
            lambda_reco: 0.01,
            lambda_canon: 0.001,
            lambda_view: 0.001,
        }
    }
}

/// `L_FR + λ_reco L_reco + λ_canon L_FR(canonical) + λ_view L_view`.
pub fn train_total(fr: f64, reco: f64, canon_fr: f64, view: f64, w: &TrainWeights) -> WeightedTotal {
    let total = fr + w.lambda_reco * reco + w.lambda_canon * canon_fr + w.lambda_view * view;
    let terms = [("fr", fr), ("reco", reco), ("canon_fr", canon_fr), ("view", view)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    WeightedTotal { total, terms }
}

/// Mirrors a per-pixel map left-right.
pub fn flip_map<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(ndarray::s![.., ..;-1]).as_standard_layout().into_owned()
}
