use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::io_formats::RunConfig;

/// Parameters of the synthetic spherical classification data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Radians.
    pub noise_angle_std: f64,
    pub quality_log_mean: f64,
    pub quality_log_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            classes: cfg.num_classes,
            input_dim: cfg.input_dim,
            samples_per_class: cfg.samples_per_class,
            noise_angle_std: cfg.noise_angle_std,
            quality_log_mean: cfg.quality_log_mean,
            quality_log_std: cfg.quality_log_std,
            seed: cfg.data_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Samples in class-major order, one per row.
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    /// Ground-truth unit direction per class.
    pub directions: Array2<f64>,
    /// Input norm of each sample (its "quality").
    pub quality: Array1<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Class directions uniform on the sphere. Each sample leaves its class
/// direction by an angle `|N(0, σ)|` along a random tangent direction and is
/// scaled by a log-normal norm.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.input_dim < 2 {
        return Err(Error::Domain("need classes, samples and input_dim >= 2".into()));
    }
    if !(spec.noise_angle_std >= 0.0 && spec.quality_log_std >= 0.0) {
        return Err(Error::Domain("noise levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let mut directions = Array2::zeros((spec.classes, d));
    for mut row in directions.rows_mut() {
        row.assign(&unit(gaussian_vector(d, &mut rng)));
    }

    let angle = Normal::new(0.0, spec.noise_angle_std).map_err(|e| Error::Domain(e.to_string()))?;
    let norm = LogNormal::new(spec.quality_log_mean, spec.quality_log_std).map_err(|e| Error::Domain(e.to_string()))?;
    let total = spec.classes * spec.samples_per_class;
    let mut x = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut quality = Array1::zeros(total);
    for c in 0..spec.classes {
        let mu = directions.row(c).to_owned();
        for s in 0..spec.samples_per_class {
            let i = c * spec.samples_per_class + s;
            let theta: f64 = angle.sample(&mut rng).abs();
            let mut t = gaussian_vector(d, &mut rng);
            let along = t.dot(&mu);
            t.scaled_add(-along, &mu);
            let t = unit(t);
            let r: f64 = norm.sample(&mut rng);
            let dir = &mu * theta.cos() + &t * theta.sin();
            x.row_mut(i).assign(&(dir * r));
            labels.push(c);
            quality[i] = r;
        }
    }
    Ok(Dataset {
        x,
        labels,
        directions,
        quality,
    })
}

/// Fisher-Yates permutation of `0..n`.
pub(crate) fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
