//! Central finite-difference checks of every analytic gradient.
//!
//! The error of one check is `max_i |a_i - n_i| / max_i |n_i|`: the worst
//! coordinate error relative to the size of the numeric gradient.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::depth_renderer::RgbImage;
use crate::error::Result;
use crate::io_formats::MetricRecord;
use crate::proxy_losses::{pns_loss, pp_loss_on, pps_loss, sns_loss, EpochMidState, ProxyLossConfig};
use crate::recon_losses::{
    laplace_nll_grad, perceptual_nll_grad, smoothness_grad, view_variance_grad, PerceptualExtractor,
};
use crate::sphere_math::vmf_similarity_grad;
use crate::uamf::{uamf_loss, EmbeddingBatch, LossReport, ProxyMatrix};

pub const GRAD_CHECK_OPS: &[&str] = &[
    "vmf_similarity",
    "uamf",
    "pps",
    "pns",
    "pp",
    "sns",
    "laplace_nll",
    "perceptual_nll",
    "smoothness",
    "view_variance",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub op: String,
    pub max_rel_err: f64,
    pub instances: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, op: &str) -> Option<&GradCheckRow> {
        self.rows.iter().find(|r| r.op == op)
    }

    pub fn to_records(&self) -> Vec<MetricRecord> {
        self.rows
            .iter()
            .map(|r| {
                let mut m = IndexMap::new();
                m.insert("max_rel_err".to_string(), r.max_rel_err);
                m.insert("passed".to_string(), if r.passed { 1.0 } else { 0.0 });
                m
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>9}  result\n", "op", "max_rel_err", "instances");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>12.3e} {:>9}  {}\n",
                r.op,
                r.max_rel_err,
                r.instances,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// One instance: a scalar function of a flat parameter vector, the point and
/// the analytic gradient there.
struct Instance {
    f: Box<dyn Fn(&[f64]) -> f64>,
    x: Vec<f64>,
    grad: Vec<f64>,
}

fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max_i |n_i|`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * gaussian(rng)).collect()
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    ProxyMatrix::random(rows, cols, rng)
        .into_array()
        .into_raw_vec_and_offset()
        .0
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn split_batch(p: &[f64], n: usize, c: usize, d: usize, labels: &[usize]) -> (EmbeddingBatch, ProxyMatrix) {
    let z = Array2::from_shape_vec((n, d), p[..n * d].to_vec()).expect("shape");
    let w = Array2::from_shape_vec((c, d), p[n * d..n * d + c * d].to_vec()).expect("shape");
    (
        EmbeddingBatch {
            z,
            labels: labels.to_vec(),
        },
        ProxyMatrix::from_raw(w),
    )
}

fn joint(report: &LossReport) -> Vec<f64> {
    let mut g = flat(&report.grad_z);
    g.extend(flat(&report.grad_w));
    g
}

/// Loss over `(z, W)` for a proxy-side op.
fn batch_instance(
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&EmbeddingBatch, &ProxyMatrix) -> LossReport + 'static,
) -> Instance {
    let n = rng.random_range(1..=4);
    let c = rng.random_range(2..=8);
    let d = rng.random_range(2..=16);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut x = gaussian_vec(n * d, 2.0, rng);
    x.extend(unit_rows(c, d, rng));
    let (b, w) = split_batch(&x, n, c, d, &labels);
    let grad = joint(&loss(&b, &w));
    let f = move |p: &[f64]| {
        let (b, w) = split_batch(p, n, c, d, &labels);
        loss(&b, &w).total
    };
    Instance {
        f: Box::new(f),
        x,
        grad,
    }
}

fn image_from(p: &[f64], h: usize, w: usize) -> RgbImage {
    RgbImage {
        data: Array3::from_shape_vec((h, w, 3), p.to_vec()).expect("shape"),
    }
}

fn make_instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    let cfg = ProxyLossConfig {
        sns_enabled: true,
        ..ProxyLossConfig::default()
    };
    match op {
        "vmf_similarity" => {
            let d = rng.random_range(2..=16);
            let n = rng.random_range(2..=64);
            let mut x = unit_rows(1, d, rng);
            x.extend(gaussian_vec(d, 3.0, rng));
            let g = vmf_similarity_grad(&x[..d], &x[d..], n).expect("valid instance");
            let mut grad = g.d_proxy;
            grad.extend(g.d_z);
            let f = move |p: &[f64]| crate::sphere_math::vmf_similarity(&p[..d], &p[d..], n).expect("valid");
            Instance {
                f: Box::new(f),
                x,
                grad,
            }
        }
        "uamf" => {
            let margin = rng.random_range(0.0..2.0);
            let tau = rng.random_range(0.5..2.0);
            batch_instance(rng, move |b, w| {
                let n = b.dim().max(2);
                uamf_loss(b, w, margin, tau, n).expect("valid instance")
            })
        }
        "pps" => {
            let mid = rng.random_range(0.2..0.6);
            batch_instance(rng, move |b, w| {
                pps_loss(b, w, &EpochMidState::with_mid(mid), &cfg).expect("valid instance")
            })
        }
        "pns" => batch_instance(rng, move |b, w| pns_loss(b, w, &cfg).expect("valid instance")),
        "pp" => batch_instance(rng, move |b, w| {
            let all: Vec<usize> = (0..w.num_classes()).collect();
            let mut r = pp_loss_on(&all, w, &cfg);
            r.grad_z = Array2::zeros(b.z.raw_dim());
            r
        }),
        "sns" => {
            // labels drawn from few classes so some pairs differ and some match
            let n = rng.random_range(2..=6);
            let d = rng.random_range(2..=16);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let mut labels = labels;
            labels[0] = 0;
            labels[1] = 1;
            let x = gaussian_vec(n * d, 2.0, rng);
            let build = move |p: &[f64], labels: &[usize]| EmbeddingBatch {
                z: Array2::from_shape_vec((n, d), p.to_vec()).expect("shape"),
                labels: labels.to_vec(),
            };
            let grad = flat(&sns_loss(&build(&x, &labels), &cfg).expect("valid").grad_z);
            let f = move |p: &[f64]| sns_loss(&build(p, &labels), &cfg).expect("valid").total;
            Instance {
                f: Box::new(f),
                x,
                grad,
            }
        }
        "laplace_nll" => {
            let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
            let target = image_from(&gaussian_vec(h * w * 3, 0.3, rng), h, w);
            let mask = Array2::from_shape_simple_fn((h, w), || rng.random_bool(0.8));
            let mut mask = mask;
            mask[(0, 0)] = true;
            let mut x = gaussian_vec(h * w * 3, 0.3, rng);
            x.extend((0..h * w).map(|_| rng.random_range(0.3..1.5)));
            let eval = move |p: &[f64]| {
                let img = image_from(&p[..h * w * 3], h, w);
                let sigma = Array2::from_shape_vec((h, w), p[h * w * 3..].to_vec()).expect("shape");
                laplace_nll_grad(&img, &target, &sigma, &mask).expect("valid instance")
            };
            let (_, gi, gs) = eval(&x);
            let mut grad: Vec<f64> = gi.iter().copied().collect();
            grad.extend(gs.iter().copied());
            Instance {
                f: Box::new(move |p| eval(p).0),
                x,
                grad,
            }
        }
        "perceptual_nll" => {
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let ex = PerceptualExtractor::new(h, w, rng.random());
            let target = image_from(&gaussian_vec(h * w * 3, 0.3, rng), h, w);
            let f_count = PerceptualExtractor::FEATURES;
            let mut x = gaussian_vec(h * w * 3, 0.3, rng);
            x.extend((0..f_count).map(|_| rng.random_range(0.3..1.5)));
            let eval = move |p: &[f64]| {
                let img = image_from(&p[..h * w * 3], h, w);
                let sigma = Array1::from(p[h * w * 3..].to_vec());
                perceptual_nll_grad(&img, &target, &ex, &sigma).expect("valid instance")
            };
            let (_, gi, gs) = eval(&x);
            let mut grad: Vec<f64> = gi.iter().copied().collect();
            grad.extend(gs.iter().copied());
            Instance {
                f: Box::new(move |p| eval(p).0),
                x,
                grad,
            }
        }
        "smoothness" => {
            let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
            let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(1.0..3.0)).collect();
            let valid = Array2::from_elem((h, w), true);
            let range = 2.0;
            let eval = move |p: &[f64]| {
                smoothness_grad(
                    &Array2::from_shape_vec((h, w), p.to_vec()).expect("shape"),
                    &valid,
                    range,
                )
            };
            let grad = eval(&x).1.iter().copied().collect();
            Instance {
                f: Box::new(move |p| eval(p).0),
                x,
                grad,
            }
        }
        "view_variance" => {
            let b = rng.random_range(2..=8);
            let x = gaussian_vec(b * 3, 0.4, rng);
            // first two hinges active, third satisfied
            let thresholds = [1.0, 2.0, 1e-6];
            let eval = move |p: &[f64]| {
                view_variance_grad(&Array2::from_shape_vec((b, 3), p.to_vec()).expect("shape"), thresholds)
                    .expect("valid instance")
            };
            let grad = eval(&x).1.iter().copied().collect();
            Instance {
                f: Box::new(move |p| eval(p).0),
                x,
                grad,
            }
        }
        other => panic!("unknown grad-check op {other}"),
    }
}

/// Checks every op on `instances` random problems from `seed` at `tolerance`.
pub fn grad_check(seed: u64, instances: usize, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(seed, instances, tolerance, None)
}

/// As [`grad_check`]; `corrupt` names an op whose analytic gradient is
/// deliberately perturbed, to confirm the checker notices.
pub fn grad_check_with(seed: u64, instances: usize, tolerance: f64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let mut rows = Vec::with_capacity(GRAD_CHECK_OPS.len());
    for (k, op) in GRAD_CHECK_OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let mut inst = make_instance(op, &mut rng);
            if corrupt == Some(*op) {
                for g in inst.grad.iter_mut() {
                    *g = *g * 1.01 + 1e-3;
                }
            }
            let numeric = numeric_grad(&*inst.f, &inst.x);
            let err = relative_error(&inst.grad, &numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        rows.push(GradCheckRow {
            op: op.to_string(),
            max_rel_err: worst,
            instances,
            passed: worst <= tolerance,
        });
    }
    Ok(GradCheckReport { rows, tolerance })
}
