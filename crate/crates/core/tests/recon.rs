mod common;

use common::{numeric_grad, rel_err};
use lh2face::depth_renderer::{DepthMap, RgbImage};
use lh2face::recon_losses::*;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::new(Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))).unwrap()
}

fn img_from(flat: &[f64], h: usize, w: usize) -> RgbImage {
    RgbImage {
        data: Array3::from_shape_vec((h, w, 3), flat.to_vec()).unwrap(),
    }
}

#[test]
fn laplace_gradients_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let i = image(h, w, &mut rng);
        let i_hat = image(h, w, &mut rng);
        let sigma = Array2::from_shape_fn((h, w), |_| rng.random_range(0.2..2.0));
        let mut mask = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.7));
        mask[(0, 0)] = true;
        let (_, d_img, d_sigma) = laplace_nll_grad(&i_hat, &i, &sigma, &mask).unwrap();
        let x = i_hat.data.as_slice().unwrap().to_vec();
        let f = |v: &[f64]| laplace_nll(&img_from(v, h, w), &i, &sigma, &mask).unwrap();
        assert!(
            rel_err(d_img.as_slice().unwrap(), &numeric_grad(&f, &x, 1e-6)) < 1e-4,
            "seed {seed}"
        );
        let s = sigma.as_slice().unwrap().to_vec();
        let g =
            |v: &[f64]| laplace_nll(&i_hat, &i, &Array2::from_shape_vec((h, w), v.to_vec()).unwrap(), &mask).unwrap();
        assert!(
            rel_err(d_sigma.as_slice().unwrap(), &numeric_grad(&g, &s, 1e-6)) < 1e-4,
            "seed {seed}"
        );
    }
}

#[test]
fn perceptual_gradients_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let ex = PerceptualExtractor::new(h, w, seed);
        let i = image(h, w, &mut rng);
        let i_hat = image(h, w, &mut rng);
        let fs = Array1::from_shape_fn(PerceptualExtractor::FEATURES, |_| rng.random_range(0.3..2.0));
        let (_, d_img, d_sigma) = perceptual_nll_grad(&i_hat, &i, &ex, &fs).unwrap();
        let x = i_hat.data.as_slice().unwrap().to_vec();
        let f = |v: &[f64]| perceptual_nll(&img_from(v, h, w), &i, &ex, &fs).unwrap();
        assert!(
            rel_err(d_img.as_slice().unwrap(), &numeric_grad(&f, &x, 1e-6)) < 1e-4,
            "seed {seed}"
        );
        let s = fs.to_vec();
        let g = |v: &[f64]| perceptual_nll(&i_hat, &i, &ex, &Array1::from(v.to_vec())).unwrap();
        assert!(
            rel_err(d_sigma.as_slice().unwrap(), &numeric_grad(&g, &s, 1e-6)) < 1e-4,
            "seed {seed}"
        );
    }
}

#[test]
fn smoothness_gradient_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (h, w) = (rng.random_range(1..7), rng.random_range(2..7));
        let values = Array2::from_shape_fn((h, w), |_| rng.random_range(1.0..5.0));
        let valid = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.8));
        let (_, grad) = smoothness_grad(&values, &valid, 3.0);
        let x = values.as_slice().unwrap().to_vec();
        let f = |v: &[f64]| smoothness_grad(&Array2::from_shape_vec((h, w), v.to_vec()).unwrap(), &valid, 3.0).0;
        let n = numeric_grad(&f, &x, 1e-6);
        if n.iter().all(|v| *v == 0.0) {
            assert!(grad.iter().all(|v| *v == 0.0));
            continue;
        }
        assert!(rel_err(grad.as_slice().unwrap(), &n) < 1e-4, "seed {seed}");
    }
}

#[test]
fn view_variance_gradient_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let b = rng.random_range(2..10);
        let views = Array2::from_shape_fn((b, 3), |_| rng.random_range(-0.3..0.3));
        let t = [0.05, 0.2, 0.05];
        let (_, grad) = view_variance_grad(&views, t).unwrap();
        let x = views.as_slice().unwrap().to_vec();
        let f = |v: &[f64]| view_variance_loss(&Array2::from_shape_vec((b, 3), v.to_vec()).unwrap(), t).unwrap();
        let n = numeric_grad(&f, &x, 1e-6);
        assert!(rel_err(grad.as_slice().unwrap(), &n) < 1e-4, "seed {seed}");
    }
}

#[test]
fn trivial_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let i = image(6, 5, &mut rng);
    let sigma = Array2::from_elem((6, 5), 1.0 / 2f64.sqrt());
    let mask = Array2::from_elem((6, 5), true);
    assert!(laplace_nll(&i, &i, &sigma, &mask).unwrap().abs() < 1e-15);
    let flat = DepthMap::new(Array2::from_elem((6, 5), 3.5)).unwrap();
    assert_eq!(smoothness_loss(&flat), 0.0);
    let t = train_total(1.0, 1.0, 1.0, 1.0, &TrainWeights::default());
    assert!((t.total - 1.012).abs() < 1e-15);
    let views = Array2::from_elem((4, 3), 0.2);
    assert!((view_variance_loss(&views, [0.1; 3]).unwrap() - 0.3).abs() < 1e-15);
}

#[test]
fn reco_total_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w) = (5, 4);
    let i = image(h, w, &mut rng);
    let i_hat = image(h, w, &mut rng);
    let inputs = ReconInputs {
        i_hat_flip: i_hat.flip_horizontal(),
        i_hat,
        i,
        mask: Array2::from_elem((h, w), true),
        sigma: Array2::from_shape_fn((h, w), |_| rng.random_range(0.3..1.5)),
        depth: DepthMap::new(Array2::from_shape_fn((h, w), |_| rng.random_range(1.0..3.0))).unwrap(),
        views: Array2::zeros((2, 3)),
        feature_sigma: Array1::from_elem(PerceptualExtractor::FEATURES, 0.7),
    };
    let ex = PerceptualExtractor::new(h, w, 3);
    let wts = ReconWeights {
        lambda_flip: 0.3,
        lambda_perc: 2.0,
        lambda_smooth: 0.7,
    };
    let r = reco_total(&inputs, &ex, &wts).unwrap();
    let want = laplace_nll(&inputs.i_hat, &inputs.i, &inputs.sigma, &inputs.mask).unwrap()
        + 0.3 * laplace_nll(&inputs.i_hat_flip, &inputs.i, &inputs.sigma, &inputs.mask).unwrap()
        + 2.0
            * (perceptual_nll(&inputs.i_hat, &inputs.i, &ex, &inputs.feature_sigma).unwrap()
                + 0.3 * perceptual_nll(&inputs.i_hat_flip, &inputs.i, &ex, &inputs.feature_sigma).unwrap())
        + 0.7 * smoothness_loss(&inputs.depth);
    assert_eq!(r.total, want);
    let only_smooth = ReconWeights {
        lambda_flip: 0.0,
        lambda_perc: 0.0,
        lambda_smooth: 0.7,
    };
    let r = reco_total(&inputs, &ex, &only_smooth).unwrap();
    assert_eq!(r.total, r.terms["laplace"] + 0.7 * smoothness_loss(&inputs.depth));
}

#[test]
fn extractor_is_deterministic_with_unit_rows() {
    let a = PerceptualExtractor::new(4, 3, 11);
    let b = PerceptualExtractor::new(4, 3, 11);
    assert_eq!(a, b);
    for row in a.weights.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
    assert_ne!(a, PerceptualExtractor::new(4, 3, 12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nlls_translation_invariant(seed in 0u64..100_000, shift in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4, 3);
        let i = image(h, w, &mut rng);
        let i_hat = image(h, w, &mut rng);
        let sigma = Array2::from_shape_fn((h, w), |_| rng.random_range(0.2..2.0));
        let mask = Array2::from_elem((h, w), true);
        let a = laplace_nll(&i_hat, &i, &sigma, &mask).unwrap();
        let si = RgbImage { data: &i.data + shift };
        let sh = RgbImage { data: &i_hat.data + shift };
        let b = laplace_nll(&sh, &si, &sigma, &mask).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let ex = PerceptualExtractor::new(h, w, seed);
        let fs = Array1::from_elem(PerceptualExtractor::FEATURES, 0.8);
        let pa = perceptual_nll(&i_hat, &i, &ex, &fs).unwrap();
        let pb = perceptual_nll(&sh, &si, &ex, &fs).unwrap();
        prop_assert!((pa - pb).abs() < 1e-9);
        prop_assert!(a >= laplace_nll(&i, &i, &sigma, &mask).unwrap());
    }

    #[test]
    fn laplace_flip_consistent(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (3, 5);
        let i = image(h, w, &mut rng);
        let i_hat = image(h, w, &mut rng);
        let sigma = Array2::from_shape_fn((h, w), |_| rng.random_range(0.2..2.0));
        let mut mask = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.6));
        mask[(1, 1)] = true;
        let a = laplace_nll(&i_hat, &i, &sigma, &mask).unwrap();
        let b = laplace_nll(&i_hat.flip_horizontal(), &i.flip_horizontal(), &flip_map(&sigma), &flip_map(&mask)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn smoothness_invariant_under_range_preserving_affine(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((5, 6), |_| rng.random_range(1.0..9.0));
        let d = DepthMap::new(v.clone()).unwrap();
        let (lo, hi) = (d.min_depth(), d.max_depth());
        // the reflection d -> lo + hi - d maps [lo, hi] onto itself
        let r = DepthMap::new(v.mapv(|x| lo + hi - x)).unwrap();
        prop_assert!((smoothness_loss(&d) - smoothness_loss(&r)).abs() < 1e-12);
        let s = DepthMap::new(v.mapv(|x| 3.0 * x + 1.0)).unwrap();
        prop_assert!((smoothness_loss(&d) - smoothness_loss(&s)).abs() < 1e-12);
    }
}
