mod common;

use common::{log_bessel_oracle, logspace, numeric_grad, rel_err};
use lh2face::sphere_math::{log_bessel_i, vmf_log_pdf, vmf_similarity, vmf_similarity_grad, VmfParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[test]
fn oracle_reproduces_known_value() {
    assert!((log_bessel_oracle(0.0, 1.0) - 1.2660658777520082f64.ln()).abs() < 1e-15);
}

#[test]
fn bessel_grid_against_oracle() {
    let mut worst = 0.0f64;
    for &alpha in &[0.0, 0.5, 1.0, 63.0, 127.0, 255.0] {
        for x in logspace(1e-3, 500.0, 30) {
            let want = log_bessel_oracle(alpha, x);
            let got = log_bessel_i(alpha, x).unwrap().log_value;
            let err = (got - want).abs();
            assert!(
                err <= 1e-10 * want.abs() + 1e-12,
                "alpha={alpha} x={x}: {got} vs {want}"
            );
            worst = worst.max(err / want.abs().max(1e-300));
        }
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn bessel_spot_values() {
    let e = log_bessel_i(0.0, 1.0).unwrap();
    assert!((e.log_value - 0.235914).abs() < 1e-6);
    let want = log_bessel_oracle(127.0, 300.0);
    let got = log_bessel_i(127.0, 300.0).unwrap().log_value;
    assert!((got - want).abs() <= 1e-12 * want.abs());
}

#[test]
fn ratio_matches_oracle() {
    for &(alpha, x) in &[(0.0, 2.0), (15.0, 20.0), (127.0, 20.0), (255.0, 400.0)] {
        let want = (log_bessel_oracle(alpha + 1.0, x) - log_bessel_oracle(alpha, x)).exp();
        let got = log_bessel_i(alpha, x).unwrap().ratio_next;
        assert!((got - want).abs() < 1e-10 * want, "{alpha} {x}: {got} {want}");
    }
}

#[test]
fn n3_normalizer_closed_form() {
    let mu = vec![0.0, 0.0, 1.0];
    for kappa in [0.1, 1.0, 5.0, 40.0] {
        let p = VmfParams::new(mu.clone(), kappa, 3).unwrap();
        let got = vmf_log_pdf(&mu, &p).unwrap();
        let want = kappa + (kappa / (4.0 * PI * kappa.sinh())).ln();
        assert!((got - want).abs() < 1e-8);
    }
    let p = VmfParams::new(mu.clone(), 1.0, 3).unwrap();
    assert!((vmf_log_pdf(&mu, &p).unwrap() + 1.69255).abs() < 1e-3);
}

#[test]
fn n2_density_integrates_to_one() {
    for kappa in [0.01, 1.0, 7.5, 50.0] {
        let p = VmfParams::new(vec![1.0, 0.0], kappa, 2).unwrap();
        let m = 20_000;
        let h = 2.0 * PI / m as f64;
        // trapezoid rule is spectrally accurate for periodic integrands
        let total: f64 = (0..m)
            .map(|i| {
                let t = i as f64 * h;
                vmf_log_pdf(&[t.cos(), t.sin()], &p).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-8, "kappa={kappa}: {total}");
    }
}

#[test]
fn similarity_matches_oracle_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 256;
    for _ in 0..10 {
        let d = 16;
        let mut proxy: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = proxy.iter().map(|v| v * v).sum::<f64>().sqrt();
        proxy.iter_mut().for_each(|v| *v /= norm);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-8.0..8.0)).collect();
        let kappa = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = proxy.iter().zip(&z).map(|(a, b)| a * b).sum();
        let nh = n as f64 / 2.0;
        let want = dot + (nh - 1.0) * kappa.ln() - nh * (2.0 * PI).ln() - log_bessel_oracle(nh - 1.0, kappa);
        let got = vmf_similarity(&proxy, &z, n).unwrap();
        assert!((got - want).abs() <= 1e-10 * want.abs(), "{got} {want}");
    }
}

#[test]
fn similarity_gradient_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=12);
        let n = rng.random_range(2..=300);
        let mut proxy: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = proxy.iter().map(|v| v * v).sum::<f64>().sqrt();
        proxy.iter_mut().for_each(|v| *v /= norm);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let g = vmf_similarity_grad(&proxy, &z, n).unwrap();
        let fz = |p: &[f64]| vmf_similarity(&proxy, p, n).unwrap();
        let fp = |p: &[f64]| vmf_similarity(p, &z, n).unwrap();
        assert!(rel_err(&g.d_z, &numeric_grad(&fz, &z, 1e-5)) < 1e-6, "seed {seed}");
        assert!(
            rel_err(&g.d_proxy, &numeric_grad(&fp, &proxy, 1e-5)) < 1e-6,
            "seed {seed}"
        );
    }
}
