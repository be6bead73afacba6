//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use lh2face::depth_renderer::{CanvasSpec, Projected};

const PREC: usize = 320;
const RM: RoundingMode = RoundingMode::ToEven;

fn to_f64(v: &BigFloat, cc: &mut Consts) -> f64 {
    v.format(Radix::Dec, RM, cc).expect("format").parse().expect("decimal")
}

/// `ln I_α(x)` from the ascending series in 320-bit arithmetic.
/// `alpha` must be an integer or a half-integer.
pub fn log_bessel_oracle(alpha: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    let twice = (2.0 * alpha).round();
    assert_eq!(twice, 2.0 * alpha, "oracle handles integer and half-integer orders");
    let mut cc = Consts::new().expect("constants");
    let one = BigFloat::from_f64(1.0, PREC);
    let a = BigFloat::from_f64(alpha, PREC);
    let half_x = BigFloat::from_f64(x, PREC).div(&BigFloat::from_f64(2.0, PREC), PREC, RM);

    // Γ(α + 1)
    let mut gamma = one.clone();
    if twice as i64 % 2 == 0 {
        for k in 1..=(alpha as i64) {
            gamma = gamma.mul(&BigFloat::from_f64(k as f64, PREC), PREC, RM);
        }
    } else {
        gamma = cc.pi(PREC, RM).sqrt(PREC, RM);
        let mut j = 0.5;
        while j <= alpha {
            gamma = gamma.mul(&BigFloat::from_f64(j, PREC), PREC, RM);
            j += 1.0;
        }
    }

    let lead = if alpha == 0.0 {
        one.clone()
    } else {
        a.mul(&half_x.ln(PREC, RM, &mut cc), PREC, RM).exp(PREC, RM, &mut cc)
    };
    let mut term = lead.div(&gamma, PREC, RM);
    let mut sum = term.clone();
    let q = half_x.mul(&half_x, PREC, RM);
    let tiny = BigFloat::from_f64(1e-70, PREC);
    let mut m = 0u64;
    loop {
        let mf = BigFloat::from_f64((m + 1) as f64, PREC);
        let denom = mf.mul(&mf.add(&a, PREC, RM), PREC, RM);
        term = term.mul(&q, PREC, RM).div(&denom, PREC, RM);
        sum = sum.add(&term, PREC, RM);
        m += 1;
        if (m as f64) > x && term.div(&sum, PREC, RM).abs() < tiny {
            break;
        }
    }
    to_f64(&sum.ln(PREC, RM, &mut cc), &mut cc)
}

fn phi(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF by composite Simpson quadrature of the density.
pub fn normal_cdf_oracle(x: f64) -> f64 {
    if x > 0.0 {
        return 1.0 - normal_cdf_oracle(-x);
    }
    let lo = x - 14.0;
    let n = 40_000;
    let h = (x - lo) / n as f64;
    let mut s = phi(lo) + phi(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * phi(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// Nested-loop z-buffer: for each point and each disk offset, keep the
/// smaller depth. Returns `(depth, hits)` on the canvas, row-major.
pub fn reference_render(points: &[Projected], canvas: &CanvasSpec, radius: usize) -> Vec<f64> {
    let (hn, wn) = (canvas.h_new as i64, canvas.w_new as i64);
    let mut out = vec![f64::INFINITY; (hn * wn) as usize];
    let sx = (canvas.w_new - 1) as f64 / (canvas.x_max_g - canvas.x_min_g);
    let sy = (canvas.h_new - 1) as f64 / (canvas.y_max_g - canvas.y_min_g);
    let snap = |t: f64| {
        let r = t.round();
        if (t - r).abs() < 1e-9 {
            r as i64
        } else {
            t.floor() as i64
        }
    };
    let r = radius as i64;
    for p in points {
        if !p.valid {
            continue;
        }
        let col = snap((p.u + 0.5 - canvas.x_min_g) * sx + 0.5);
        let row = snap((p.v + 0.5 - canvas.y_min_g) * sy + 0.5);
        for di in -r..=r {
            for dj in -r..=r {
                if di * di + dj * dj > r * r {
                    continue;
                }
                let (i, j) = (row + di, col + dj);
                if i < 0 || j < 0 || i >= hn || j >= wn {
                    continue;
                }
                let cell = &mut out[(i * wn + j) as usize];
                if p.d < *cell {
                    *cell = p.d;
                }
            }
        }
    }
    out
}

/// Central differences of `f` at `x` with step `h · max(1, |x_i|)`.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Worst coordinate error relative to the largest numeric component.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
