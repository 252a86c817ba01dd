//! Composite Simpson quadrature on uniform grids.

use num_complex::Complex64;
use std::ops::{Add, Mul};

/// Composite Simpson weights applied to `values` sampled on a uniform grid of
/// spacing `h`. `values.len()` must be odd (an even number of intervals).
pub fn simpson<T>(values: &[T], h: f64) -> T
where
    T: Clone + Add<Output = T> + Mul<f64, Output = T>,
{
    let n = values.len();
    assert!(n >= 3 && n % 2 == 1, "Simpson needs an even number of intervals");
    let mut acc = values[0].clone() + values[n - 1].clone();
    for (k, v) in values.iter().enumerate().take(n - 1).skip(1) {
        acc = acc + v.clone() * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * (h / 3.0)
}

/// `∫₀ᵗ e^{a(t−u)} du` for real `a`, evaluated without cancellation for small `a·t`.
pub fn exp_integral(a: f64, t: f64) -> f64 {
    if a == 0.0 {
        t
    } else {
        (a * t).exp_m1() / a
    }
}

/// `∫₀ᵗ e^{z(t−u)} du = (e^{zt} − 1)/z` for complex `z`.
pub fn exp_integral_complex(z: Complex64, t: f64) -> Complex64 {
    let zt = z * t;
    if zt.norm() < 1e-5 {
        // Taylor: t·(1 + zt/2 + (zt)²/6 + (zt)³/24)
        let series = Complex64::new(1.0, 0.0) + zt / 2.0 + zt * zt / 6.0 + zt * zt * zt / 24.0;
        series * t
    } else {
        (zt.exp() - 1.0) / z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let h = 0.25;
        let xs: Vec<f64> = (0..=8).map(|k| k as f64 * h).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x - 2.0 * x + 1.0).collect();
        // ∫₀² x³ − 2x + 1 dx = 4 − 4 + 2
        assert!((simpson(&ys, h) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn exp_integrals_agree() {
        for &a in &[-2.0, -1e-9, 0.0, 1e-9, 0.7] {
            let z = Complex64::new(a, 0.0);
            let r = exp_integral(a, 1.5);
            let c = exp_integral_complex(z, 1.5);
            assert!((r - c.re).abs() < 1e-12 * r.abs().max(1.0), "{a}");
        }
        let z = Complex64::new(0.0, 1.0);
        let expect = (Complex64::new(0.0, 2.0).exp() - 1.0) / z;
        assert!((exp_integral_complex(z, 2.0) - expect).norm() < 1e-14);
    }
}
