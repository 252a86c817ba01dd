//! First moments `E X_t` and second moments of the projections `⟨v, X_t⟩` on
//! left eigenvectors of `B̃`, with their large-time normalisation and limit.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{project, ModelParams};
use crate::quad::{exp_integral, exp_integral_complex, simpson};
use crate::spectral::{matrix_exponential, SpectralData};

/// Relative change between successive grid doublings at which quadratures stop refining.
const QUAD_TOL: f64 = 1e-12;
const MIN_INTERVALS: usize = 32;
const MAX_INTERVALS: usize = 1 << 20;

fn mat_vec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (a * DVector::from_column_slice(x)).iter().copied().collect()
}

fn rel_change(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let size = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if diff == 0.0 {
        0.0
    } else {
        diff / size.max(f64::MIN_POSITIVE)
    }
}

/// `∫₀ᵗ e^{uA} b du` on `n` Simpson intervals, sampling `e^{uA}b` by powers of `e^{hA}`.
fn simpson_exp_integral(a: &DMatrix<f64>, b: &[f64], t: f64, n: usize) -> Result<Vec<f64>> {
    let h = t / n as f64;
    let step = matrix_exponential(a, h)?;
    let mut samples = Vec::with_capacity(n + 1);
    let mut y = DVector::from_column_slice(b);
    samples.push(y.clone());
    for _ in 0..n {
        y = &step * y;
        samples.push(y.clone());
    }
    Ok(simpson(&samples, h).iter().copied().collect())
}

/// `e^{tA} x + ∫₀ᵗ e^{uA} b du`, the integral by composite Simpson refined until
/// successive doublings agree to [`QUAD_TOL`].
pub fn affine_flow(a: &DMatrix<f64>, b: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be non-negative, got {t}")));
    }
    let mut out = mat_vec(&matrix_exponential(a, t)?, x);
    if t == 0.0 || b.iter().all(|&v| v == 0.0) {
        return Ok(out);
    }
    let mut n = MIN_INTERVALS;
    let mut prev = simpson_exp_integral(a, b, t, n)?;
    loop {
        n *= 2;
        let next = simpson_exp_integral(a, b, t, n)?;
        let done = rel_change(&prev, &next) <= QUAD_TOL || n >= MAX_INTERVALS;
        prev = next;
        if done {
            break;
        }
    }
    for (o, p) in out.iter_mut().zip(&prev) {
        *o += p;
    }
    Ok(out)
}

/// `E(X_t | X₀ = x₀) = e^{tB̃}x₀ + ∫₀ᵗ e^{uB̃}β̃ du`.
pub fn mean_vector(params: &ModelParams, spectral: &SpectralData, t: f64) -> Result<Vec<f64>> {
    mean_from(spectral, &params.x0, t)
}

pub(crate) fn mean_from(spectral: &SpectralData, x: &[f64], t: f64) -> Result<Vec<f64>> {
    affine_flow(&spectral.b_tilde, &spectral.beta_tilde, x, t)
}

/// `E X_{kh}` for `k = 0..=n`, propagated by `m ← e^{hB̃} m + ∫₀ʰ e^{uB̃}β̃ du`.
fn mean_path(params: &ModelParams, spectral: &SpectralData, h: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    let d = params.d;
    let step = matrix_exponential(&spectral.b_tilde, h)?;
    let inflow = affine_flow(&spectral.b_tilde, &spectral.beta_tilde, &vec![0.0; d], h)?;
    let mut path = Vec::with_capacity(n + 1);
    let mut m = params.x0.clone();
    path.push(m.clone());
    for _ in 0..n {
        m = mat_vec(&step, &m);
        for (mi, g) in m.iter_mut().zip(&inflow) {
            *mi += g;
        }
        path.push(m.clone());
    }
    Ok(path)
}

/// `I_{λ,ℓ}(t) = ∫₀ᵗ e^{2Re(λ)(t−u)} E(X_{u,ℓ}) du` for every `ℓ`, on a refined Simpson grid.
fn weighted_mean_integrals(params: &ModelParams, spectral: &SpectralData, re_lambda: f64, t: f64) -> Result<Vec<f64>> {
    let d = params.d;
    if t == 0.0 {
        return Ok(vec![0.0; d]);
    }
    let eval = |n: usize| -> Result<Vec<f64>> {
        let h = t / n as f64;
        let path = mean_path(params, spectral, h, n)?;
        Ok((0..d)
            .map(|l| {
                let f: Vec<f64> = path
                    .iter()
                    .enumerate()
                    .map(|(k, m)| (2.0 * re_lambda * (t - k as f64 * h)).exp() * m[l])
                    .collect();
                simpson(&f, h)
            })
            .collect())
    };
    let mut n = MIN_INTERVALS * 2;
    let mut prev = eval(n)?;
    loop {
        n *= 2;
        let next = eval(n)?;
        let done = rel_change(&prev, &next) <= 1e-10 || n >= MAX_INTERVALS;
        prev = next;
        if done {
            return Ok(prev);
        }
    }
}

/// `E|⟨v, X_t⟩|²` split into its additive parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondMomentBreakdown {
    pub t: f64,
    pub total: f64,
    /// `E_{v,λ}(t) = |e^{λt}⟨v,x₀⟩ + ⟨v,β̃⟩∫₀ᵗe^{λ(t−u)}du|²`
    pub e_term: f64,
    /// `C_{v,ℓ}·I_{λ,ℓ}(t)` per type.
    pub i_terms: Vec<f64>,
    /// `I_λ(t)·∫|⟨v,r⟩|²ν(dr)`
    pub nu_term: f64,
    /// `C_{v,ℓ} = 2|v_ℓ|²c_ℓ + ∫|⟨v,z⟩|²μ_ℓ(dz)`
    pub c_coeffs: Vec<f64>,
}

fn c_coeffs(params: &ModelParams, v: &[Complex64]) -> Vec<f64> {
    (0..params.d)
        .map(|l| 2.0 * v[l].norm_sqr() * params.c[l] + params.mu[l].projected_second_moment(v))
        .collect()
}

/// Second moment of the projection of `X_t` on the left eigenvector `spectral.eigen[pair_index]`.
pub fn second_moment_projection(
    params: &ModelParams,
    spectral: &SpectralData,
    pair_index: usize,
    t: f64,
) -> Result<SecondMomentBreakdown> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be non-negative, got {t}")));
    }
    let pair = spectral.pair(pair_index)?;
    let (lambda, v) = (pair.lambda, &pair.v);

    let vx = project(v, &params.x0);
    let vb = project(v, &spectral.beta_tilde);
    let e_term = ((lambda * t).exp() * vx + vb * exp_integral_complex(lambda, t)).norm_sqr();

    let c = c_coeffs(params, v);
    let integrals = weighted_mean_integrals(params, spectral, lambda.re, t)?;
    let i_terms: Vec<f64> = c.iter().zip(&integrals).map(|(c, i)| c * i).collect();
    let nu_term = exp_integral(2.0 * lambda.re, t) * params.nu.projected_second_moment(v);

    Ok(SecondMomentBreakdown {
        t,
        total: e_term + i_terms.iter().sum::<f64>() + nu_term,
        e_term,
        i_terms,
        nu_term,
        c_coeffs: c,
    })
}

/// Position of `Re λ` relative to `s(B̃)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BelowHalf,
    AtHalf,
    AboveHalf,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::BelowHalf => "below_half",
            Regime::AtHalf => "at_half",
            Regime::AboveHalf => "above_half",
        }
    }
}

/// `lim h(t)·E|⟨v, X_t⟩|² = M₂` for a supercritical irreducible process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticLimit {
    pub regime: Regime,
    pub h_description: &'static str,
    pub m2: f64,
    pub s: f64,
    pub re_lambda: f64,
}

impl AsymptoticLimit {
    /// The normaliser `h(t)`.
    pub fn h(&self, t: f64) -> f64 {
        match self.regime {
            Regime::BelowHalf => (-self.s * t).exp(),
            Regime::AtHalf => (-self.s * t).exp() / t,
            Regime::AboveHalf => (-2.0 * self.re_lambda * t).exp(),
        }
    }
}

/// Tolerance for deciding `Re λ = s/2`.
const REGIME_TOL: f64 = 1e-10;

pub fn regime_of(re_lambda: f64, s: f64) -> Regime {
    let gap = re_lambda - s / 2.0;
    if gap.abs() <= REGIME_TOL * s.abs().max(1.0) {
        Regime::AtHalf
    } else if gap < 0.0 {
        Regime::BelowHalf
    } else {
        Regime::AboveHalf
    }
}

pub fn second_moment_limit(params: &ModelParams, spectral: &SpectralData, pair_index: usize) -> Result<AsymptoticLimit> {
    if !spectral.is_supercritical() {
        return Err(Error::Precondition(format!(
            "second-moment asymptotics need a supercritical process, but s(B̃) = {} ({})",
            spectral.s, spectral.class
        )));
    }
    let pair = spectral.pair(pair_index)?;
    let (lambda, v) = (pair.lambda, &pair.v);
    let s = spectral.s;
    let re = lambda.re;
    let regime = regime_of(re, s);
    let c = c_coeffs(params, v);

    let perron_weight = || {
        let ux: f64 = spectral.u_left.iter().zip(&params.x0).map(|(a, b)| a * b).sum();
        let ub: f64 = spectral.u_left.iter().zip(&spectral.beta_tilde).map(|(a, b)| a * b).sum();
        let cu: f64 = c.iter().zip(&spectral.u_right).map(|(a, b)| a * b).sum();
        (ux + ub / s) * cu
    };

    let (m2, h_description) = match regime {
        Regime::BelowHalf => (perron_weight() / (s - 2.0 * re), "exp(-s t)"),
        Regime::AtHalf => (perron_weight(), "t^-1 exp(-s t)"),
        Regime::AboveHalf => {
            let vx = project(v, &params.x0);
            let vb = project(v, &spectral.beta_tilde);
            let head = (vx + vb / lambda).norm_sqr();
            let nu = params.nu.projected_second_moment(v) / (2.0 * re);
            let d = params.d;
            let shifted = DMatrix::<f64>::identity(d, d) * (2.0 * re) - &spectral.b_tilde;
            let rhs = DVector::from_iterator(
                d,
                params.x0.iter().zip(&spectral.beta_tilde).map(|(x, b)| x + b / (2.0 * re)),
            );
            let sol = shifted
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Domain("2Re(λ)I − B̃ is singular".into()))?;
            let tail: f64 = c.iter().zip(sol.iter()).map(|(c, y)| c * y).sum();
            (head + nu + tail, "exp(-2 Re(lambda) t)")
        }
    };
    Ok(AsymptoticLimit {
        regime,
        h_description,
        m2,
        s,
        re_lambda: re,
    })
}
