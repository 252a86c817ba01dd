//! Branching and immigration mechanisms, the Laplace-exponent flow
//! `∂ₜv = −φ(v)`, `v(0) = λ`, and the Laplace transform of the semigroup.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::quad::simpson;

/// Undershoot below zero that is attributed to the integrator and clamped away.
pub const CLAMP_TOL: f64 = 1e-12;
/// Largest relative change tolerated when the step is halved.
pub const HALVING_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    /// Fixed RK4 step; the ψ-integral uses composite Simpson on the same grid.
    pub step: f64,
    /// Re-solve at `step / 2` and fail if the answer moves by more than [`HALVING_TOL`].
    pub halving_check: bool,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            halving_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    /// `v(t, λ)`
    pub v_t: Vec<f64>,
    /// `∫₀ᵗ ψ(v(s, λ)) ds`
    pub psi_integral: f64,
    /// Uniform grid the flow was integrated on.
    pub grid: Vec<f64>,
    /// Relative change against the half-step solve, when that check ran.
    pub halving_change: Option<f64>,
}

fn check_cone(lam: &[f64], what: &str) -> Result<()> {
    if let Some((i, x)) = lam.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Domain(format!(
            "{what}: argument component {i} = {x} is not in the non-negative cone"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `φ_i(λ) = c_i λ_i² − ⟨B e_i, λ⟩ + Σ rate·(e^{−⟨λ,z⟩} − 1 + λ_i (1 ∧ z_i))` without domain checks.
fn phi_into(params: &ModelParams, lam: &[f64], out: &mut [f64]) {
    let d = params.d;
    for i in 0..d {
        let mut acc = params.c[i] * lam[i] * lam[i];
        for (k, l) in lam.iter().enumerate() {
            acc -= params.b[(k, i)] * l;
        }
        for atom in &params.mu[i].atoms {
            let e = (-dot(lam, &atom.jump)).exp_m1();
            acc += atom.rate * (e + lam[i] * atom.jump[i].min(1.0));
        }
        out[i] = acc;
    }
}

fn psi_unchecked(params: &ModelParams, lam: &[f64]) -> f64 {
    let mut acc = dot(&params.beta, lam);
    for atom in &params.nu.atoms {
        acc -= atom.rate * (-dot(lam, &atom.jump)).exp_m1();
    }
    acc
}

/// The branching mechanism `φ(λ)`, built from `B` (not `B̃`).
pub fn branching_mechanism(params: &ModelParams, lam: &[f64]) -> Result<Vec<f64>> {
    check_cone(lam, "branching mechanism")?;
    let mut out = vec![0.0; params.d];
    phi_into(params, lam, &mut out);
    Ok(out)
}

/// The immigration mechanism `ψ(λ) = ⟨β, λ⟩ + Σ rate·(1 − e^{−⟨λ,r⟩})`.
pub fn immigration_mechanism(params: &ModelParams, lam: &[f64]) -> Result<f64> {
    check_cone(lam, "immigration mechanism")?;
    Ok(psi_unchecked(params, lam))
}

fn integrate(params: &ModelParams, lam: &[f64], t: f64, step: f64) -> Result<FlowResult> {
    let d = params.d;
    // Even number of steps so the Simpson rule closes on the grid.
    let mut n = (t / step).ceil() as usize;
    n = n.max(2);
    n += n % 2;
    let h = t / n as f64;

    let mut v = lam.to_vec();
    let mut psi = Vec::with_capacity(n + 1);
    psi.push(psi_unchecked(params, &v));
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];

    for step_index in 0..n {
        phi_into(params, &v, &mut k1);
        for i in 0..d {
            tmp[i] = v[i] - 0.5 * h * k1[i];
        }
        phi_into(params, &tmp, &mut k2);
        for i in 0..d {
            tmp[i] = v[i] - 0.5 * h * k2[i];
        }
        phi_into(params, &tmp, &mut k3);
        for i in 0..d {
            tmp[i] = v[i] - h * k3[i];
        }
        phi_into(params, &tmp, &mut k4);
        let time = (step_index + 1) as f64 * h;
        for i in 0..d {
            v[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !v[i].is_finite() {
                return Err(Error::BlowUp { time });
            }
            if v[i] < 0.0 {
                if v[i] < -CLAMP_TOL {
                    return Err(Error::FlowLeftCone {
                        time,
                        component: i,
                        value: v[i],
                    });
                }
                v[i] = 0.0;
            }
        }
        psi.push(psi_unchecked(params, &v));
    }

    Ok(FlowResult {
        v_t: v,
        psi_integral: simpson(&psi, h),
        grid: (0..=n).map(|k| k as f64 * h).collect(),
        halving_change: None,
    })
}

fn relative_change(a: &FlowResult, b: &FlowResult) -> f64 {
    let dv: f64 = a.v_t.iter().zip(&b.v_t).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = b.v_t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dpsi = (a.psi_integral - b.psi_integral).abs();
    let rel = |delta: f64, size: f64| if delta == 0.0 { 0.0 } else { delta / size.max(1e-300) };
    rel(dv, nv).max(rel(dpsi, b.psi_integral.abs()))
}

/// Solves `∂ₜv = −φ(v)`, `v(0) = λ` by classical RK4 with a fixed step and
/// integrates `ψ(v(s, λ))` by composite Simpson on the same grid.
pub fn solve_v(params: &ModelParams, lam: &[f64], t: f64, cfg: &OdeConfig) -> Result<FlowResult> {
    check_cone(lam, "flow")?;
    if lam.len() != params.d {
        return Err(Error::Domain(format!("λ has length {}, expected {}", lam.len(), params.d)));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("flow horizon must be non-negative, got {t}")));
    }
    if !(cfg.step.is_finite() && cfg.step > 0.0) {
        return Err(Error::Domain(format!("ODE step must be positive, got {}", cfg.step)));
    }
    if t == 0.0 {
        return Ok(FlowResult {
            v_t: lam.to_vec(),
            psi_integral: 0.0,
            grid: vec![0.0],
            halving_change: None,
        });
    }
    let coarse = integrate(params, lam, t, cfg.step)?;
    if !cfg.halving_check {
        return Ok(coarse);
    }
    let mut fine = integrate(params, lam, t, cfg.step / 2.0)?;
    let change = relative_change(&coarse, &fine);
    if change > HALVING_TOL {
        return Err(Error::StepHalving {
            change,
            limit: HALVING_TOL,
        });
    }
    fine.halving_change = Some(change);
    Ok(fine)
}

/// `E_x e^{−⟨λ, X_t⟩} = exp(−⟨x, v(t,λ)⟩ − ∫₀ᵗ ψ(v(s,λ)) ds)`.
pub fn laplace_transform(params: &ModelParams, x: &[f64], lam: &[f64], t: f64, cfg: &OdeConfig) -> Result<f64> {
    check_cone(x, "Laplace transform initial state")?;
    let flow = solve_v(params, lam, t, cfg)?;
    Ok((-dot(x, &flow.v_t) - flow.psi_integral).exp())
}

/// `‖v(r, v(s, λ)) − v(r + s, λ)‖`.
pub fn flow_defect(params: &ModelParams, lam: &[f64], r: f64, s: f64, cfg: &OdeConfig) -> Result<f64> {
    let inner = solve_v(params, lam, s, cfg)?;
    let composed = solve_v(params, &inner.v_t, r, cfg)?;
    let direct = solve_v(params, lam, r + s, cfg)?;
    Ok(composed
        .v_t
        .iter()
        .zip(&direct.v_t)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Relative defect of
/// `exp(−∫₀ᵗ ψ(v(s,λ)) ds) · L(x, T, v(t,λ)) = L(x, t+T, λ)`,
/// where `L` is the Laplace transform of the full model.
pub fn decomposition_defect(
    params: &ModelParams,
    x: &[f64],
    lam: &[f64],
    t: f64,
    horizon: f64,
    cfg: &OdeConfig,
) -> Result<f64> {
    let head = solve_v(params, lam, t, cfg)?;
    let lhs = (-head.psi_integral).exp() * laplace_transform(params, x, &head.v_t, horizon, cfg)?;
    let rhs = laplace_transform(params, x, lam, t + horizon, cfg)?;
    Ok((lhs - rhs).abs() / rhs)
}
