//! The mean matrix `B̃`, the immigration mean `β̃`, matrix exponentials and
//! the Perron/left-eigen structure of `B̃`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Relative tolerance of the eigen-solver residual checks.
pub const EIGEN_TOL: f64 = 1e-10;

/// `B̃` and `β̃`: `b̃_ij = b_ij + ∫ (z_i − δ_ij)⁺ μ_j(dz)`, `β̃ = β + ∫ r ν(dr)`.
pub fn build_mean_params(params: &ModelParams) -> (DMatrix<f64>, Vec<f64>) {
    let d = params.d;
    let b_tilde = DMatrix::from_fn(d, d, |i, j| params.b[(i, j)] + params.mu[j].truncated_positive(i, j));
    let nu_mean = params.nu.first_moment(d);
    let beta_tilde = params.beta.iter().zip(&nu_mean).map(|(b, m)| b + m).collect();
    (b_tilde, beta_tilde)
}

// Padé [13/13] coefficients and the θ₁₃ bound of Higham's scaling-and-squaring method.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(t·A)` by scaling and squaring with a [13/13] Padé approximant.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Domain(format!("matrix is {}x{}, not square", n, a.ncols())));
    }
    if !t.is_finite() || a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("matrix exponential of non-finite input".into()));
    }
    let id = DMatrix::<f64>::identity(n, n);
    if t == 0.0 || n == 0 {
        return Ok(id);
    }
    let mut x = a * t;
    let nrm = norm1(&x);
    let squarings = if nrm > THETA13 {
        (nrm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    if squarings > 0 {
        x /= 2f64.powi(squarings);
    }

    let b = &PADE13;
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let u_inner = &x6 * (&x6 * b[13] + &x4 * b[11] + &x2 * b[9]) + &x6 * b[7] + &x4 * b[5] + &x2 * b[3] + &id * b[1];
    let u = &x * u_inner;
    let v = &x6 * (&x6 * b[12] + &x4 * b[10] + &x2 * b[8]) + &x6 * b[6] + &x4 * b[4] + &x2 * b[2] + &id * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::Domain("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("matrix exponential overflowed".into()));
    }
    Ok(r)
}

/// Irreducibility as strong connectivity of the graph with an edge `j → i`
/// whenever `A[i][j] > 0`, `i ≠ j`. A 1×1 matrix is irreducible.
pub fn is_irreducible(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(j) = stack.pop() {
            for i in 0..n {
                let w = if forward { a[(i, j)] } else { a[(j, i)] };
                if i != j && w > 0.0 && !seen[i] {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criticality::Subcritical => "subcritical",
            Criticality::Critical => "critical",
            Criticality::Supercritical => "supercritical",
        })
    }
}

/// A left eigenpair `vᵀB̃ = λvᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenPair {
    pub lambda: Complex64,
    pub v: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub b_tilde: DMatrix<f64>,
    pub beta_tilde: Vec<f64>,
    /// `s(B̃)`, the largest real part of the spectrum.
    pub s: f64,
    /// Right Perron vector `ũ`, `Σ ũ_i = 1`.
    pub u_right: Vec<f64>,
    /// Left Perron vector `u`, `ũᵀu = 1`.
    pub u_left: Vec<f64>,
    /// Left eigenpairs sorted by descending real part; the Perron pair first.
    pub eigen: Vec<EigenPair>,
    pub irreducible: bool,
    pub class: Criticality,
}

impl SpectralData {
    /// Mean data and spectral structure of an (admissible) model.
    pub fn from_model(params: &ModelParams) -> Result<Self> {
        let (b_tilde, beta_tilde) = build_mean_params(params);
        perron_and_classify(&b_tilde, &beta_tilde)
    }

    pub fn d(&self) -> usize {
        self.b_tilde.nrows()
    }

    pub fn pair(&self, index: usize) -> Result<&EigenPair> {
        self.eigen.get(index).ok_or_else(|| {
            Error::Domain(format!(
                "eigenpair index {index} out of range (d = {})",
                self.eigen.len()
            ))
        })
    }

    pub fn is_supercritical(&self) -> bool {
        self.class == Criticality::Supercritical
    }

    pub fn summary(&self) -> serde_json::Value {
        let d = self.d();
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| self.b_tilde[(i, j)]).collect())
            .collect();
        serde_json::json!({
            "b_tilde": rows,
            "beta_tilde": self.beta_tilde,
            "s": self.s,
            "u_right": self.u_right,
            "u_left": self.u_left,
            "eigen": self.eigen,
            "irreducible": self.irreducible,
            "class": self.class,
        })
    }
}

fn scale_of(a: &DMatrix<f64>) -> f64 {
    a.norm().max(1.0)
}

/// Null vector of a real matrix: the right singular vector of the smallest singular value.
fn real_null_vector(m: DMatrix<f64>) -> (DVector<f64>, f64) {
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (k, sigma) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    (v_t.row(k).transpose(), sigma)
}

/// Perron root, Perron vectors, eigen list and criticality class of `B̃`.
pub fn perron_and_classify(b_tilde: &DMatrix<f64>, beta_tilde: &[f64]) -> Result<SpectralData> {
    let d = b_tilde.nrows();
    if d == 0 || b_tilde.ncols() != d {
        return Err(Error::Domain("mean matrix must be square and non-empty".into()));
    }
    if b_tilde.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("mean matrix has non-finite entries".into()));
    }
    if !is_irreducible(b_tilde) {
        return Err(Error::NotIrreducible);
    }
    let eigen = left_eigenpairs(b_tilde)?;
    let s = eigen[0].lambda.re;
    let id = DMatrix::<f64>::identity(d, d);

    let (mut right, _) = real_null_vector(b_tilde - &id * s);
    let (mut left, _) = real_null_vector(b_tilde.transpose() - &id * s);
    if right.sum() < 0.0 {
        right.neg_mut();
    }
    if left.sum() < 0.0 {
        left.neg_mut();
    }
    right /= right.sum();
    let dot = right.dot(&left);
    left /= dot;
    if right.iter().chain(left.iter()).any(|&x| x <= 0.0) {
        return Err(Error::Domain(
            "Perron vectors are not strictly positive; mean matrix is numerically reducible".into(),
        ));
    }

    let tol = 1e-12 * scale_of(b_tilde);
    let class = if s > tol {
        Criticality::Supercritical
    } else if s < -tol {
        Criticality::Subcritical
    } else {
        Criticality::Critical
    };

    Ok(SpectralData {
        b_tilde: b_tilde.clone(),
        beta_tilde: beta_tilde.to_vec(),
        s,
        u_right: right.iter().copied().collect(),
        u_left: left.iter().copied().collect(),
        eigen,
        irreducible: true,
        class,
    })
}

/// Unit Euclidean norm, first component of largest modulus rotated to the positive real axis.
fn normalize_phase(v: &mut [Complex64]) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in v.iter_mut() {
        *z /= norm;
    }
    let max = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let pivot = v
        .iter()
        .position(|z| z.norm() >= max * (1.0 - 1e-12))
        .expect("non-empty");
    let phase = v[pivot].conj() / v[pivot].norm();
    for z in v.iter_mut() {
        *z *= phase;
    }
    v[pivot] = Complex64::new(v[pivot].norm(), 0.0);
}

/// All left eigenpairs of `B̃`, sorted by descending real part (ties: larger
/// imaginary part first), each `v` of unit norm with a deterministic phase.
///
/// Fails with [`Error::DefectiveSpectrum`] when the eigenvectors of a repeated
/// eigenvalue do not span its algebraic multiplicity.
pub fn left_eigenpairs(b_tilde: &DMatrix<f64>) -> Result<Vec<EigenPair>> {
    let d = b_tilde.nrows();
    if d == 0 || b_tilde.ncols() != d {
        return Err(Error::Domain("mean matrix must be square and non-empty".into()));
    }
    let scale = scale_of(b_tilde);

    let mut values: Vec<Complex64> = b_tilde.clone().complex_eigenvalues().iter().copied().collect();
    for z in values.iter_mut() {
        if z.im.abs() <= 1e-12 * scale {
            z.im = 0.0;
        }
    }
    values.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));

    // Eigenvalues closer than this are treated as one repeated eigenvalue.
    let cluster_tol = 1e-6 * scale;
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for k in 0..d {
        match clusters
            .iter_mut()
            .find(|c| (values[c[0]] - values[k]).norm() <= cluster_tol)
        {
            Some(c) => c.push(k),
            None => clusters.push(vec![k]),
        }
    }

    let bt = b_tilde.transpose().map(|x| Complex64::new(x, 0.0));
    let id = DMatrix::<Complex64>::identity(d, d);
    let mut pairs: Vec<Option<EigenPair>> = vec![None; d];
    for members in &clusters {
        let m = members.len();
        let center: Complex64 = members.iter().map(|&k| values[k]).sum::<Complex64>() / m as f64;
        let shifted = &bt - &id * center;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V");
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        let worst = svd.singular_values[order[m - 1]];
        if worst > EIGEN_TOL * scale {
            return Err(Error::DefectiveSpectrum(format!(
                "eigenvalue {center} has algebraic multiplicity {m} but fewer independent eigenvectors \
                 (singular value {worst:e})"
            )));
        }
        for (slot, &k) in members.iter().enumerate() {
            let lambda = if m == 1 { values[k] } else { center };
            let mut v: Vec<Complex64> = v_t.row(order[slot]).iter().map(|z| z.conj()).collect();
            normalize_phase(&mut v);
            pairs[k] = Some(EigenPair { lambda, v });
        }
    }

    let pairs: Vec<EigenPair> = pairs.into_iter().map(|p| p.expect("assigned")).collect();
    for p in &pairs {
        let r = left_residual(b_tilde, p);
        if r > 1e-8 * b_tilde.norm() + f64::MIN_POSITIVE {
            return Err(Error::DefectiveSpectrum(format!(
                "eigenpair residual {r:e} at eigenvalue {} exceeds tolerance",
                p.lambda
            )));
        }
    }
    Ok(pairs)
}

/// `‖vᵀB̃ − λvᵀ‖`.
pub fn left_residual(b_tilde: &DMatrix<f64>, pair: &EigenPair) -> f64 {
    let d = b_tilde.nrows();
    (0..d)
        .map(|j| {
            let vb: Complex64 = (0..d).map(|i| pair.v[i] * b_tilde[(i, j)]).sum();
            (vb - pair.lambda * pair.v[j]).norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use approx::assert_relative_eq;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    #[test]
    fn mean_params_examples() {
        let (b, beta) = build_mean_params(&r3());
        assert_relative_eq!(b, m2(-0.6, 0.4, 0.5, -0.15), epsilon = 1e-15);
        assert_relative_eq!(beta[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(beta[1], 0.2, epsilon = 1e-15);

        let (b, beta) = build_mean_params(&r2());
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(beta, vec![1.0]);

        let mut p = linear_1d(0.5, 0.0, 1.0);
        p.mu[0] = crate::model::JumpMeasure::new(vec![atom(0.3, &[2.0])]);
        let (b, _) = build_mean_params(&p);
        assert_relative_eq!(b[(0, 0)], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn exponential_of_swap_matrix() {
        let e = matrix_exponential(&m2(0.0, 1.0, 1.0, 0.0), 1.0).unwrap();
        let (c, s) = (1f64.cosh(), 1f64.sinh());
        assert_relative_eq!(e, m2(c, s, s, c), max_relative = 1e-14);
    }

    #[test]
    fn exponential_at_zero_is_identity() {
        let a = m2(3.0, -1.0, 7.0, 2.0);
        assert_eq!(matrix_exponential(&a, 0.0).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn exponential_rejects_non_finite() {
        let a = m2(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(matrix_exponential(&a, 1.0), Err(Error::Domain(_))));
        assert!(matrix_exponential(&m2(1.0, 0.0, 0.0, 1.0), f64::INFINITY).is_err());
    }

    #[test]
    fn exponential_of_large_norm_uses_squaring() {
        // diag(−30, 20)
        let e = matrix_exponential(&m2(-30.0, 0.0, 0.0, 20.0), 1.0).unwrap();
        assert_relative_eq!(e[(0, 0)], (-30f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(e[(1, 1)], 20f64.exp(), max_relative = 1e-12);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn irreducibility() {
        assert!(is_irreducible(&DMatrix::from_element(1, 1, -4.0)));
        assert!(is_irreducible(&m2(0.0, 1.0, 1.0, 0.0)));
        assert!(!is_irreducible(&m2(1.0, 1.0, 0.0, 1.0)));
        let chain = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(is_irreducible(&chain));
        let broken = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(!is_irreducible(&broken));
    }

    #[test]
    fn perron_of_swap_matrix() {
        let sd = perron_and_classify(&m2(0.0, 1.0, 1.0, 0.0), &[0.0, 0.0]).unwrap();
        assert_relative_eq!(sd.s, 1.0, epsilon = 1e-14);
        assert_relative_eq!(sd.u_right[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(sd.u_right[1], 0.5, epsilon = 1e-14);
        assert_relative_eq!(sd.u_left[0], 1.0, epsilon = 1e-13);
        assert_relative_eq!(sd.u_left[1], 1.0, epsilon = 1e-13);
        assert_eq!(sd.class, Criticality::Supercritical);
    }

    #[test]
    fn perron_of_r3() {
        let sd = SpectralData::from_model(&r3()).unwrap();
        let s = (-0.75 + 1.0025f64.sqrt()) / 2.0;
        assert_relative_eq!(sd.s, s, epsilon = 1e-14);
        assert_eq!(sd.class, Criticality::Supercritical);
        let l2 = (-0.75 - 1.0025f64.sqrt()) / 2.0;
        assert_relative_eq!(sd.eigen[1].lambda.re, l2, epsilon = 1e-13);
        assert_eq!(sd.eigen[1].lambda.im, 0.0);
        let dot: Complex64 = sd.eigen[1].v.iter().zip(&sd.u_right).map(|(a, b)| a * b).sum();
        assert!(dot.norm() <= 1e-8);
    }

    #[test]
    fn subcritical_classification() {
        let sd = perron_and_classify(&m2(-1.0, 0.1, 0.1, -1.0), &[0.0, 0.0]).unwrap();
        assert_relative_eq!(sd.s, -0.9, epsilon = 1e-14);
        assert_eq!(sd.class, Criticality::Subcritical);
    }

    #[test]
    fn critical_classification() {
        let sd = perron_and_classify(&m2(-1.0, 1.0, 1.0, -1.0), &[0.0, 0.0]).unwrap();
        assert_eq!(sd.class, Criticality::Critical);
    }

    #[test]
    fn reducible_is_an_error() {
        let err = perron_and_classify(&m2(1.0, 0.5, 0.0, 2.0), &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NotIrreducible));
    }

    #[test]
    fn swap_matrix_eigenpairs() {
        let pairs = left_eigenpairs(&m2(0.0, 1.0, 1.0, 0.0)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(pairs[0].lambda.re, 1.0, epsilon = 1e-14);
        assert_relative_eq!(pairs[1].lambda.re, -1.0, epsilon = 1e-14);
        for (got, want) in pairs[0].v.iter().zip([h, h]) {
            assert!((got - want).norm() < 1e-14);
        }
        for (got, want) in pairs[1].v.iter().zip([h, -h]) {
            assert!((got - want).norm() < 1e-14);
        }
    }

    #[test]
    fn scalar_eigenpair() {
        let pairs = left_eigenpairs(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_relative_eq!(pairs[0].lambda.re, 1.0);
        assert_eq!(pairs[0].v, vec![Complex64::new(1.0, 0.0)]);
    }

    #[test]
    fn complex_spectrum_is_resolved() {
        // Cyclic 3-type matrix: eigenvalues 1, e^{±2πi/3}.
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let pairs = left_eigenpairs(&a).unwrap();
        assert_relative_eq!(pairs[0].lambda.re, 1.0, epsilon = 1e-12);
        assert_relative_eq!(pairs[1].lambda.re, -0.5, epsilon = 1e-12);
        assert!(pairs[1].lambda.im > 0.0);
        assert_relative_eq!(pairs[1].lambda.im, 0.75f64.sqrt(), epsilon = 1e-12);
        for p in &pairs {
            assert!(left_residual(&a, p) < 1e-12);
        }
    }

    #[test]
    fn repeated_diagonalizable_eigenvalue() {
        // J − I on three types: eigenvalues 2, −1, −1 with a two-dimensional eigenspace.
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        let pairs = left_eigenpairs(&a).unwrap();
        assert_relative_eq!(pairs[0].lambda.re, 2.0, epsilon = 1e-12);
        for p in &pairs[1..] {
            assert_relative_eq!(p.lambda.re, -1.0, epsilon = 1e-12);
            assert!(left_residual(&a, p) < 1e-12);
        }
    }

    #[test]
    fn defective_matrix_is_rejected() {
        // Eigenvalue −1 with a 2×2 Jordan block, embedded in an irreducible 3-type matrix:
        // B = P J P⁻¹ would be needed in general; a companion matrix of (x+1)²(x−2) works.
        // x³ − 3x − 2: companion with positive off-diagonals.
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 2.0, 1.0, 0.0, 3.0, 0.0, 1.0, 0.0]);
        assert!(is_irreducible(&a));
        assert!(matches!(left_eigenpairs(&a), Err(Error::DefectiveSpectrum(_))));
    }
}
