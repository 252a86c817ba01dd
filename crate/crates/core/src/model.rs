//! Admissible parameter sets `(d, c, β, B, ν, μ)` with a deterministic initial
//! state, restricted to finite atomic jump measures.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One atom of a finite jump measure: jumps of size `jump` arrive at `rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub rate: f64,
    pub jump: Vec<f64>,
}

/// A finite atomic measure on `R₊^d \ {0}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpMeasure {
    pub atoms: Vec<Atom>,
}

/// Functionals of a [`JumpMeasure`] that appear in the moment formulas.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// `Σ rate·z`
    FirstMomentVector,
    /// `Σ rate·max(0, z_i − δ_ij)`, zero-based indices.
    TruncatedPositive { i: usize, j: usize },
    /// `Σ rate·|⟨v, z⟩|²`
    ProjectedSecondMoment(Vec<Complex64>),
    /// `Σ rate·‖z‖^p·1{‖z‖ ≥ 1}`, `p ≥ 1`
    NormPowerTail(f64),
    /// `Σ rate·‖z‖·log‖z‖·1{‖z‖ ≥ 1}`
    XLogXTail,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionalValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `⟨v, z⟩ = Σ v_j z_j` for a real `z`.
pub(crate) fn project(v: &[Complex64], z: &[f64]) -> Complex64 {
    v.iter().zip(z).map(|(a, b)| a * b).sum()
}

impl JumpMeasure {
    pub fn new(atoms: Vec<Atom>) -> Self {
        Self { atoms }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total mass `|μ|`.
    pub fn total_rate(&self) -> f64 {
        self.atoms.iter().map(|a| a.rate).sum()
    }

    pub fn first_moment(&self, d: usize) -> Vec<f64> {
        let mut m = vec![0.0; d];
        for atom in &self.atoms {
            for (acc, z) in m.iter_mut().zip(&atom.jump) {
                *acc += atom.rate * z;
            }
        }
        m
    }

    pub fn truncated_positive(&self, i: usize, j: usize) -> f64 {
        let delta = if i == j { 1.0 } else { 0.0 };
        self.atoms
            .iter()
            .map(|a| a.rate * (a.jump[i] - delta).max(0.0))
            .sum()
    }

    pub fn projected_second_moment(&self, v: &[Complex64]) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.rate * project(v, &a.jump).norm_sqr())
            .sum()
    }

    pub fn norm_power_tail(&self, p: f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| {
                let r = norm(&a.jump);
                if r >= 1.0 {
                    a.rate * r.powf(p)
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn xlogx_tail(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| {
                let r = norm(&a.jump);
                if r >= 1.0 {
                    a.rate * r * r.ln()
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// Evaluates `functional` on `measure`. Every functional of the empty measure is zero.
pub fn measure_functional(
    measure: &JumpMeasure,
    d: usize,
    functional: &Functional,
) -> Result<FunctionalValue> {
    Ok(match functional {
        Functional::FirstMomentVector => FunctionalValue::Vector(measure.first_moment(d)),
        Functional::TruncatedPositive { i, j } => {
            if *i >= d || *j >= d {
                return Err(Error::Domain(format!(
                    "truncated_positive index ({i}, {j}) out of range for d = {d}"
                )));
            }
            FunctionalValue::Scalar(measure.truncated_positive(*i, *j))
        }
        Functional::ProjectedSecondMoment(v) => {
            if v.len() != d {
                return Err(Error::Domain(format!(
                    "projection vector has length {}, expected {d}",
                    v.len()
                )));
            }
            FunctionalValue::Scalar(measure.projected_second_moment(v))
        }
        Functional::NormPowerTail(p) => {
            if !(p.is_finite() && *p >= 1.0) {
                return Err(Error::Domain(format!("norm_power_tail needs p >= 1, got {p}")));
            }
            FunctionalValue::Scalar(measure.norm_power_tail(*p))
        }
        Functional::XLogXTail => FunctionalValue::Scalar(measure.xlogx_tail()),
    })
}

/// An admissible parameter tuple together with the deterministic initial state.
///
/// Construction does not validate; call [`validate_admissible`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub c: Vec<f64>,
    pub beta: Vec<f64>,
    pub b: DMatrix<f64>,
    pub nu: JumpMeasure,
    pub mu: Vec<JumpMeasure>,
    pub x0: Vec<f64>,
}

// On-disk representation.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImmigrationAtomFile {
    rate: f64,
    r: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchingAtomFile {
    rate: f64,
    z: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    d: usize,
    c: Vec<f64>,
    beta: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    nu: Vec<ImmigrationAtomFile>,
    mu: Vec<Vec<BranchingAtomFile>>,
    x0: Vec<f64>,
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

fn check_len(field: &str, got: usize, d: usize) -> Result<()> {
    if got != d {
        return Err(schema(field, format!("expected {d} entries, found {got}")));
    }
    Ok(())
}

impl ModelFile {
    fn into_params(self) -> Result<ModelParams> {
        let d = self.d;
        if d == 0 {
            return Err(schema("d", "type count must be positive"));
        }
        check_len("c", self.c.len(), d)?;
        check_len("beta", self.beta.len(), d)?;
        check_len("x0", self.x0.len(), d)?;
        check_len("B", self.b.len(), d)?;
        for (i, row) in self.b.iter().enumerate() {
            check_len(&format!("B[{i}]"), row.len(), d)?;
        }
        check_len("mu", self.mu.len(), d)?;

        let mut nu = Vec::with_capacity(self.nu.len());
        for (k, a) in self.nu.into_iter().enumerate() {
            check_len(&format!("nu[{k}].r"), a.r.len(), d)?;
            nu.push(Atom {
                rate: a.rate,
                jump: a.r,
            });
        }
        let mut mu = Vec::with_capacity(d);
        for (l, atoms) in self.mu.into_iter().enumerate() {
            let mut measure = Vec::with_capacity(atoms.len());
            for (k, a) in atoms.into_iter().enumerate() {
                check_len(&format!("mu[{l}][{k}].z"), a.z.len(), d)?;
                measure.push(Atom {
                    rate: a.rate,
                    jump: a.z,
                });
            }
            mu.push(JumpMeasure::new(measure));
        }
        let b = DMatrix::from_fn(d, d, |i, j| self.b[i][j]);
        Ok(ModelParams {
            d,
            c: self.c,
            beta: self.beta,
            b,
            nu: JumpMeasure::new(nu),
            mu,
            x0: self.x0,
        })
    }

    fn from_params(p: &ModelParams) -> Self {
        ModelFile {
            d: p.d,
            c: p.c.clone(),
            beta: p.beta.clone(),
            b: (0..p.b.nrows())
                .map(|i| (0..p.b.ncols()).map(|j| p.b[(i, j)]).collect())
                .collect(),
            nu: p
                .nu
                .atoms
                .iter()
                .map(|a| ImmigrationAtomFile {
                    rate: a.rate,
                    r: a.jump.clone(),
                })
                .collect(),
            mu: p
                .mu
                .iter()
                .map(|m| {
                    m.atoms
                        .iter()
                        .map(|a| BranchingAtomFile {
                            rate: a.rate,
                            z: a.jump.clone(),
                        })
                        .collect()
                })
                .collect(),
            x0: p.x0.clone(),
        }
    }
}

impl ModelParams {
    /// Parses a model from its JSON text.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| {
            use serde_json::error::Category;
            match e.classify() {
                Category::Data => {
                    let msg = e.to_string();
                    let field = backticked(&msg).unwrap_or_else(|| "<root>".to_string());
                    schema(field, msg)
                }
                Category::Io => Error::Io(e.into()),
                Category::Syntax | Category::Eof => Error::Parse(e.to_string()),
            }
        })?;
        file.into_params()
    }

    /// JSON value in the model-file schema.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ModelFile::from_params(self)).expect("model serialises")
    }

    /// Sets the initial state, returning the modified copy.
    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

/// Reads and parses a model file. Admissibility is not checked.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    let text = fs::read_to_string(path)?;
    ModelParams::from_json_str(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return writeln!(f, "admissible: ok");
        }
        writeln!(f, "admissible: NOT ok ({} violations)", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {}: {} (value {})", v.field, v.rule, v.value)?;
        }
        Ok(())
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, field: String, rule: &str, value: impl fmt::Display) {
        self.0.push(Violation {
            field,
            rule: rule.to_string(),
            value: value.to_string(),
        });
    }

    fn vector(&mut self, name: &str, xs: &[f64], d: usize, rule: &str) {
        if xs.len() != d {
            self.push(name.to_string(), "dimension must equal d", xs.len());
            return;
        }
        for (i, &x) in xs.iter().enumerate() {
            if !x.is_finite() {
                self.push(format!("{name}[{i}]"), "must be finite", x);
            } else if x < 0.0 {
                self.push(format!("{name}[{i}]"), rule, x);
            }
        }
    }

    fn measure(&mut self, name: &str, m: &JumpMeasure, d: usize) {
        for (k, atom) in m.atoms.iter().enumerate() {
            if !(atom.rate.is_finite() && atom.rate > 0.0) {
                self.push(format!("{name}[{k}].rate"), "rate must be positive and finite", atom.rate);
            }
            if atom.jump.len() != d {
                self.push(format!("{name}[{k}].jump"), "dimension must equal d", atom.jump.len());
                continue;
            }
            for (i, &z) in atom.jump.iter().enumerate() {
                if !z.is_finite() {
                    self.push(format!("{name}[{k}].jump[{i}]"), "must be finite", z);
                } else if z < 0.0 {
                    self.push(format!("{name}[{k}].jump[{i}]"), "jump component negative", z);
                }
            }
            if atom.jump.iter().all(|&z| z == 0.0) {
                self.push(
                    format!("{name}[{k}].jump"),
                    "jump vector must be nonzero",
                    format!("{:?}", atom.jump),
                );
            }
        }
    }
}

/// Checks every admissibility rule and reports all violations with their field path.
pub fn validate_admissible(params: &ModelParams) -> ValidationReport {
    let d = params.d;
    let mut out = Collector(Vec::new());
    if d == 0 {
        out.push("d".into(), "type count must be positive", d);
    }
    out.vector("c", &params.c, d, "diffusion coefficient negative");
    out.vector("beta", &params.beta, d, "immigration drift negative");
    out.vector("x0", &params.x0, d, "initial state negative");

    let b = &params.b;
    if b.nrows() != d || b.ncols() != d {
        out.push(
            "B".into(),
            "shape must be d x d",
            format!("{}x{}", b.nrows(), b.ncols()),
        );
    } else {
        for i in 0..d {
            for j in 0..d {
                let x = b[(i, j)];
                if !x.is_finite() {
                    out.push(format!("B[{i}][{j}]"), "must be finite", x);
                } else if i != j && x < 0.0 {
                    out.push(format!("B[{i}][{j}]"), "B off-diagonal negative", x);
                }
            }
        }
    }

    out.measure("nu", &params.nu, d);
    if params.mu.len() != d {
        out.push("mu".into(), "dimension must equal d", params.mu.len());
    } else {
        for (l, m) in params.mu.iter().enumerate() {
            out.measure(&format!("mu[{l}]"), m, d);
        }
    }

    ValidationReport {
        ok: out.0.is_empty(),
        violations: out.0,
    }
}

/// Precondition error listing the violations unless the model is admissible.
pub fn require_admissible(params: &ModelParams) -> Result<()> {
    let report = validate_admissible(params);
    if report.ok {
        Ok(())
    } else {
        let list: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.rule))
            .collect();
        Err(Error::Precondition(format!(
            "parameters are not admissible ({})",
            list.join("; ")
        )))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn atom(rate: f64, jump: &[f64]) -> Atom {
        Atom {
            rate,
            jump: jump.to_vec(),
        }
    }

    pub fn r1() -> ModelParams {
        ModelParams {
            d: 2,
            c: vec![0.0, 0.0],
            beta: vec![0.0, 0.0],
            b: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            nu: JumpMeasure::empty(),
            mu: vec![JumpMeasure::empty(), JumpMeasure::empty()],
            x0: vec![1.0, 0.0],
        }
    }

    pub fn r2() -> ModelParams {
        ModelParams {
            d: 1,
            c: vec![1.0],
            beta: vec![1.0],
            b: DMatrix::from_element(1, 1, 1.0),
            nu: JumpMeasure::empty(),
            mu: vec![JumpMeasure::empty()],
            x0: vec![1.0],
        }
    }

    pub fn r3() -> ModelParams {
        ModelParams {
            d: 2,
            c: vec![0.5, 0.25],
            beta: vec![0.1, 0.0],
            b: DMatrix::from_row_slice(2, 2, &[-0.6, 0.4, 0.5, -0.2]),
            nu: JumpMeasure::new(vec![atom(0.2, &[1.0, 1.0])]),
            mu: vec![
                JumpMeasure::new(vec![atom(0.8, &[1.0, 0.0])]),
                JumpMeasure::new(vec![atom(0.05, &[0.0, 2.0])]),
            ],
            x0: vec![1.0, 1.0],
        }
    }

    /// One type, no noise: `dX = (β + b X) dt`.
    pub fn linear_1d(b: f64, beta: f64, x0: f64) -> ModelParams {
        ModelParams {
            d: 1,
            c: vec![0.0],
            beta: vec![beta],
            b: DMatrix::from_element(1, 1, b),
            nu: JumpMeasure::empty(),
            mu: vec![JumpMeasure::empty()],
            x0: vec![x0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn reference_models_are_admissible() {
        for p in [r1(), r2(), r3()] {
            let report = validate_admissible(&p);
            assert!(report.ok, "{report}");
            assert!(report.violations.is_empty());
        }
    }

    #[test]
    fn negative_off_diagonal_is_reported() {
        let mut p = r1();
        p.b[(0, 1)] = -1.0;
        let report = validate_admissible(&p);
        assert!(!report.ok);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].field, "B[0][1]");
        assert_eq!(report.violations[0].rule, "B off-diagonal negative");
    }

    #[test]
    fn negative_diagonal_is_fine() {
        let report = validate_admissible(&r3());
        assert!(report.ok);
    }

    #[test]
    fn zero_jump_is_reported() {
        let mut p = r3();
        p.mu[0].atoms[0].jump = vec![0.0, 0.0];
        let report = validate_admissible(&p);
        assert!(!report.ok);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == "jump vector must be nonzero" && v.field == "mu[0][0].jump"));
    }

    #[test]
    fn every_violation_is_collected() {
        let mut p = r3();
        p.c[1] = -0.1;
        p.beta = vec![0.0];
        p.nu.atoms[0].rate = 0.0;
        p.mu[1].atoms[0].jump = vec![0.0, -2.0];
        let report = validate_admissible(&p);
        let fields: Vec<&str> = report.violations.iter().map(|v| v.field.as_str()).collect();
        assert!(fields.contains(&"c[1]"));
        assert!(fields.contains(&"beta"));
        assert!(fields.contains(&"nu[0].rate"));
        assert!(fields.contains(&"mu[1][0].jump[1]"));
    }

    #[test]
    fn validation_is_pure() {
        let mut p = r3();
        p.b[(1, 0)] = -3.0;
        assert_eq!(validate_admissible(&p), validate_admissible(&p));
    }

    #[test]
    fn functional_examples() {
        let m = JumpMeasure::new(vec![atom(0.3, &[2.0])]);
        assert!((m.truncated_positive(0, 0) - 0.3).abs() < 1e-15);

        let p = r3();
        assert_eq!(p.nu.first_moment(2), vec![0.2, 0.2]);

        let v = [Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)];
        assert!((p.mu[1].projected_second_moment(&v) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_measure_gives_zero() {
        let m = JumpMeasure::empty();
        let d = 3;
        let v = vec![Complex64::new(1.0, 2.0); d];
        for f in [
            Functional::FirstMomentVector,
            Functional::TruncatedPositive { i: 0, j: 1 },
            Functional::ProjectedSecondMoment(v),
            Functional::NormPowerTail(2.5),
            Functional::XLogXTail,
        ] {
            match measure_functional(&m, d, &f).unwrap() {
                FunctionalValue::Scalar(x) => assert_eq!(x, 0.0),
                FunctionalValue::Vector(xs) => assert!(xs.iter().all(|&x| x == 0.0)),
            }
        }
    }

    #[test]
    fn tails_only_count_large_jumps() {
        let m = JumpMeasure::new(vec![atom(1.0, &[0.5, 0.5]), atom(2.0, &[3.0, 4.0])]);
        assert!((m.norm_power_tail(1.0) - 10.0).abs() < 1e-12);
        assert!((m.norm_power_tail(2.0) - 50.0).abs() < 1e-12);
        assert!((m.xlogx_tail() - 2.0 * 5.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_functional_arguments() {
        let m = JumpMeasure::new(vec![atom(1.0, &[1.0])]);
        assert!(measure_functional(&m, 1, &Functional::NormPowerTail(0.5)).is_err());
        assert!(measure_functional(&m, 1, &Functional::TruncatedPositive { i: 1, j: 0 }).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = r3();
        let text = p.to_json_value().to_string();
        let back = ModelParams::from_json_str(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad_b = r#"{"d":2,"c":[0,0],"beta":[0,0],"B":[[0,1,2],[1,0,3]],"nu":[],"mu":[[],[]],"x0":[1,0]}"#;
        match ModelParams::from_json_str(bad_b) {
            Err(Error::Schema { field, .. }) => assert!(field.starts_with('B'), "{field}"),
            other => panic!("expected schema error, got {other:?}"),
        }

        let missing = r#"{"d":1,"c":[0],"beta":[0],"B":[[1]],"nu":[],"mu":[[]]}"#;
        match ModelParams::from_json_str(missing) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "x0"),
            other => panic!("expected schema error, got {other:?}"),
        }

        let unknown = r#"{"d":1,"c":[0],"beta":[0],"B":[[1]],"nu":[],"mu":[[]],"x0":[1],"extra":1}"#;
        assert!(matches!(
            ModelParams::from_json_str(unknown),
            Err(Error::Schema { .. })
        ));

        assert!(matches!(
            ModelParams::from_json_str("{\"d\": 1,"),
            Err(Error::Parse(_))
        ));
    }
}
