//! Monte Carlo checks of simulated ensembles against the exact formulas and the
//! limit theorems for supercritical irreducible processes.
//!
//! Statistical tolerances are `3·SE` plus, where the scheme bias matters, an
//! allowance of `5·dt·|reference|` for the first-order discretisation.

use std::fmt;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::human;
use crate::model::{project, require_admissible, ModelParams};
use crate::moments::{affine_flow, mean_vector, second_moment_limit, second_moment_projection};
use crate::riccati::{laplace_transform, OdeConfig};
use crate::simulate::{mean_and_se, simulate_paths, SimConfig, Trajectory};
use crate::spectral::{matrix_exponential, SpectralData};

/// Standard errors allowed on each side of a reference.
pub const SE_MULTIPLIER: f64 = 3.0;
/// Coefficient of the `dt` scheme-bias allowance.
pub const BIAS_COEFF: f64 = 5.0;

/// One compared quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub t: f64,
    pub label: String,
    pub estimate: f64,
    pub reference: f64,
    pub standard_error: f64,
    pub tolerance: f64,
}

impl Comparison {
    pub fn within(&self) -> bool {
        (self.estimate - self.reference).abs() <= self.tolerance
    }

    fn severity(&self) -> f64 {
        let gap = (self.estimate - self.reference).abs();
        if gap == 0.0 {
            0.0
        } else if self.tolerance == 0.0 {
            f64::INFINITY
        } else {
            gap / self.tolerance
        }
    }
}

/// A qualitative side condition (monotonicity and the like).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Condition {
    pub description: String,
    pub holds: bool,
}

/// Outcome of one check. The headline `estimate`/`reference`/`tolerance` is the
/// comparison closest to failing; `details` lists every comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub estimate: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub standard_error: Option<f64>,
    pub pass: bool,
    pub conditions: Vec<Condition>,
    pub details: Vec<Comparison>,
}

impl CheckResult {
    fn from_comparisons(name: &str, details: Vec<Comparison>, conditions: Vec<Condition>) -> Self {
        let worst = details
            .iter()
            .max_by(|a, b| a.severity().total_cmp(&b.severity()))
            .cloned()
            .expect("at least one comparison");
        let pass = details.iter().all(Comparison::within) && conditions.iter().all(|c| c.holds);
        CheckResult {
            name: name.to_string(),
            estimate: worst.estimate,
            reference: worst.reference,
            tolerance: worst.tolerance,
            standard_error: Some(worst.standard_error),
            pass,
            conditions,
            details,
        }
    }

    /// Headline comparison only, ignoring the side conditions.
    pub fn headline_within(&self) -> bool {
        (self.estimate - self.reference).abs() <= self.tolerance
    }
}

fn run(params: &ModelParams, cfg: &SimConfig, t_grid: &[f64]) -> Result<Vec<Trajectory>> {
    require_admissible(params)?;
    if t_grid.is_empty() {
        return Err(Error::Domain("time grid is empty".into()));
    }
    simulate_paths(params, &cfg.with_grid(t_grid))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn column(paths: &[Trajectory], k: usize) -> impl ExactSizeIterator<Item = &[f64]> + Clone {
    paths.iter().map(move |p| p.states[k].as_slice())
}

/// Complex sample mean with the standard error `√(Σ|z − m|² / (n(n−1)))`.
fn complex_mean_and_se(zs: &[Complex64]) -> (Complex64, f64) {
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<Complex64>() / n;
    if zs.len() < 2 {
        return (mean, 0.0);
    }
    let var = zs.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Constant mean of `e^{−tB̃}X_t − ∫₀ᵗ e^{−uB̃}β̃ du`.
pub fn martingale_defect(params: &ModelParams, spectral: &SpectralData, cfg: &SimConfig, t_grid: &[f64]) -> Result<CheckResult> {
    let paths = run(params, cfg, t_grid)?;
    let d = params.d;
    let neg = -&spectral.b_tilde;
    let mut rows = Vec::new();
    let mut max_se: f64 = 0.0;
    for (k, &t) in paths[0].times.iter().enumerate() {
        let back = matrix_exponential(&neg, t)?;
        let offset = affine_flow(&neg, &spectral.beta_tilde, &vec![0.0; d], t)?;
        let transformed: Vec<Vec<f64>> = column(&paths, k)
            .map(|x| {
                let y = &back * DVector::from_column_slice(x);
                y.iter().zip(&offset).map(|(a, b)| a - b).collect()
            })
            .collect();
        let (mean, se): (Vec<f64>, Vec<f64>) = (0..d)
            .map(|i| mean_and_se(transformed.iter().map(|y| y[i])))
            .unzip();
        let gap: Vec<f64> = mean.iter().zip(&params.x0).map(|(m, x)| m - x).collect();
        max_se = se.iter().copied().fold(max_se, f64::max);
        rows.push((t, norm(&gap), se.iter().copied().fold(0.0, f64::max)));
    }
    let tolerance = SE_MULTIPLIER * max_se + BIAS_COEFF * cfg.dt * norm(&params.x0);
    let details = rows
        .into_iter()
        .map(|(t, defect, se)| Comparison {
            t,
            label: "‖mean(e^{-tB̃}X_t − ∫e^{-uB̃}β̃du) − x0‖".into(),
            estimate: defect,
            reference: 0.0,
            standard_error: se,
            tolerance,
        })
        .collect();
    Ok(CheckResult::from_comparisons("martingale", details, Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvergenceMode {
    L1,
    L2,
}

fn require_supercritical(spectral: &SpectralData) -> Result<()> {
    if !spectral.is_supercritical() {
        return Err(Error::Precondition(format!(
            "limit theorems need a supercritical irreducible process, but s(B̃) = {} ({})",
            spectral.s, spectral.class
        )));
    }
    Ok(())
}

/// Convergence of `e^{−λt}⟨v, X_t⟩` for the eigenpair `pair_index`: its mean
/// against `⟨v, x₀ + β̃/λ⟩` (L1) or its second moment against `M₂` (L2).
pub fn convergence_series(
    params: &ModelParams,
    spectral: &SpectralData,
    cfg: &SimConfig,
    pair_index: usize,
    t_grid: &[f64],
    mode: ConvergenceMode,
) -> Result<CheckResult> {
    require_supercritical(spectral)?;
    let pair = spectral.pair(pair_index)?;
    let (lambda, v) = (pair.lambda, &pair.v);
    let s = spectral.s;
    if pair_index != 0 && !(lambda.re > s / 2.0 && lambda.re <= s) {
        return Err(Error::Precondition(format!(
            "convergence of e^(-λt)<v,X_t> needs Re(λ) in (s(B̃)/2, s(B̃)] = ({}, {}], but Re(λ) = {}",
            s / 2.0,
            s,
            lambda.re
        )));
    }
    let paths = run(params, cfg, t_grid)?;
    let times = paths[0].times.clone();
    let real = lambda.im == 0.0 && v.iter().all(|z| z.im == 0.0);

    let mut details = Vec::new();
    let mut conditions = Vec::new();
    match mode {
        ConvergenceMode::L1 => {
            let reference = project(v, &params.x0) + project(v, &spectral.beta_tilde) / lambda;
            for (k, &t) in times.iter().enumerate() {
                let zs: Vec<Complex64> = column(&paths, k)
                    .map(|x| (-lambda * t).exp() * project(v, x))
                    .collect();
                let (m, se) = complex_mean_and_se(&zs);
                let (estimate, refv) = if real { (m.re, reference.re) } else { ((m - reference).norm(), 0.0) };
                details.push(Comparison {
                    t,
                    label: if real { "mean e^{-λt}<v,X_t>" } else { "|mean e^{-λt}<v,X_t> − E w|" }.into(),
                    estimate,
                    reference: refv,
                    standard_error: se,
                    tolerance: SE_MULTIPLIER * se + BIAS_COEFF * cfg.dt * reference.norm(),
                });
            }
        }
        ConvergenceMode::L2 => {
            let m2 = second_moment_limit(params, spectral, pair_index)?.m2;
            let mut qs = Vec::new();
            for (k, &t) in times.iter().enumerate() {
                let scale = (-2.0 * lambda.re * t).exp();
                let (q, se) = mean_and_se(column(&paths, k).map(|x| scale * project(v, x).norm_sqr()));
                qs.push(q);
                details.push(Comparison {
                    t,
                    label: "mean |e^{-λt}<v,X_t>|²".into(),
                    estimate: q,
                    reference: m2,
                    standard_error: se,
                    tolerance: (SE_MULTIPLIER * se).max(0.02 * m2),
                });
            }
            let steps: Vec<f64> = qs.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
            conditions.push(Condition {
                description: format!(
                    "increments |q(t_i+1) − q(t_i)| strictly decreasing: {:?}",
                    steps.iter().map(|x| human(*x)).collect::<Vec<_>>()
                ),
                holds: steps.windows(2).all(|w| w[1] < w[0]),
            });
        }
    }
    // Only the final time is held to the limit.
    let headline = details.last().cloned().expect("non-empty grid");
    let mut result = CheckResult::from_comparisons(
        match mode {
            ConvergenceMode::L1 => "convergence_l1",
            ConvergenceMode::L2 => "convergence_l2",
        },
        vec![headline],
        conditions,
    );
    result.details = details;
    Ok(result)
}

/// Alignment of `e^{−st}X_t` with the right Perron direction `ũ`.
pub fn direction_residual(params: &ModelParams, spectral: &SpectralData, cfg: &SimConfig, t_grid: &[f64]) -> Result<CheckResult> {
    require_supercritical(spectral)?;
    let paths = run(params, cfg, t_grid)?;
    let (s, u, ut) = (spectral.s, &spectral.u_left, &spectral.u_right);
    let mut rows = Vec::new();
    for (k, &t) in paths[0].times.iter().enumerate() {
        let scale = (-s * t).exp();
        let (r, se) = mean_and_se(column(&paths, k).map(|x| {
            let w: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            scale * x.iter().zip(ut).map(|(xi, ui)| (xi - w * ui).powi(2)).sum::<f64>().sqrt()
        }));
        rows.push((t, r, se));
    }
    let monotone = rows.windows(2).all(|w| w[1].1 <= w[0].1 + w[1].2);
    let (t_max, r_max, se_max) = *rows.last().expect("non-empty grid");
    let r_min = rows[0].1;
    let tolerance = (SE_MULTIPLIER * se_max).max(0.05 * r_min);
    let headline = Comparison {
        t: t_max,
        label: "mean ‖e^{-st}(X_t − <u,X_t>ũ)‖".into(),
        estimate: r_max,
        reference: 0.0,
        standard_error: se_max,
        tolerance,
    };
    let mut result = CheckResult::from_comparisons(
        "direction",
        vec![headline],
        vec![Condition {
            description: format!(
                "residual non-increasing within 1 SE: {:?}",
                rows.iter().map(|r| human(r.1)).collect::<Vec<_>>()
            ),
            holds: monotone,
        }],
    );
    result.details = rows
        .into_iter()
        .map(|(t, r, se)| Comparison {
            t,
            label: "mean ‖e^{-st}(X_t − <u,X_t>ũ)‖".into(),
            estimate: r,
            reference: 0.0,
            standard_error: se,
            tolerance,
        })
        .collect();
    Ok(result)
}

/// Ensemble mean of `e^{−⟨λ, X_t⟩}` from `X₀ = x` against the Riccati transform.
pub fn laplace_check(
    params: &ModelParams,
    cfg: &SimConfig,
    x: &[f64],
    lam_list: &[Vec<f64>],
    t: f64,
) -> Result<CheckResult> {
    if lam_list.is_empty() {
        return Err(Error::Domain("no Laplace arguments given".into()));
    }
    let started = params.clone().with_x0(x.to_vec());
    let paths = run(&started, cfg, &[t])?;
    let t = paths[0].times[0];
    let ode = OdeConfig::default();
    let mut details = Vec::new();
    for lam in lam_list {
        let reference = laplace_transform(params, x, lam, t, &ode)?;
        let (m, se) = mean_and_se(column(&paths, 0).map(|xs| {
            let e: f64 = lam.iter().zip(xs).map(|(a, b)| a * b).sum();
            (-e).exp()
        }));
        details.push(Comparison {
            t,
            label: format!("mean exp(-<λ,X_t>), λ = {lam:?}"),
            estimate: m,
            reference,
            standard_error: se,
            tolerance: SE_MULTIPLIER * se + BIAS_COEFF * cfg.dt,
        });
    }
    Ok(CheckResult::from_comparisons("laplace", details, Vec::new()))
}

/// Ensemble mean and `|⟨v, X_t⟩|²` against the exact first and second moments.
pub fn moment_check(
    params: &ModelParams,
    spectral: &SpectralData,
    cfg: &SimConfig,
    pair_index: usize,
    t_grid: &[f64],
) -> Result<CheckResult> {
    moment_check_scaled(params, spectral, cfg, pair_index, t_grid, 1.0)
}

/// [`moment_check`] with every reference multiplied by `reference_scale`;
/// a scale away from one must make the check fail.
pub fn moment_check_scaled(
    params: &ModelParams,
    spectral: &SpectralData,
    cfg: &SimConfig,
    pair_index: usize,
    t_grid: &[f64],
    reference_scale: f64,
) -> Result<CheckResult> {
    let v = spectral.pair(pair_index)?.v.clone();
    let paths = run(params, cfg, t_grid)?;
    let mut details = Vec::new();
    for (k, &t) in paths[0].times.iter().enumerate() {
        let mean = mean_vector(params, spectral, t)?;
        for (i, m) in mean.iter().enumerate() {
            let (est, se) = mean_and_se(column(&paths, k).map(|x| x[i]));
            let reference = reference_scale * m;
            details.push(Comparison {
                t,
                label: format!("mean X_t[{}]", i + 1),
                estimate: est,
                reference,
                standard_error: se,
                tolerance: SE_MULTIPLIER * se + BIAS_COEFF * cfg.dt * reference.abs(),
            });
        }
        let second = second_moment_projection(params, spectral, pair_index, t)?.total;
        let (est, se) = mean_and_se(column(&paths, k).map(|x| project(&v, x).norm_sqr()));
        let reference = reference_scale * second;
        details.push(Comparison {
            t,
            label: format!("mean |<v_{pair_index},X_t>|²"),
            estimate: est,
            reference,
            standard_error: se,
            tolerance: SE_MULTIPLIER * se + BIAS_COEFF * cfg.dt * reference.abs(),
        });
    }
    Ok(CheckResult::from_comparisons("moment", details, Vec::new()))
}

/// Names accepted by [`run_checks`].
pub const CHECK_NAMES: [&str; 5] = ["martingale", "moment", "convergence", "direction", "laplace"];

/// Settings shared by every check of a verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub sim: SimConfig,
    pub t_grid: Option<Vec<f64>>,
    pub pair: usize,
    pub mode: ConvergenceMode,
    pub lambda: Option<Vec<f64>>,
    pub x: Option<Vec<f64>>,
    pub t: Option<f64>,
}

impl VerifyOptions {
    pub fn new(sim: SimConfig) -> Self {
        Self {
            sim,
            t_grid: None,
            pair: 0,
            mode: ConvergenceMode::L1,
            lambda: None,
            x: None,
            t: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub model: serde_json::Value,
    pub spectral: Option<serde_json::Value>,
    pub seed: u64,
    pub config: VerifyOptions,
    pub checks: Vec<String>,
    pub results: Vec<CheckResult>,
    pub all_pass: bool,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:<5} {:>12} {:>12} {:>12} {:>12}",
            "check", "pass", "estimate", "reference", "tolerance", "std.err"
        )?;
        for r in &self.results {
            writeln!(
                f,
                "{:<16} {:<5} {:>12} {:>12} {:>12} {:>12}",
                r.name,
                if r.pass { "PASS" } else { "FAIL" },
                human(r.estimate),
                human(r.reference),
                human(r.tolerance),
                r.standard_error.map(human).unwrap_or_else(|| "-".into())
            )?;
            for c in r.conditions.iter().filter(|c| !c.holds) {
                writeln!(f, "    condition failed: {}", c.description)?;
            }
        }
        writeln!(f, "seed {}: {}", self.seed, if self.all_pass { "ALL PASS" } else { "FAILURES" })
    }
}

fn default_limit_grid(spectral: &SpectralData) -> Vec<f64> {
    let t_max = 6.0 / spectral.s;
    (1..=4).map(|k| t_max * k as f64 / 4.0).collect()
}

/// Runs the named checks with a shared configuration.
pub fn run_checks(params: &ModelParams, names: &[String], opts: &VerifyOptions) -> Result<VerificationReport> {
    require_admissible(params)?;
    for name in names {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::Domain(format!(
                "unknown check `{name}` (expected one of {})",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let spectral = SpectralData::from_model(params)?;
    let sim = &opts.sim;
    let mut results = Vec::new();
    for name in names {
        let result = match name.as_str() {
            "martingale" => {
                let grid = opts.t_grid.clone().unwrap_or_else(|| vec![0.25, 0.5, 1.0]);
                martingale_defect(params, &spectral, sim, &grid)?
            }
            "moment" => {
                let grid = opts.t_grid.clone().unwrap_or_else(|| vec![opts.t.unwrap_or(1.0)]);
                moment_check(params, &spectral, sim, opts.pair, &grid)?
            }
            "convergence" => {
                require_supercritical(&spectral)?;
                let grid = opts.t_grid.clone().unwrap_or_else(|| default_limit_grid(&spectral));
                convergence_series(params, &spectral, sim, opts.pair, &grid, opts.mode)?
            }
            "direction" => {
                require_supercritical(&spectral)?;
                let grid = opts.t_grid.clone().unwrap_or_else(|| default_limit_grid(&spectral));
                direction_residual(params, &spectral, sim, &grid)?
            }
            "laplace" => {
                let x = opts.x.clone().unwrap_or_else(|| params.x0.clone());
                let lam = opts.lambda.clone().unwrap_or_else(|| vec![1.0; params.d]);
                laplace_check(params, sim, &x, &[lam], opts.t.unwrap_or(1.0))?
            }
            _ => unreachable!("names validated above"),
        };
        results.push(result);
    }
    Ok(VerificationReport {
        model: params.to_json_value(),
        spectral: Some(spectral.summary()),
        seed: sim.seed,
        config: opts.clone(),
        checks: names.to_vec(),
        all_pass: results.iter().all(|r| r.pass),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;

    fn sim(paths: usize) -> SimConfig {
        SimConfig::new(1e-3, 1.0, paths, 42)
    }

    #[test]
    fn deterministic_martingale() {
        let p = r1();
        let sd = SpectralData::from_model(&p).unwrap();
        let r = martingale_defect(&p, &sd, &sim(3), &[0.25, 0.5, 1.0]).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.estimate <= 2e-3);
    }

    #[test]
    fn deterministic_l1_limit_mean() {
        let p = linear_1d(1.0, 0.0, 1.0);
        let sd = SpectralData::from_model(&p).unwrap();
        let r = convergence_series(&p, &sd, &sim(2), 0, &[1.0, 3.0, 6.0], ConvergenceMode::L1).unwrap();
        assert_eq!(r.standard_error, Some(0.0));
        assert_eq!(r.reference, 1.0);
        assert!(r.pass, "{r:?}");
        for row in &r.details {
            assert!((row.estimate - 1.0).abs() < 5e-3);
        }
    }

    #[test]
    fn deterministic_direction() {
        let p = r1();
        let sd = SpectralData::from_model(&p).unwrap();
        let r = direction_residual(&p, &sd, &sim(2), &[2.0, 4.0, 8.0]).unwrap();
        assert!(r.pass, "{r:?}");
        let expect = (-4.0f64).exp() / 2f64.sqrt();
        assert!((r.details[0].estimate - expect).abs() < 1e-2 * expect);
    }

    #[test]
    fn non_perron_pair_outside_the_window_is_refused() {
        let p = r3();
        let sd = SpectralData::from_model(&p).unwrap();
        let err = convergence_series(&p, &sd, &sim(10), 1, &[1.0], ConvergenceMode::L1).unwrap_err();
        match err {
            Error::Precondition(msg) => assert!(msg.contains("Re(λ) in (s(B̃)/2, s(B̃)]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subcritical_is_refused() {
        let p = linear_1d(-1.0, 1.0, 1.0);
        let sd = SpectralData::from_model(&p).unwrap();
        assert!(matches!(
            direction_residual(&p, &sd, &sim(10), &[1.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn laplace_at_zero_is_exact() {
        let p = r3();
        let r = laplace_check(&p, &sim(20), &[1.0, 1.0], &[vec![0.0, 0.0]], 0.5).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.reference, 1.0);
        assert!(r.pass);
    }

    #[test]
    fn unknown_check_name() {
        let opts = VerifyOptions::new(sim(10));
        assert!(run_checks(&r1(), &["bogus".to_string()], &opts).is_err());
    }

    #[test]
    fn report_renders() {
        let opts = VerifyOptions::new(sim(4));
        let report = run_checks(&r1(), &["martingale".to_string(), "moment".to_string()], &opts).unwrap();
        assert!(report.all_pass, "{report}");
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["seed"], 42);
        assert_eq!(json["results"].as_array().unwrap().len(), 2);
        assert!(report.to_string().contains("ALL PASS"));
    }
}
