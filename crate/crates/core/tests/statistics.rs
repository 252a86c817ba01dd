use std::path::PathBuf;

use cbi_core::model::{Atom, JumpMeasure};
use cbi_core::simulate::{simulate_paths, SimConfig};
use cbi_core::verify::{moment_check, moment_check_scaled, run_checks, VerifyOptions};
use cbi_core::{load_model, ModelParams, SpectralData};
use nalgebra::DMatrix;

fn model(name: &str) -> ModelParams {
    load_model(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)).unwrap()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn immigration_only_is_compound_poisson() {
    // X_t = 0.5·N with N ~ Poisson(2t).
    let p = ModelParams {
        d: 1,
        c: vec![0.0],
        beta: vec![0.0],
        b: DMatrix::zeros(1, 1),
        nu: JumpMeasure::new(vec![Atom { rate: 2.0, jump: vec![0.5] }]),
        mu: vec![JumpMeasure::empty()],
        x0: vec![0.0],
    };
    let paths = simulate_paths(&p, &SimConfig::new(1e-2, 1.0, 20_000, 11)).unwrap();
    let xs: Vec<f64> = paths.iter().map(|tr| tr.states[0][0]).collect();
    for x in &xs {
        let k = x / 0.5;
        assert!((k - k.round()).abs() < 1e-9, "state {x} is not a multiple of the jump");
    }
    let (m, se) = mean_se(&xs);
    assert!((m - 1.0).abs() <= 3.0 * se, "mean {m} ± {se}");
    let zeros: Vec<f64> = xs.iter().map(|&x| f64::from(u8::from(x == 0.0))).collect();
    let (p0, se0) = mean_se(&zeros);
    assert!((p0 - f64::exp(-2.0)).abs() <= 3.0 * se0, "P(X=0) {p0} ± {se0}");
}

#[test]
fn r2_mean_within_three_standard_errors() {
    let p = model("R2.json");
    let paths = simulate_paths(&p, &SimConfig::new(1e-3, 0.5, 10_000, 3)).unwrap();
    let xs: Vec<f64> = paths.iter().map(|tr| tr.states[0][0]).collect();
    let (m, se) = mean_se(&xs);
    let exact = 2.0 * f64::exp(0.5) - 1.0;
    assert!((m - exact).abs() <= 3.0 * se + 5.0 * 1e-3 * exact, "{m} ± {se} vs {exact}");
}

#[test]
fn ensembles_do_not_depend_on_worker_count() {
    let p = model("R3.json");
    let cfg = SimConfig::new(1e-3, 1.0, 300, 5).with_grid(&[0.25, 1.0]);
    let one = simulate_paths(&p, &cfg.clone().with_workers(1)).unwrap();
    let three = simulate_paths(&p, &cfg.with_workers(3)).unwrap();
    assert_eq!(one, three);
}

#[test]
fn standard_errors_halve_when_paths_quadruple() {
    let p = model("R2.json");
    let sd = SpectralData::from_model(&p).unwrap();
    let small = moment_check(&p, &sd, &SimConfig::new(1e-3, 1.0, 5_000, 17), 0, &[1.0]).unwrap();
    let large = moment_check(&p, &sd, &SimConfig::new(1e-3, 1.0, 20_000, 17), 0, &[1.0]).unwrap();
    for (a, b) in small.details.iter().zip(&large.details) {
        let ratio = a.standard_error / b.standard_error;
        assert!((1.8..=2.2).contains(&ratio), "{}: SE ratio {ratio}", a.label);
    }
}

#[test]
fn perturbed_reference_is_rejected() {
    let p = model("R2.json");
    let sd = SpectralData::from_model(&p).unwrap();
    let cfg = SimConfig::new(1e-3, 1.0, 5_000, 23);
    assert!(moment_check(&p, &sd, &cfg, 0, &[1.0]).unwrap().pass);
    assert!(!moment_check_scaled(&p, &sd, &cfg, 0, &[1.0], 1.5).unwrap().pass);
}

#[test]
fn reports_are_reproducible_from_their_echoed_config() {
    let p = model("R3.json");
    let mut opts = VerifyOptions::new(SimConfig::new(1e-3, 1.0, 200, 99));
    opts.t_grid = Some(vec![0.5, 1.0]);
    let names = vec!["martingale".to_string(), "moment".to_string(), "laplace".to_string()];
    let first = run_checks(&p, &names, &opts).unwrap();
    let again = run_checks(&p, &names, &opts.clone()).unwrap();
    assert_eq!(first.to_json(), again.to_json());
}
