//! Sample paths of the CBI stochastic differential equation.
//!
//! Each step of size `dt` from the pre-step state `X` (the left limit `X_{u−}`):
//!
//! 1. branching jumps of type `ℓ`: `Poisson(X_ℓ·|μ_ℓ|·dt)` many, each atom chosen
//!    proportionally to its rate; immigration jumps: `Poisson(|ν|·dt)` many, likewise;
//! 2. drift `X += (β + B̃X − Σ_ℓ X_ℓ m_ℓ)·dt` with `m_ℓ = ∫ z μ_ℓ(dz)`, i.e. the
//!    compensator of the branching jumps folded into the drift;
//! 3. diffusion `X_ℓ += √(2c_ℓ·max(0, X_ℓ)·dt)·Z_ℓ`, evaluated at the pre-step state;
//! 4. the drawn jumps are added;
//! 5. every component is clamped at zero.
//!
//! Random draws per step happen in this order: for each type `ℓ` with a positive
//! jump intensity, the Poisson count and then (only when `μ_ℓ` has more than one atom)
//! one uniform per jump; the same for `ν`; then one standard normal for every `ℓ`
//! with `c_ℓ > 0`.
//!
//! Path `i` draws from `ChaCha8Rng::seed_from_u64(path_seed(seed, i))`, where
//! [`path_seed`] is the `(i+1)`-th output of a SplitMix64 stream started at the
//! master seed. Paths are therefore independent of how they are scheduled, and
//! ensembles are aggregated in path-index order.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::machine;
use crate::model::{project, JumpMeasure, ModelParams};
use crate::spectral::build_mean_params;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of path `index` under master seed `master`.
pub fn path_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    /// Record times in `[0, horizon]`, ascending. Each is snapped to the nearest
    /// multiple of `dt` and reported at that snapped time.
    pub record_grid: Vec<f64>,
    /// Worker threads; does not affect results, so it is not echoed in reports.
    #[serde(skip)]
    pub workers: usize,
}

impl SimConfig {
    /// Records only at the horizon.
    pub fn new(dt: f64, horizon: f64, paths: usize, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            paths,
            seed,
            record_grid: vec![horizon],
            workers: 1,
        }
    }

    /// Config recording at `grid`, with the horizon at its last point.
    pub fn with_grid(&self, grid: &[f64]) -> Self {
        Self {
            horizon: grid.iter().copied().fold(0.0, f64::max),
            record_grid: grid.to_vec(),
            ..self.clone()
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    /// Step indices of the record times.
    pub fn record_steps(&self) -> Result<Vec<usize>> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::Domain(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        if self.paths == 0 {
            return Err(Error::Domain("at least one path is required".into()));
        }
        if self.workers == 0 {
            return Err(Error::Domain("at least one worker is required".into()));
        }
        if self.record_grid.is_empty() {
            return Err(Error::Domain("record grid is empty".into()));
        }
        let slack = 1e-9 * self.horizon.max(1.0);
        let mut steps = Vec::with_capacity(self.record_grid.len());
        let mut last = f64::NEG_INFINITY;
        for &t in &self.record_grid {
            if !t.is_finite() || t < 0.0 || t > self.horizon + slack {
                return Err(Error::Domain(format!(
                    "record time {t} outside [0, {}]",
                    self.horizon
                )));
            }
            if t < last {
                return Err(Error::Domain("record grid must be ascending".into()));
            }
            last = t;
            steps.push((t / self.dt).round() as usize);
        }
        Ok(steps)
    }

    pub fn record_times(&self) -> Result<Vec<f64>> {
        Ok(self
            .record_steps()?
            .into_iter()
            .map(|k| k as f64 * self.dt)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub path_seed: u64,
}

impl Trajectory {
    /// CSV with header `t,x1,...,xd`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=d {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&machine(*t));
            for v in x {
                out.push(',');
                out.push_str(&machine(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Jump measure prepared for sampling.
struct Sampler {
    total: f64,
    cumulative: Vec<f64>,
    jumps: Vec<Vec<f64>>,
}

impl Sampler {
    fn new(m: &JumpMeasure) -> Self {
        let mut acc = 0.0;
        let cumulative = m
            .atoms
            .iter()
            .map(|a| {
                acc += a.rate;
                acc
            })
            .collect();
        Self {
            total: acc,
            cumulative,
            jumps: m.atoms.iter().map(|a| a.jump.clone()).collect(),
        }
    }

    /// Adds `count` independent jumps to `into`.
    fn draw(&self, count: u64, rng: &mut ChaCha8Rng, into: &mut [f64]) {
        for _ in 0..count {
            let k = if self.jumps.len() == 1 {
                0
            } else {
                let u = rng.random::<f64>() * self.total;
                self.cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(self.jumps.len() - 1)
            };
            for (x, z) in into.iter_mut().zip(&self.jumps[k]) {
                *x += z;
            }
        }
    }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> Option<u64> {
    if mean <= 0.0 {
        return Some(0);
    }
    let n: f64 = Poisson::new(mean).ok()?.sample(rng);
    Some(n as u64)
}

/// Precomputed per-model data for the stepping scheme.
pub struct Simulator<'a> {
    params: &'a ModelParams,
    /// `B̃ − [m_1 … m_d]`
    drift: DMatrix<f64>,
    branching: Vec<Sampler>,
    immigration: Sampler,
}

impl<'a> Simulator<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let d = params.d;
        let (b_tilde, _) = build_mean_params(params);
        let mut drift = b_tilde;
        for (l, m) in params.mu.iter().enumerate() {
            let first = m.first_moment(d);
            for i in 0..d {
                drift[(i, l)] -= first[i];
            }
        }
        Self {
            params,
            drift,
            branching: params.mu.iter().map(Sampler::new).collect(),
            immigration: Sampler::new(&params.nu),
        }
    }

    /// One path from `x0` recorded at the given step indices.
    pub fn run(&self, x0: &[f64], dt: f64, record_steps: &[usize], path_index: usize, seed: u64) -> Result<Trajectory> {
        let p = self.params;
        let d = p.d;
        let seed = path_seed(seed, path_index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fail = |step: usize, message: String| Error::Simulation {
            path: path_index,
            step,
            message,
        };

        let mut x = x0.to_vec();
        let mut next = vec![0.0; d];
        let mut jumps = vec![0.0; d];
        let mut states = Vec::with_capacity(record_steps.len());
        let mut pending = record_steps.iter().peekable();
        let last = record_steps.last().copied().unwrap_or(0);

        let sqrt_dt = dt.sqrt();
        let mut step = 0usize;
        loop {
            while pending.next_if(|&&k| k == step).is_some() {
                states.push(x.clone());
            }
            if step == last {
                break;
            }

            jumps.iter_mut().for_each(|j| *j = 0.0);
            for (l, sampler) in self.branching.iter().enumerate() {
                if sampler.total > 0.0 && x[l] > 0.0 {
                    let n = poisson(x[l] * sampler.total * dt, &mut rng)
                        .ok_or_else(|| fail(step, format!("invalid branching intensity at X = {x:?}")))?;
                    sampler.draw(n, &mut rng, &mut jumps);
                }
            }
            if self.immigration.total > 0.0 {
                let n = poisson(self.immigration.total * dt, &mut rng)
                    .ok_or_else(|| fail(step, "invalid immigration intensity".into()))?;
                self.immigration.draw(n, &mut rng, &mut jumps);
            }

            for i in 0..d {
                let mut drift = p.beta[i];
                for (k, xk) in x.iter().enumerate() {
                    drift += self.drift[(i, k)] * xk;
                }
                next[i] = x[i] + drift * dt;
            }
            for l in 0..d {
                if p.c[l] > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    next[l] += (2.0 * p.c[l] * x[l].max(0.0)).sqrt() * sqrt_dt * z;
                }
            }
            for i in 0..d {
                let v = (next[i] + jumps[i]).max(0.0);
                if !v.is_finite() {
                    return Err(fail(step, format!("state component {i} became non-finite")));
                }
                x[i] = v;
            }
            step += 1;
        }

        Ok(Trajectory {
            times: record_steps.iter().map(|&k| k as f64 * dt).collect(),
            states,
            path_seed: seed,
        })
    }
}

/// Simulates path `path_index` of the ensemble described by `cfg`.
pub fn simulate_path(params: &ModelParams, cfg: &SimConfig, path_index: usize) -> Result<Trajectory> {
    let steps = cfg.record_steps()?;
    Simulator::new(params).run(&params.x0, cfg.dt, &steps, path_index, cfg.seed)
}

/// Simulates paths `0..cfg.paths` on `cfg.workers` threads, returned in index order.
pub fn simulate_paths(params: &ModelParams, cfg: &SimConfig) -> Result<Vec<Trajectory>> {
    let steps = cfg.record_steps()?;
    let sim = Simulator::new(params);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        (0..cfg.paths)
            .into_par_iter()
            .map(|i| sim.run(&params.x0, cfg.dt, &steps, i, cfg.seed))
            .collect()
    });
    results.into_iter().collect()
}

/// Sample mean and its standard error.
pub(crate) fn mean_and_se(xs: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub count: Vec<usize>,
    /// `mean[k][i]`: sample mean of `X_{t_k, i}`.
    pub mean: Vec<Vec<f64>>,
    pub mean_se: Vec<Vec<f64>>,
    /// `second_moment[k][i][j]`: sample mean of `X_{t_k,i} X_{t_k,j}`.
    pub second_moment: Vec<Vec<Vec<f64>>>,
    /// `projection_second_moment[k][p]`: sample mean of `|⟨v_p, X_{t_k}⟩|²`.
    pub projection_second_moment: Vec<Vec<f64>>,
    pub projection_se: Vec<Vec<f64>>,
    /// `raw_projections[k][p][path]`, when requested.
    pub raw_projections: Option<Vec<Vec<Vec<Complex64>>>>,
}

impl EnsembleStats {
    pub fn from_paths(paths: &[Trajectory], projections: &[Vec<Complex64>], keep_raw: bool) -> Self {
        let times = paths.first().map(|p| p.times.clone()).unwrap_or_default();
        let d = paths
            .first()
            .and_then(|p| p.states.first())
            .map_or(0, Vec::len);
        let mut stats = EnsembleStats {
            times: times.clone(),
            count: vec![paths.len(); times.len()],
            mean: Vec::new(),
            mean_se: Vec::new(),
            second_moment: Vec::new(),
            projection_second_moment: Vec::new(),
            projection_se: Vec::new(),
            raw_projections: keep_raw.then(Vec::new),
        };
        let n = paths.len() as f64;
        for k in 0..times.len() {
            let column = |i: usize| paths.iter().map(move |p| p.states[k][i]);
            let (mean, se): (Vec<f64>, Vec<f64>) = (0..d).map(|i| mean_and_se(column(i))).unzip();
            stats.mean.push(mean);
            stats.mean_se.push(se);
            stats.second_moment.push(
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| paths.iter().map(|p| p.states[k][i] * p.states[k][j]).sum::<f64>() / n)
                            .collect()
                    })
                    .collect(),
            );
            let raw: Vec<Vec<Complex64>> = projections
                .iter()
                .map(|v| paths.iter().map(|p| project(v, &p.states[k])).collect())
                .collect();
            let (m2, se): (Vec<f64>, Vec<f64>) = raw
                .iter()
                .map(|vals| mean_and_se(vals.iter().map(|z| z.norm_sqr())))
                .unzip();
            stats.projection_second_moment.push(m2);
            stats.projection_se.push(se);
            if let Some(r) = stats.raw_projections.as_mut() {
                r.push(raw);
            }
        }
        stats
    }

    /// CSV with header `t,mean_1..mean_d,proj_k_second_moment...`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.mean.first().map_or(0, Vec::len);
        let np = self.projection_second_moment.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=d {
            out.push_str(&format!(",mean_{i}"));
        }
        for k in 0..np {
            out.push_str(&format!(",proj_{k}_second_moment"));
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&machine(*t));
            for v in self.mean[k].iter().chain(&self.projection_second_moment[k]) {
                out.push(',');
                out.push_str(&machine(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the ensemble and aggregates means and projected second moments.
pub fn simulate_ensemble(
    params: &ModelParams,
    cfg: &SimConfig,
    projections: &[Vec<Complex64>],
    keep_raw: bool,
) -> Result<EnsembleStats> {
    let paths = simulate_paths(params, cfg)?;
    Ok(EnsembleStats::from_paths(&paths, projections, keep_raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use approx::assert_relative_eq;

    #[test]
    fn seeds_are_pinned() {
        // First SplitMix64 output from state 0 (after one increment).
        assert_eq!(path_seed(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_ne!(path_seed(42, 0), path_seed(42, 1));
        assert_ne!(path_seed(42, 0), path_seed(43, 0));
    }

    #[test]
    fn deterministic_flow_matches_closed_form() {
        let cfg = SimConfig::new(1e-3, 1.0, 1, 7);
        let tr = simulate_path(&r1(), &cfg, 0).unwrap();
        let x = &tr.states[0];
        assert_relative_eq!(x[0], 1f64.cosh(), max_relative = 2e-3);
        assert_relative_eq!(x[1], 1f64.sinh(), max_relative = 2e-3);
    }

    #[test]
    fn zero_horizon_records_initial_state() {
        let cfg = SimConfig::new(1e-3, 0.0, 1, 1);
        let tr = simulate_path(&r3(), &cfg, 0).unwrap();
        assert_eq!(tr.times, vec![0.0]);
        assert_eq!(tr.states, vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn same_seed_same_path() {
        let mut cfg = SimConfig::new(1e-2, 2.0, 1, 99);
        cfg.record_grid = vec![0.5, 1.0, 2.0];
        let a = simulate_path(&r3(), &cfg, 3).unwrap();
        let b = simulate_path(&r3(), &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&r3(), &cfg, 4).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn states_stay_in_the_cone() {
        let mut cfg = SimConfig::new(1e-2, 5.0, 50, 5);
        cfg.record_grid = (0..=10).map(|k| k as f64 * 0.5).collect();
        let mut p = r3();
        p.x0 = vec![0.0, 0.0];
        for tr in simulate_paths(&p, &cfg).unwrap() {
            assert!(tr.states.iter().flatten().all(|&x| x >= 0.0));
            assert_eq!(tr.states.len(), tr.times.len());
        }
    }

    #[test]
    fn deterministic_ensemble_has_no_spread() {
        let cfg = SimConfig::new(1e-3, 1.0, 5, 11);
        let v = vec![vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]];
        let stats = simulate_ensemble(&r1(), &cfg, &v, true).unwrap();
        assert_eq!(stats.count, vec![5]);
        assert!(stats.mean_se[0].iter().all(|&s| s == 0.0));
        assert_eq!(stats.projection_se[0][0], 0.0);
        let raw = &stats.raw_projections.unwrap()[0][0];
        assert!(raw.iter().all(|z| *z == raw[0]));
    }

    #[test]
    fn record_grid_is_validated() {
        let mut cfg = SimConfig::new(1e-2, 1.0, 1, 0);
        cfg.record_grid = vec![0.5, 0.25];
        assert!(cfg.record_steps().is_err());
        cfg.record_grid = vec![0.5, 2.0];
        assert!(cfg.record_steps().is_err());
        cfg.record_grid = vec![0.0, 0.333];
        assert_eq!(cfg.record_steps().unwrap(), vec![0, 33]);
        assert_relative_eq!(cfg.record_times().unwrap()[1], 0.33, epsilon = 1e-15);
        cfg.paths = 0;
        assert!(cfg.record_steps().is_err());
    }

    #[test]
    fn csv_layout() {
        let cfg = SimConfig::new(0.5, 1.0, 1, 0).with_grid(&[0.0, 1.0]);
        let tr = simulate_path(&r1(), &cfg, 0).unwrap();
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x1,x2"));
        assert_eq!(lines.next(), Some("0.0000000000000000,1.0000000000000000,0.0000000000000000"));
    }
}
