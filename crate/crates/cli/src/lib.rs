//! Command-line front end: loads a model file and dispatches to `cbi-core`.
//!
//! Exit status is 0 on success, 1 when a verification check fails and 2 on
//! usage, parse, domain or precondition errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cbi_core::format::{human, machine};
use cbi_core::moments::{affine_flow, second_moment_limit, second_moment_projection};
use cbi_core::riccati::{solve_v, OdeConfig};
use cbi_core::simulate::{simulate_ensemble, simulate_path, SimConfig};
use cbi_core::verify::{run_checks, ConvergenceMode, VerifyOptions, CHECK_NAMES};
use cbi_core::model::require_admissible;
use cbi_core::spectral::build_mean_params;
use cbi_core::{load_model, validate_admissible, Error, ModelParams, SpectralData};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;

#[derive(Debug, Parser)]
#[command(name = "cbi", version, about = "Moments, Laplace transforms, simulation and limit-theorem checks for multi-type CBI processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the admissibility conditions of a model file.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Print B̃, β̃, the Perron root and vectors, the left eigenpairs and the class.
    Spectral {
        #[command(flatten)]
        common: Common,
    },
    /// Exact mean vector E X_t over a time grid.
    Mean {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        times: Times,
    },
    /// Exact second moment E|<v,X_t>|² for a left eigenvector, with its normalised limit.
    SecondMoment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        times: Times,
        /// Index into the eigenpair list (Perron pair = 0).
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
    /// Laplace transform E exp(-<λ,X_t>) from the Riccati flow.
    Laplace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        times: Times,
        /// Laplace argument λ (comma-separated, non-negative).
        #[arg(long, value_parser = parse_floats)]
        lambda: Floats,
        /// Initial state (comma-separated); defaults to the model's x0.
        #[arg(long, value_parser = parse_floats)]
        x: Option<Floats>,
        /// Runge-Kutta step.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
    },
    /// Simulate one trajectory (`--paths 1`) or an ensemble summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        times: Times,
        #[command(flatten)]
        sim: Sim,
        /// Also report E|<v,X_t>|² for this eigenpair (ensembles only).
        #[arg(long)]
        pair: Option<usize>,
    },
    /// Run Monte Carlo checks and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: Sim,
        /// Time grid for the checks (comma-separated); each check has its own default.
        #[arg(long, value_parser = parse_floats)]
        t_grid: Option<Floats>,
        /// Single time for the moment and Laplace checks.
        #[arg(long)]
        t: Option<f64>,
        /// Checks to run (comma-separated).
        #[arg(long, value_delimiter = ',', default_value = "martingale,moment,convergence,direction,laplace")]
        checks: Vec<String>,
        /// Index into the eigenpair list (Perron pair = 0).
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Mode of the convergence check.
        #[arg(long, value_enum, default_value_t = Mode::L1)]
        mode: Mode,
        /// Laplace argument λ for the Laplace check; defaults to all ones.
        #[arg(long, value_parser = parse_floats)]
        lambda: Option<Floats>,
        /// Initial state for the Laplace check; defaults to the model's x0.
        #[arg(long, value_parser = parse_floats)]
        x: Option<Floats>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Output file; `.json` writes JSON, anything else CSV (text for `validate`/`spectral`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Times {
    /// A single time.
    #[arg(long, conflicts_with = "t_grid")]
    t: Option<f64>,
    /// Comma-separated times.
    #[arg(long, value_parser = parse_floats)]
    t_grid: Option<Floats>,
}

impl Times {
    fn grid(&self) -> Result<Vec<f64>, Error> {
        match (&self.t, &self.t_grid) {
            (Some(t), None) => Ok(vec![*t]),
            (None, Some(g)) => Ok(g.0.clone()),
            _ => Err(Error::Domain("one of --t or --t-grid is required".into())),
        }
    }
}

#[derive(Debug, Args)]
struct Sim {
    /// Time step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Number of independent paths.
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (results do not depend on it).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Sim {
    fn config(&self, horizon: f64) -> SimConfig {
        SimConfig::new(self.dt, horizon, self.paths, self.seed).with_workers(self.workers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    L1,
    L2,
}

/// A comma-separated list of numbers.
#[derive(Debug, Clone, PartialEq)]
struct Floats(Vec<f64>);

fn parse_floats(s: &str) -> Result<Floats, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Floats)
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                2
            } else {
                let _ = write!(out, "{rendered}");
                0
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Writes to `--out` when given, else to stdout.
fn emit(out: &mut dyn Write, target: Option<&Path>, text: &str) -> Result<(), Error> {
    match target {
        Some(path) => fs::write(path, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn to_json(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

fn complex(z: Complex64, fmt: fn(f64) -> String) -> String {
    if z.im == 0.0 {
        fmt(z.re)
    } else if z.im < 0.0 {
        format!("{}-{}i", fmt(z.re), fmt(-z.im))
    } else {
        format!("{}+{}i", fmt(z.re), fmt(z.im))
    }
}

fn csv(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join(",") + "\n").collect()
}

fn load(common: &Common) -> Result<ModelParams, Error> {
    load_model(&common.model)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, Error> {
    match command {
        Command::Validate { common } => {
            let params = load(&common)?;
            let report = validate_admissible(&params);
            let text = match common.out.as_deref() {
                Some(p) if is_json(p) => to_json(&report),
                _ => report.to_string(),
            };
            emit(out, common.out.as_deref(), &text)?;
            Ok(if report.ok { 0 } else { 1 })
        }
        Command::Spectral { common } => {
            let params = load(&common)?;
            require_admissible(&params)?;
            let sd = SpectralData::from_model(&params)?;
            let text = match common.out.as_deref() {
                Some(p) if is_json(p) => to_json(&sd.summary()),
                _ => spectral_text(&sd),
            };
            emit(out, common.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Mean { common, times } => {
            let params = load(&common)?;
            require_admissible(&params)?;
            let (b_tilde, beta_tilde) = build_mean_params(&params);
            let mut rows = vec![std::iter::once("t".to_string())
                .chain((1..=params.d).map(|i| format!("mean_{i}")))
                .collect::<Vec<_>>()];
            let mut records = Vec::new();
            for t in times.grid()? {
                let m = affine_flow(&b_tilde, &beta_tilde, &params.x0, t)?;
                rows.push(std::iter::once(t).chain(m.iter().copied()).map(machine).collect());
                records.push(serde_json::json!({ "t": t, "mean": m }));
            }
            let text = match common.out.as_deref() {
                Some(p) if is_json(p) => to_json(&records),
                _ => csv(&rows),
            };
            emit(out, common.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::SecondMoment { common, times, pair } => {
            let params = load(&common)?;
            require_admissible(&params)?;
            let sd = SpectralData::from_model(&params)?;
            let limit = if sd.is_supercritical() {
                Some(second_moment_limit(&params, &sd, pair)?)
            } else {
                sd.pair(pair)?;
                None
            };
            let mut header = vec!["t".to_string(), "total".into(), "e_term".into()];
            header.extend((1..=params.d).map(|l| format!("i_term_{l}")));
            header.push("nu_term".into());
            if limit.is_some() {
                header.extend(["h_times_total".into(), "m2".into()]);
            }
            let mut rows = vec![header];
            let mut records = Vec::new();
            for t in times.grid()? {
                let b = second_moment_projection(&params, &sd, pair, t)?;
                let mut row = vec![t, b.total, b.e_term];
                row.extend(&b.i_terms);
                row.push(b.nu_term);
                if let Some(l) = &limit {
                    row.extend([l.h(t) * b.total, l.m2]);
                }
                rows.push(row.into_iter().map(machine).collect());
                records.push(b);
            }
            let text = match common.out.as_deref() {
                Some(p) if is_json(p) => to_json(&serde_json::json!({
                    "pair": pair,
                    "lambda": sd.pair(pair)?.lambda,
                    "breakdown": records,
                    "limit": limit,
                })),
                _ => csv(&rows),
            };
            emit(out, common.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Laplace { common, times, lambda, x, dt } => {
            let (lambda, x) = (lambda.0, x.map(|x| x.0));
            let params = load(&common)?;
            require_admissible(&params)?;
            if lambda.len() != params.d {
                return Err(Error::Domain(format!("--lambda needs {} components, got {}", params.d, lambda.len())));
            }
            let x = x.unwrap_or_else(|| params.x0.clone());
            if x.len() != params.d || x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Domain(format!("--x must be {} non-negative numbers", params.d)));
            }
            let cfg = OdeConfig { step: dt, ..OdeConfig::default() };
            let mut header = vec!["t".to_string(), "laplace".into()];
            header.extend((1..=params.d).map(|i| format!("v_{i}")));
            header.push("psi_integral".into());
            let mut rows = vec![header];
            let mut records = Vec::new();
            for t in times.grid()? {
                let flow = solve_v(&params, &lambda, t, &cfg)?;
                let exponent: f64 = x.iter().zip(&flow.v_t).map(|(a, b)| a * b).sum::<f64>() + flow.psi_integral;
                let value = (-exponent).exp();
                let mut row = vec![t, value];
                row.extend(&flow.v_t);
                row.push(flow.psi_integral);
                rows.push(row.into_iter().map(machine).collect());
                records.push(serde_json::json!({
                    "t": t, "laplace": value, "v": flow.v_t, "psi_integral": flow.psi_integral,
                }));
            }
            let text = match common.out.as_deref() {
                Some(p) if is_json(p) => to_json(&records),
                _ => csv(&rows),
            };
            emit(out, common.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Simulate { common, times, sim, pair } => {
            let params = load(&common)?;
            require_admissible(&params)?;
            let grid = times.grid()?;
            let horizon = grid.iter().copied().fold(0.0, f64::max);
            let json = common.out.as_deref().is_some_and(is_json);
            let text = if sim.paths == 1 && pair.is_none() {
                let record = match (&times.t, &times.t_grid) {
                    (Some(_), None) => {
                        let n = (horizon / sim.dt).round() as usize;
                        (0..=n).map(|k| k as f64 * sim.dt).collect()
                    }
                    _ => grid,
                };
                let path = simulate_path(&params, &sim.config(horizon).with_grid(&record), 0)?;
                if json { to_json(&path) } else { path.to_csv() }
            } else {
                let projections = match pair {
                    Some(k) => vec![SpectralData::from_model(&params)?.pair(k)?.v.clone()],
                    None => Vec::new(),
                };
                let stats = simulate_ensemble(&params, &sim.config(horizon).with_grid(&grid), &projections, false)?;
                if json { to_json(&stats) } else { stats.to_csv() }
            };
            emit(out, common.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Verify { common, sim, t_grid, t, checks, pair, mode, lambda, x } => {
            let params = load(&common)?;
            for name in &checks {
                if !CHECK_NAMES.contains(&name.as_str()) {
                    return Err(Error::Domain(format!(
                        "unknown check `{name}` (expected one of {})",
                        CHECK_NAMES.join(", ")
                    )));
                }
            }
            let mut opts = VerifyOptions::new(sim.config(t.unwrap_or(1.0)));
            opts.t_grid = t_grid.map(|g| g.0);
            opts.t = t;
            opts.pair = pair;
            opts.mode = match mode {
                Mode::L1 => ConvergenceMode::L1,
                Mode::L2 => ConvergenceMode::L2,
            };
            opts.lambda = lambda.map(|l| l.0);
            opts.x = x.map(|x| x.0);
            let report = run_checks(&params, &checks, &opts)?;
            out.write_all(report.to_string().as_bytes())?;
            if let Some(path) = common.out.as_deref() {
                fs::write(path, report.to_json() + "\n")?;
            }
            Ok(if report.all_pass { 0 } else { 1 })
        }
    }
}

fn spectral_text(sd: &SpectralData) -> String {
    let mut s = String::new();
    let d = sd.d();
    s.push_str("B_tilde =\n");
    for i in 0..d {
        let row: Vec<String> = (0..d).map(|j| format!("{:>12}", human(sd.b_tilde[(i, j)]))).collect();
        s.push_str(&format!("  {}\n", row.join(" ")));
    }
    let vec = |v: &[f64]| v.iter().map(|x| human(*x)).collect::<Vec<_>>().join(", ");
    s.push_str(&format!("beta_tilde = [{}]\n", vec(&sd.beta_tilde)));
    s.push_str(&format!("s = {}\n", human(sd.s)));
    s.push_str(&format!("u_right = [{}]\n", vec(&sd.u_right)));
    s.push_str(&format!("u_left = [{}]\n", vec(&sd.u_left)));
    for (k, p) in sd.eigen.iter().enumerate() {
        let v: Vec<String> = p.v.iter().map(|z| complex(*z, human)).collect();
        s.push_str(&format!("pair {k}: lambda = {}, v = [{}]\n", complex(p.lambda, human), v.join(", ")));
    }
    s.push_str(&format!("irreducible = {}\n", sd.irreducible));
    s.push_str(&format!("class = {}\n", sd.class));
    s
}
