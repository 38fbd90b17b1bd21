//! `gcir` — batch front door for the uncertain-CIR engine.
//!
//! One subcommand per computation; a single JSON config document describes
//! the run; artifacts are CSV/JSON files embedding `{tool_version,
//! config_hash, seed}`. Identical config and seed produce byte-identical
//! JSON artifacts regardless of the worker-thread count; wall-clock
//! metadata goes to the `run_meta.json` side-channel only.
//!
//! Exit codes: 0 success, 1 runtime failure (including a `compare`
//! tolerance gate violation), 2 configuration or usage errors.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use gcir::analysis::{
    increment_moment_study, markov_semigroup_check, negativity_diagnostic, strong_error_study,
    triangulation_report, RateStudy, TriangulationConfig,
};
use gcir::closed_form::{
    mean_drift_case, mean_lower_qv_case, mean_upper_qv_case, second_moment_drift_case, MomentQuery,
    Regime,
};
use gcir::model::GFunction;
use gcir::pde::{self, PdeProblem};
use gcir::simulate::{
    lower_expectation_bangbang, lower_expectation_constant, mc_expectation, simulate_ensemble,
    upper_expectation_bangbang, upper_expectation_constant, EstimateReport, McEstimate,
};

use config::{ConfigError, ControlConfig, RunConfig, StudyConfig};

#[derive(Parser)]
#[command(
    name = "gcir",
    version,
    about = "Upper/lower expectations of CIR functionals under volatility uncertainty",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON run configuration (required for every subcommand except gfun).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory artifacts are written into (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker-thread hint (also GCIR_THREADS); must not change results.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the sublinear generator G(a) for a band.
    Gfun {
        #[arg(long)]
        lo_sq: f64,
        #[arg(long)]
        hi_sq: f64,
        #[arg(long, allow_hyphen_values = true)]
        a: f64,
    },
    /// Closed-form moments for the config's degenerate regime.
    Moments,
    /// Solve the nonlinear PDE and export the solution surface.
    Pde,
    /// Simulate one Euler ensemble under the configured control.
    Simulate,
    /// Upper expectation (theta-grid, constant, piecewise, or bang-bang).
    Upper,
    /// Lower expectation (negate, run the upper estimator, negate back).
    Lower,
    /// Mesh-refinement studies (increment, strong error, negativity).
    Converge,
    /// Two-stage vs one-shot PDE solve (semigroup identity).
    #[command(name = "markov-check")]
    MarkovCheck,
    /// Triangulate all routes and gate on oracle-regime tolerances.
    Compare,
}

enum AppError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.0)
    }
}

impl From<gcir::GcirError> for AppError {
    fn from(e: gcir::GcirError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

#[derive(Serialize, Clone)]
struct Meta {
    tool_version: &'static str,
    config_hash: String,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Artifact<T: Serialize> {
    meta: Meta,
    #[serde(flatten)]
    body: T,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("GCIR_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // Build the global pool before any parallel work; results do not
        // depend on the pool size by construction.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(code) => code,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, AppError> {
    if let Command::Gfun { lo_sq, hi_sq, a } = cli.command {
        let g = GFunction::with_band(lo_sq, hi_sq).map_err(|e| AppError::Config(e.to_string()))?;
        println!("{}", g.eval(a));
        return Ok(ExitCode::SUCCESS);
    }

    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| AppError::Config("--config <path> is required for this subcommand".into()))?;
    let config = RunConfig::load(config_path)?;
    let meta = Meta {
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: sha256_hex(&config.canonical_with_seed(cli.seed)),
        seed: config.effective_seed(cli.seed),
    };
    fs::create_dir_all(&cli.out_dir)?;
    write_run_meta(&cli.out_dir)?;

    match cli.command {
        Command::Gfun { .. } => unreachable!("handled above"),
        Command::Moments => cmd_moments(&config, &cli.out_dir, &meta),
        Command::Pde => cmd_pde(&config, &cli.out_dir, &meta),
        Command::Simulate => cmd_simulate(&config, cli.seed, &cli.out_dir, &meta),
        Command::Upper => cmd_upper_lower(&config, cli.seed, &cli.out_dir, &meta, false),
        Command::Lower => cmd_upper_lower(&config, cli.seed, &cli.out_dir, &meta, true),
        Command::Converge => cmd_converge(&config, cli.seed, &cli.out_dir, &meta),
        Command::MarkovCheck => cmd_markov(&config, &cli.out_dir, &meta),
        Command::Compare => cmd_compare(&config, cli.seed, &cli.out_dir, &meta),
    }
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(dir: &Path, name: &str, meta: &Meta, body: T) -> Result<PathBuf, AppError> {
    let path = dir.join(name);
    let artifact = Artifact {
        meta: meta.clone(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&artifact)
        .map_err(|e| AppError::Runtime(format!("serializing {name}: {e}")))?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    Ok(path)
}

fn meta_comment(meta: &Meta) -> String {
    format!(
        "# tool_version={} config_hash={} seed={}\n",
        meta.tool_version,
        meta.config_hash,
        meta.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into())
    )
}

/// Wall-clock side-channel; deliberately not part of the byte-identical
/// artifact set.
fn write_run_meta(dir: &Path) -> Result<(), AppError> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(dir.join("run_meta.json"), format!("{{\n  \"timestamp_unix_secs\": {secs}\n}}\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct MomentsBody {
    regime: String,
    t: f64,
    t_prime: f64,
    x0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    second_moment_upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    second_moment_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_lower: Option<f64>,
}

fn cmd_moments(config: &RunConfig, out_dir: &Path, meta: &Meta) -> Result<ExitCode, AppError> {
    let regime = config
        .regime()
        .ok_or_else(|| AppError::Config("regime: moments needs \"drift_only\" or \"qv_only\"".into()))?;
    let params = config.build_params()?;
    let gf = config.build_band()?;
    let query = MomentQuery::new(params, config.t, config.t_prime, config.x0)?;
    let body = match regime {
        Regime::DriftOnly => MomentsBody {
            regime: "drift_only".into(),
            t: config.t,
            t_prime: config.t_prime,
            x0: config.x0,
            mean: Some(mean_drift_case(&query, regime)?),
            second_moment_upper: Some(second_moment_drift_case(&query, gf.sigma_hi_sq(), regime)?),
            second_moment_lower: Some(second_moment_drift_case(&query, gf.sigma_lo_sq(), regime)?),
            mean_upper: None,
            mean_lower: None,
        },
        Regime::QvOnly => MomentsBody {
            regime: "qv_only".into(),
            t: config.t,
            t_prime: config.t_prime,
            x0: config.x0,
            mean: None,
            second_moment_upper: None,
            second_moment_lower: None,
            mean_upper: Some(mean_upper_qv_case(&query, &gf, regime)?),
            mean_lower: Some(mean_lower_qv_case(&query, &gf, regime)?),
        },
    };
    let path = write_json(out_dir, "moments.json", meta, body)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PdeSummary {
    t: f64,
    x0: f64,
    value: f64,
    x_max: f64,
    nx: usize,
    dt_used: f64,
    stored_levels: usize,
}

fn cmd_pde(config: &RunConfig, out_dir: &Path, meta: &Meta) -> Result<ExitCode, AppError> {
    let params = config.build_params()?;
    let gf = config.build_band()?;
    let payoff = config.build_payoff()?;
    let grid = config.build_grid()?;
    let problem = PdeProblem::new(params, gf, payoff, config.t_prime)?;
    let sol = pde::solve(&problem, &grid, None)?;
    let value = sol.evaluate(config.t, config.x0)?;

    let csv_path = out_dir.join("pde_solution.csv");
    let mut buf = Vec::new();
    buf.extend_from_slice(meta_comment(meta).as_bytes());
    sol.write_csv(&mut buf)?;
    fs::write(&csv_path, buf)?;

    let summary = PdeSummary {
        t: config.t,
        x0: config.x0,
        value,
        x_max: grid.x_max(),
        nx: grid.nx(),
        dt_used: sol.dt_used(),
        stored_levels: sol.n_levels(),
    };
    let json_path = write_json(out_dir, "pde_summary.json", meta, summary)?;
    println!("u({}, {}) = {value}", config.t, config.x0);
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    config: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    meta: &Meta,
) -> Result<ExitCode, AppError> {
    let params = config.build_params()?;
    let payoff = config.build_payoff()?;
    let euler = config.build_euler(seed_override)?;
    let control = config.build_control(config.control()?, &payoff)?;
    let ensemble = simulate_ensemble(&params, &control, &euler, config.t, config.t_prime, config.x0)?;

    let csv_path = out_dir.join("ensemble.csv");
    let mut buf = Vec::new();
    buf.extend_from_slice(meta_comment(meta).as_bytes());
    ensemble.write_csv(&mut buf)?;
    fs::write(&csv_path, buf)?;

    let est = mc_expectation(&payoff, &params, &control, &euler, config.t, config.t_prime, config.x0)?;
    let json_path = write_json(
        out_dir,
        "estimate.json",
        meta,
        EstimateReport::from_estimate(est, None),
    )?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EstimateBody {
    estimator: String,
    side: String,
    #[serde(flatten)]
    estimate: EstimateReport,
}

fn cmd_upper_lower(
    config: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    meta: &Meta,
    lower: bool,
) -> Result<ExitCode, AppError> {
    let params = config.build_params()?;
    let gf = config.build_band()?;
    let payoff = config.build_payoff()?;
    let euler = config.build_euler(seed_override)?;
    let (t, t_prime, x0) = (config.t, config.t_prime, config.x0);

    let (estimator, est, theta_star): (&str, McEstimate, Option<f64>) = match config.control()? {
        ControlConfig::Grid { n_theta } => {
            let (est, theta) = if lower {
                lower_expectation_constant(&payoff, &params, &gf, &euler, t, t_prime, x0, *n_theta)?
            } else {
                upper_expectation_constant(&payoff, &params, &gf, &euler, t, t_prime, x0, *n_theta)?
            };
            ("constant_grid", est, Some(theta))
        }
        ControlConfig::BangBang => {
            let field_payoff = if lower { payoff.negated() } else { payoff.clone() };
            let field = config.solve_control_field(&params, &gf, &field_payoff)?;
            let est = if lower {
                lower_expectation_bangbang(&payoff, &params, &gf, &euler, t, t_prime, x0, field)?
            } else {
                upper_expectation_bangbang(&payoff, &params, &gf, &euler, t, t_prime, x0, field)?
            };
            ("bang_bang", est, None)
        }
        c @ (ControlConfig::Constant { .. } | ControlConfig::Piecewise { .. }) => {
            let control = config.build_control(c, &payoff)?;
            let est = if lower {
                let neg =
                    mc_expectation(&payoff.negated(), &params, &control, &euler, t, t_prime, x0)?;
                McEstimate {
                    value: -neg.value,
                    std_error: neg.std_error,
                    n_paths: neg.n_paths,
                }
            } else {
                mc_expectation(&payoff, &params, &control, &euler, t, t_prime, x0)?
            };
            ("fixed_control", est, None)
        }
    };

    let side = if lower { "lower" } else { "upper" };
    let body = EstimateBody {
        estimator: estimator.into(),
        side: side.into(),
        estimate: EstimateReport::from_estimate(est, theta_star),
    };
    let path = write_json(out_dir, "estimate.json", meta, body)?;
    println!(
        "{side} expectation = {} (se {:.3e}); wrote {}",
        est.value, est.std_error, path.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StudyBody {
    kind: String,
    meshes: Vec<f64>,
    errors: Vec<f64>,
    fitted_slope: f64,
    fitted_intercept: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    negative_path_fraction: Option<Vec<f64>>,
}

fn cmd_converge(
    config: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    meta: &Meta,
) -> Result<ExitCode, AppError> {
    let params = config.build_params()?;
    let gf = config.build_band()?;
    let euler = config.build_euler(seed_override)?;
    let study = config
        .study
        .as_ref()
        .ok_or_else(|| AppError::Config("study: section required for converge".into()))?;
    let (t, t_prime, x0) = (config.t, config.t_prime, config.x0);

    let (kind, rate, fractions): (&str, RateStudy, Option<Vec<f64>>) = match study {
        StudyConfig::Increment { mesh_steps } => (
            "increment",
            increment_moment_study(&params, &gf, &euler, t, t_prime, x0, mesh_steps)?,
            None,
        ),
        StudyConfig::StrongError { mesh_steps } => (
            "strong_error",
            strong_error_study(&params, &gf, &euler, t, t_prime, x0, mesh_steps)?,
            None,
        ),
        StudyConfig::Negativity { mesh_steps } => {
            let s = negativity_diagnostic(&params, &gf, &euler, t, t_prime, x0, mesh_steps)?;
            ("negativity", s.terminal_neg, Some(s.negative_path_fraction))
        }
    };

    let csv_path = out_dir.join("rate_study.csv");
    let mut buf = Vec::new();
    buf.extend_from_slice(meta_comment(meta).as_bytes());
    rate.write_csv(&mut buf)?;
    fs::write(&csv_path, buf)?;

    let body = StudyBody {
        kind: kind.into(),
        meshes: rate.meshes.clone(),
        errors: rate.errors.clone(),
        fitted_slope: rate.fitted_slope,
        fitted_intercept: rate.fitted_intercept,
        negative_path_fraction: fractions,
    };
    let json_path = write_json(out_dir, "study.json", meta, body)?;
    println!(
        "{kind} study: slope {:.4}; wrote {} and {}",
        rate.fitted_slope,
        csv_path.display(),
        json_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MarkovBody {
    gamma: f64,
    discrepancy: f64,
    x_max: f64,
    nx: usize,
}

fn cmd_markov(config: &RunConfig, out_dir: &Path, meta: &Meta) -> Result<ExitCode, AppError> {
    let params = config.build_params()?;
    let gf = config.build_band()?;
    let payoff = config.build_payoff()?;
    let grid = config.build_grid()?;
    let gamma = config.gamma.unwrap_or(config.t_prime / 2.0);
    let problem = PdeProblem::new(params, gf, payoff, config.t_prime)?;
    let discrepancy = markov_semigroup_check(&problem, &grid, gamma)?;
    let body = MarkovBody {
        gamma,
        discrepancy,
        x_max: grid.x_max(),
        nx: grid.nx(),
    };
    let path = write_json(out_dir, "markov_check.json", meta, body)?;
    println!("semigroup discrepancy {discrepancy:.6e}; wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(
    config: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    meta: &Meta,
) -> Result<ExitCode, AppError> {
    let params = config.build_params()?;
    let gf = config.build_band()?;
    let payoff = config.build_payoff()?;
    let grid = config.build_grid()?;
    let euler = config.build_euler(seed_override)?;
    let n_theta = match &config.control {
        None => 5,
        Some(ControlConfig::Grid { n_theta }) => *n_theta,
        Some(_) => {
            return Err(AppError::Config(
                "control: compare uses the theta-grid maximizer; use {\"kind\": \"grid\", \"n_theta\": N} or omit".into(),
            ))
        }
    };
    let problem = PdeProblem::new(params, gf, payoff, config.t_prime)?;
    let tri_config = TriangulationConfig {
        euler,
        n_theta,
        x0: config.x0,
        t: config.t,
    };
    let report = triangulation_report(&problem, &grid, &tri_config, config.regime())?;

    let json_path = write_json(out_dir, "report.json", meta, &report)?;
    let text_path = out_dir.join("report.txt");
    fs::write(&text_path, format!("{}{}", meta_comment(meta), report.render_text()))?;
    println!("wrote {} and {}", json_path.display(), text_path.display());

    if config.regime().is_some() && !report.all_passed {
        eprintln!("compare: oracle-regime tolerance violated");
        for c in report.checks.iter().filter(|c| !c.passed) {
            eprintln!(
                "  {}: |{} - {}| = {:.3e} > {:.3e}",
                c.route, c.value, c.reference, c.discrepancy, c.tolerance
            );
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
