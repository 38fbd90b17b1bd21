//! Empirical verification harness for the quantitative claims behind the
//! model: the one-step increment-moment bound, strong convergence of the
//! Euler polygonal approximation, non-negativity of the limit process, the
//! Markov semigroup identity at the PDE level, and a triangulation report
//! that cross-checks closed forms, the PDE solver, and Monte Carlo.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_form::{self, MomentQuery, Regime};
use crate::error::{invalid, GcirError, Result};
use crate::model::{CirParams, GFunction, PayoffShape};
use crate::numeric::{linear_fit, pairwise_sum};
use crate::pde::{self, PdeProblem, PdeSolution, SpatialGrid};
use crate::simulate::{
    lower_expectation_constant, simulate_ensemble, upper_expectation_bangbang,
    upper_expectation_constant, EstimateReport, EulerConfig, VolatilityControl,
};

/// Mesh-refinement study: mesh widths (descending), the measured errors,
/// and the least-squares slope of `log error` against `log h`.
#[derive(Debug, Clone, Serialize)]
pub struct RateStudy {
    pub meshes: Vec<f64>,
    pub errors: Vec<f64>,
    pub fitted_slope: f64,
    pub fitted_intercept: f64,
}

impl RateStudy {
    /// Fit over the strictly positive errors (exact zeros, e.g. a coarse
    /// mesh coinciding with the coupling reference, carry no rate
    /// information). Fewer than two positive points leave the slope NaN.
    pub fn from_measurements(meshes: Vec<f64>, errors: Vec<f64>) -> Self {
        assert_eq!(meshes.len(), errors.len());
        let (log_h, log_e): (Vec<f64>, Vec<f64>) = meshes
            .iter()
            .zip(&errors)
            .filter(|(_, &e)| e > 0.0)
            .map(|(&h, &e)| (h.ln(), e.ln()))
            .unzip();
        let (fitted_slope, fitted_intercept) = if log_h.len() >= 2 {
            linear_fit(&log_h, &log_e)
        } else {
            (f64::NAN, f64::NAN)
        };
        Self {
            meshes,
            errors,
            fitted_slope,
            fitted_intercept,
        }
    }

    /// CSV rows `h,error` for plotting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "h,error")?;
        for (h, e) in self.meshes.iter().zip(&self.errors) {
            writeln!(w, "{h},{e}")?;
        }
        Ok(())
    }
}

fn validate_meshes(mesh_steps: &[usize]) -> Result<()> {
    if mesh_steps.len() < 3 {
        return Err(invalid("rate studies need at least 3 meshes"));
    }
    if mesh_steps.contains(&0) {
        return Err(invalid("mesh step counts must be positive"));
    }
    for w in mesh_steps.windows(2) {
        if w[1] <= w[0] {
            return Err(invalid("mesh step counts must be strictly ascending"));
        }
    }
    Ok(())
}

const BLOCK: usize = 256;

fn study_rng(seed: u64, path: u64, tag: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    key[16..24].copy_from_slice(&tag.to_le_bytes());
    key[24..32].copy_from_slice(b"gcirstdy");
    ChaCha12Rng::from_seed(key)
}

/// Scaling study for the one-step increment moment `E^[U_n(t)²]` with
/// `U_n(t) = |X_n(t) - X_n(eta_n(t))|`, sampled at the interval midpoints
/// (the off-grid times maximizing `t - eta_n(t)`), under the worst constant
/// control `theta = sigma_hi`. The claimed scaling is linear in `h`, so the
/// fitted slope should sit near 1 whenever the diffusion term is active.
#[allow(clippy::too_many_arguments)]
pub fn increment_moment_study(
    params: &CirParams,
    gf: &GFunction,
    config_base: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    mesh_steps: &[usize],
) -> Result<RateStudy> {
    validate_meshes(mesh_steps)?;
    let theta = gf.sigma_hi();
    let span = t_prime - t;
    if span <= 0.0 {
        return Err(invalid("increment study needs t < t_prime"));
    }
    let n_paths = config_base.n_paths;

    let mut meshes = Vec::new();
    let mut errors = Vec::new();
    for &n_steps in mesh_steps {
        let h = span / n_steps as f64;
        let n_blocks = n_paths.div_ceil(BLOCK);
        let partials: Vec<Vec<f64>> = (0..n_blocks)
            .into_par_iter()
            .map(|b| -> Result<Vec<f64>> {
                let mut acc = vec![0.0f64; n_steps];
                let lo = b * BLOCK;
                let hi = ((b + 1) * BLOCK).min(n_paths);
                for path in lo..hi {
                    increment_path(
                        params,
                        theta,
                        n_steps,
                        h,
                        config_base.seed,
                        path as u64,
                        x0,
                        &mut acc,
                    )?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut sums = vec![0.0f64; n_steps];
        for p in &partials {
            for (s, v) in sums.iter_mut().zip(p) {
                *s += v;
            }
        }
        let worst = sums
            .iter()
            .map(|s| s / n_paths as f64)
            .fold(0.0f64, f64::max);
        meshes.push(h);
        errors.push(worst);
    }
    Ok(RateStudy::from_measurements(meshes, errors))
}

#[allow(clippy::too_many_arguments)]
fn increment_path(
    params: &CirParams,
    theta: f64,
    n_steps: usize,
    h: f64,
    seed: u64,
    path: u64,
    x0: f64,
    acc: &mut [f64],
) -> Result<()> {
    let mut rng = study_rng(seed, path, n_steps as u64);
    let sqrt_half = (0.5 * h).sqrt();
    let th_sq = theta * theta;
    let mut x = x0;
    for (k, slot) in acc.iter_mut().enumerate() {
        let xi_a: f64 = rng.sample(StandardNormal);
        let xi_b: f64 = rng.sample(StandardNormal);
        let drift = params.dt_drift(x) + th_sq * params.qv_drift(x);
        let diff = params.projected_diffusion(x) * theta;
        // Midpoint state of the polygonal interpolant over this step.
        let u = drift * 0.5 * h + diff * sqrt_half * xi_a;
        *slot += u * u;
        // Full-step Wiener increment is the sum of the two half increments.
        x += drift * h + diff * sqrt_half * (xi_a + xi_b);
        if !x.is_finite() {
            return Err(GcirError::NonFiniteState { path, step: k });
        }
    }
    Ok(())
}

/// Coupled strong-error study: the finest mesh acts as the reference path
/// and every coarser mesh consumes the same Wiener increments, subsampled
/// (synchronous coupling), under the constant worst control
/// `theta = sigma_hi`. Per mesh the statistic is the sample mean of
/// `sup_j |X_coarse(t_j) - X_ref(t_j)|²` over the coarse grid times. Only
/// monotone decrease is claimed, no rate.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_study(
    params: &CirParams,
    gf: &GFunction,
    config_base: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    mesh_steps: &[usize],
) -> Result<RateStudy> {
    validate_meshes(mesh_steps)?;
    let n_ref = *mesh_steps.last().unwrap();
    for &n in mesh_steps {
        if !n_ref.is_multiple_of(n) {
            return Err(invalid(format!(
                "coarse mesh {n} must divide the reference mesh {n_ref} for synchronous coupling"
            )));
        }
    }
    let span = t_prime - t;
    if span <= 0.0 {
        return Err(invalid("strong error study needs t < t_prime"));
    }
    let theta = gf.sigma_hi();
    let th_sq = theta * theta;
    let n_paths = config_base.n_paths;
    let n_coarse = mesh_steps.len() - 1;
    let h_ref = span / n_ref as f64;
    let sqrt_h_ref = h_ref.sqrt();
    let strides: Vec<usize> = mesh_steps[..n_coarse].iter().map(|&n| n_ref / n).collect();
    let h_coarse: Vec<f64> = mesh_steps[..n_coarse]
        .iter()
        .map(|&n| span / n as f64)
        .collect();

    let n_blocks = n_paths.div_ceil(BLOCK);
    let partials: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| -> Result<Vec<f64>> {
            let mut acc = vec![0.0f64; n_coarse];
            let lo = b * BLOCK;
            let hi = ((b + 1) * BLOCK).min(n_paths);
            let mut x_c = vec![0.0f64; n_coarse];
            let mut dw_acc = vec![0.0f64; n_coarse];
            let mut sup = vec![0.0f64; n_coarse];
            for path in lo..hi {
                let mut rng = study_rng(config_base.seed, path as u64, u64::MAX);
                let mut x_ref = x0;
                x_c.fill(x0);
                dw_acc.fill(0.0);
                sup.fill(0.0);
                for k in 0..n_ref {
                    let xi: f64 = rng.sample(StandardNormal);
                    let dw = sqrt_h_ref * xi;
                    let drift = params.dt_drift(x_ref) + th_sq * params.qv_drift(x_ref);
                    x_ref += drift * h_ref + params.projected_diffusion(x_ref) * theta * dw;
                    if !x_ref.is_finite() {
                        return Err(GcirError::NonFiniteState {
                            path: path as u64,
                            step: k,
                        });
                    }
                    for c in 0..n_coarse {
                        dw_acc[c] += dw;
                        if (k + 1).is_multiple_of(strides[c]) {
                            let xc = x_c[c];
                            let drift_c = params.dt_drift(xc) + th_sq * params.qv_drift(xc);
                            x_c[c] = xc
                                + drift_c * h_coarse[c]
                                + params.projected_diffusion(xc) * theta * dw_acc[c];
                            dw_acc[c] = 0.0;
                            let d = x_c[c] - x_ref;
                            sup[c] = sup[c].max(d * d);
                        }
                    }
                }
                for c in 0..n_coarse {
                    acc[c] += sup[c];
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut sums = vec![0.0f64; n_coarse];
    for p in &partials {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    // Report coarse meshes descending in h, then the reference itself with
    // error exactly zero (a mesh coinciding with the reference replays the
    // identical recursion).
    let mut meshes: Vec<f64> = h_coarse.clone();
    let mut errors: Vec<f64> = sums.iter().map(|s| s / n_paths as f64).collect();
    meshes.push(h_ref);
    errors.push(0.0);
    Ok(RateStudy::from_measurements(meshes, errors))
}

/// Non-negativity diagnostics per mesh: the sample mean of the terminal
/// negative part `max(-X_n(t'), 0)` (as a [`RateStudy`]) plus the fraction
/// of paths whose running minimum dipped below zero. Both vanish as the
/// mesh refines even though individual iterates may leave `[0, ∞)`.
#[derive(Debug, Clone, Serialize)]
pub struct NegativityStudy {
    pub terminal_neg: RateStudy,
    pub negative_path_fraction: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn negativity_diagnostic(
    params: &CirParams,
    gf: &GFunction,
    config_base: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    mesh_steps: &[usize],
) -> Result<NegativityStudy> {
    validate_meshes(mesh_steps)?;
    let span = t_prime - t;
    if span <= 0.0 {
        return Err(invalid("negativity diagnostic needs t < t_prime"));
    }
    let control = VolatilityControl::constant(gf.sigma_hi(), gf)?;
    let mut meshes = Vec::new();
    let mut means = Vec::new();
    let mut fractions = Vec::new();
    for &n_steps in mesh_steps {
        let config = EulerConfig {
            n_steps,
            ..*config_base
        };
        let ens = simulate_ensemble(params, &control, &config, t, t_prime, x0)?;
        let neg: Vec<f64> = ens.terminal_values.iter().map(|&v| (-v).max(0.0)).collect();
        let frac = ens.min_values.iter().filter(|&&m| m < 0.0).count() as f64
            / ens.min_values.len() as f64;
        meshes.push(span / n_steps as f64);
        means.push(pairwise_sum(&neg) / neg.len() as f64);
        fractions.push(frac);
    }
    Ok(NegativityStudy {
        terminal_neg: RateStudy::from_measurements(meshes, means),
        negative_path_fraction: fractions,
    })
}

/// PDE-level Markov/flow identity: solve on `[t'-gamma, t']` with the
/// payoff as terminal data, feed the slice at `t'-gamma` into a second
/// solve on `[0, t'-gamma]`, and compare the result at `t = 0` against the
/// one-shot solve in max norm. The identity is exact at the PDE level; the
/// returned discrepancy is pure discretization (and exactly zero when the
/// split degenerates to `gamma = 0` or `gamma = t'`).
pub fn markov_semigroup_check(problem: &PdeProblem, grid: &SpatialGrid, gamma: f64) -> Result<f64> {
    if !(gamma.is_finite() && (0.0..=problem.t_prime).contains(&gamma)) {
        return Err(invalid(format!(
            "gamma must lie in [0, t_prime = {}], got {gamma}",
            problem.t_prime
        )));
    }
    let one_shot = pde::solve(problem, grid, None)?;
    let split = problem.t_prime - gamma;
    let terminal = problem.terminal_slice(grid);
    let stage1 = pde::solve_segment(problem, grid, split, problem.t_prime, &terminal, None)?;
    let stage2 = pde::solve_segment(problem, grid, 0.0, split, stage1.initial_slice(), None)?;
    let disc = stage2
        .initial_slice()
        .iter()
        .zip(one_shot.initial_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(disc)
}

/// Inputs of a triangulation run beyond the problem itself.
#[derive(Debug, Clone, Copy)]
pub struct TriangulationConfig {
    pub euler: EulerConfig,
    /// Points of the constant-control theta grid.
    pub n_theta: usize,
    /// Evaluation state and time of the queried expectation.
    pub x0: f64,
    pub t: f64,
}

/// One route's value against the oracle.
#[derive(Debug, Clone, Serialize)]
pub struct RouteCheck {
    pub route: String,
    pub value: f64,
    pub reference: f64,
    pub discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Cross-check of all computational routes for one query, with oracle
/// comparisons when a degenerate regime provides one.
#[derive(Debug, Clone, Serialize)]
pub struct TriangulationReport {
    pub regime: Option<String>,
    pub t: f64,
    pub t_prime: f64,
    pub x0: f64,
    pub oracle_upper: Option<f64>,
    pub oracle_lower: Option<f64>,
    pub pde_upper: f64,
    pub pde_lower: f64,
    pub mc_upper_constant: EstimateReport,
    pub mc_upper_bangbang: EstimateReport,
    pub mc_lower_constant: EstimateReport,
    pub checks: Vec<RouteCheck>,
    pub all_passed: bool,
}

/// Oracle value pair (upper, lower) for the payoffs covered by the closed
/// forms in the given regime, if any.
fn oracle_values(
    problem: &PdeProblem,
    regime: Option<Regime>,
    t: f64,
    x0: f64,
) -> Result<Option<(f64, f64)>> {
    let Some(regime) = regime else {
        return Ok(None);
    };
    let query = MomentQuery::new(problem.params, t, problem.t_prime, x0)?;
    let pair = match (regime, problem.payoff.shape()) {
        (Regime::DriftOnly, PayoffShape::Identity) => {
            let m = closed_form::mean_drift_case(&query, regime)?;
            Some((m, m))
        }
        (Regime::DriftOnly, PayoffShape::Square) => Some((
            closed_form::second_moment_drift_case(&query, problem.gf.sigma_hi_sq(), regime)?,
            closed_form::second_moment_drift_case(&query, problem.gf.sigma_lo_sq(), regime)?,
        )),
        (Regime::QvOnly, PayoffShape::Identity) => Some((
            closed_form::mean_upper_qv_case(&query, &problem.gf, regime)?,
            closed_form::mean_lower_qv_case(&query, &problem.gf, regime)?,
        )),
        _ => None,
    };
    Ok(pair)
}

/// Run every route for `E^[phi(X^{t,x0}_{t'})]` and, in an oracle regime,
/// check the mutual agreement: the PDE against the closed form at
/// `1e-2 · (1 + |oracle|)`, Monte Carlo at `3 SE + 5e-3`.
pub fn triangulation_report(
    problem: &PdeProblem,
    grid: &SpatialGrid,
    config: &TriangulationConfig,
    regime: Option<Regime>,
) -> Result<TriangulationReport> {
    let t = config.t;
    let x0 = config.x0;
    let params = &problem.params;
    let gf = &problem.gf;

    let upper_sol = pde::solve(problem, grid, None)?;
    let pde_upper = upper_sol.evaluate(t, x0)?;
    let neg_problem = PdeProblem::new(*params, *gf, problem.payoff.negated(), problem.t_prime)?;
    let lower_sol = pde::solve(&neg_problem, grid, None)?;
    let pde_lower = -lower_sol.evaluate(t, x0)?;

    let (mc_up_const, theta_star) = upper_expectation_constant(
        &problem.payoff,
        params,
        gf,
        &config.euler,
        t,
        problem.t_prime,
        x0,
        config.n_theta,
    )?;
    let upper_field = std::sync::Arc::new(upper_sol.optimal_control_field());
    let mc_up_bb = upper_expectation_bangbang(
        &problem.payoff,
        params,
        gf,
        &config.euler,
        t,
        problem.t_prime,
        x0,
        upper_field,
    )?;
    let (mc_lo_const, theta_star_lower) = lower_expectation_constant(
        &problem.payoff,
        params,
        gf,
        &config.euler,
        t,
        problem.t_prime,
        x0,
        config.n_theta,
    )?;

    let oracle = oracle_values(problem, regime, t, x0)?;
    let mut checks = Vec::new();
    if let Some((up, lo)) = oracle {
        let pde_tol = |reference: f64| 1e-2 * (1.0 + reference.abs());
        let mc_tol = |se: f64| 3.0 * se + 5e-3;
        let mut push = |route: &str, value: f64, reference: f64, tolerance: f64| {
            let discrepancy = (value - reference).abs();
            checks.push(RouteCheck {
                route: route.to_string(),
                value,
                reference,
                discrepancy,
                tolerance,
                passed: discrepancy <= tolerance,
            });
        };
        push("pde_upper", pde_upper, up, pde_tol(up));
        push("pde_lower", pde_lower, lo, pde_tol(lo));
        push("mc_upper_constant", mc_up_const.value, up, mc_tol(mc_up_const.std_error));
        push("mc_upper_bangbang", mc_up_bb.value, up, mc_tol(mc_up_bb.std_error));
        push("mc_lower_constant", mc_lo_const.value, lo, mc_tol(mc_lo_const.std_error));
    }
    let all_passed = checks.iter().all(|c| c.passed);

    Ok(TriangulationReport {
        regime: regime.map(|r| {
            match r {
                Regime::DriftOnly => "drift_only",
                Regime::QvOnly => "qv_only",
            }
            .to_string()
        }),
        t,
        t_prime: problem.t_prime,
        x0,
        oracle_upper: oracle.map(|(u, _)| u),
        oracle_lower: oracle.map(|(_, l)| l),
        pde_upper,
        pde_lower,
        mc_upper_constant: EstimateReport::from_estimate(mc_up_const, Some(theta_star)),
        mc_upper_bangbang: EstimateReport::from_estimate(mc_up_bb, None),
        mc_lower_constant: EstimateReport::from_estimate(mc_lo_const, Some(theta_star_lower)),
        checks,
        all_passed,
    })
}

impl TriangulationReport {
    /// Aligned-column rendering for humans.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "query: E^[phi(X_t')] at t = {}, t' = {}, x0 = {}, regime = {}\n",
            self.t,
            self.t_prime,
            self.x0,
            self.regime.as_deref().unwrap_or("general")
        ));
        out.push_str(&format!(
            "{:<22}{:>16}{:>14}{:>12}\n",
            "route", "value", "std_error", "theta*"
        ));
        let mut row = |name: &str, value: f64, se: Option<f64>, th: Option<f64>| {
            out.push_str(&format!(
                "{:<22}{:>16.8}{:>14}{:>12}\n",
                name,
                value,
                se.map(|s| format!("{s:.2e}")).unwrap_or_else(|| "-".into()),
                th.map(|t| format!("{t:.6}")).unwrap_or_else(|| "-".into()),
            ));
        };
        if let Some(u) = self.oracle_upper {
            row("closed_form_upper", u, None, None);
        }
        if let Some(l) = self.oracle_lower {
            row("closed_form_lower", l, None, None);
        }
        row("pde_upper", self.pde_upper, None, None);
        row("pde_lower", self.pde_lower, None, None);
        row(
            "mc_upper_constant",
            self.mc_upper_constant.value,
            Some(self.mc_upper_constant.std_error),
            self.mc_upper_constant.theta_star,
        );
        row(
            "mc_upper_bangbang",
            self.mc_upper_bangbang.value,
            Some(self.mc_upper_bangbang.std_error),
            None,
        );
        row(
            "mc_lower_constant",
            self.mc_lower_constant.value,
            Some(self.mc_lower_constant.std_error),
            self.mc_lower_constant.theta_star,
        );
        if !self.checks.is_empty() {
            out.push_str(&format!(
                "\n{:<22}{:>14}{:>14}{:>10}\n",
                "check vs oracle", "discrepancy", "tolerance", "status"
            ));
            for c in &self.checks {
                out.push_str(&format!(
                    "{:<22}{:>14.3e}{:>14.3e}{:>10}\n",
                    c.route,
                    c.discrepancy,
                    c.tolerance,
                    if c.passed { "pass" } else { "FAIL" }
                ));
            }
        }
        out
    }
}

/// Extract a [`PdeSolution`]-compatible oracle error in max norm at `t = 0`
/// for the qv-only mean problem; shared by the semigroup acceptance check.
pub fn qv_oracle_error_at_zero(sol: &PdeSolution, params: &CirParams, gf: &GFunction) -> Result<f64> {
    let grid = sol.grid();
    let mut err = 0.0f64;
    for i in 0..grid.nx() {
        let q = MomentQuery::new(*params, 0.0, *sol.times().last().unwrap(), grid.node(i))?;
        let oracle = closed_form::mean_upper_qv_case(&q, gf, Regime::QvOnly)?;
        err = err.max((sol.initial_slice()[i] - oracle).abs());
    }
    Ok(err)
}
