//! Euler "polygonal" approximation of the uncertain CIR dynamics under an
//! explicit volatility control, and Monte Carlo estimates of the upper and
//! lower expectations maximized over controls.
//!
//! A control `theta_t ∈ [sigma_lo, sigma_hi]` selects one prior, under which
//! `d<B>_t = theta_t² dt` and `dB_t = theta_t dW_t` for a standard Wiener
//! increment. One Euler step with mesh `h` and the control sampled at the
//! left endpoint reads
//!
//! ```text
//! X_{k+1} = X_k + (delta1 - beta1 X_k) h + (delta2 - beta2 X_k) theta_k² h
//!         + sigma~(X_k) theta_k sqrt(h) xi_k,
//! ```
//!
//! where `sigma~(x) = sigma sqrt(x)` for `x >= 0` and exactly 0 below: the
//! iterates may leave `[0, ∞)` transiently, but negative states carry no
//! stochastic increment. The normals `xi_k` come from a counter-based
//! stream keyed by `(seed, path_index)` and consumed in step order, so
//! estimates are bit-identical for any partitioning of paths across worker
//! threads, and re-running a path under a different control replays the
//! same noise (common random numbers).

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, GcirError, Result};
use crate::model::{CirParams, GFunction, Payoff};
use crate::numeric::{linspace, mean, pairwise_sum, sample_std};
use crate::pde::ControlField;

/// How coefficients are evaluated on transiently negative states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchemeVariant {
    /// Only the diffusion is projected to zero below the origin; the linear
    /// drifts are evaluated at the raw state. This is the default scheme.
    #[default]
    DiffusionProjection,
    /// Drift and diffusion both evaluated at `max(x, 0)` (the common "full
    /// truncation" variant), exposed for comparison only.
    FullTruncation,
}

/// Partition and ensemble sizes plus the stream seed. The mesh is
/// `h = (t' - t) / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EulerConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: SchemeVariant,
}

impl EulerConfig {
    pub fn new(n_steps: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if n_steps == 0 || n_paths == 0 {
            return Err(invalid("EulerConfig needs n_steps >= 1 and n_paths >= 1"));
        }
        Ok(Self {
            n_steps,
            n_paths,
            seed,
            scheme: SchemeVariant::default(),
        })
    }

    pub fn with_scheme(mut self, scheme: SchemeVariant) -> Self {
        self.scheme = scheme;
        self
    }
}

/// A piecewise-constant volatility path selecting one prior.
#[derive(Debug, Clone)]
pub enum VolatilityControl {
    Constant(f64),
    PiecewiseConstant {
        /// Strictly ascending interior switch times.
        breakpoints: Vec<f64>,
        /// One more entry than `breakpoints`; `thetas[j]` applies on the
        /// j-th interval.
        thetas: Vec<f64>,
    },
    /// State- and time-dependent bang-bang control read from a PDE-derived
    /// maximizing-variance field.
    BangBang(Arc<ControlField>),
}

impl VolatilityControl {
    pub fn constant(theta: f64, gf: &GFunction) -> Result<Self> {
        check_theta(theta, gf)?;
        Ok(Self::Constant(theta))
    }

    pub fn piecewise(breakpoints: Vec<f64>, thetas: Vec<f64>, gf: &GFunction) -> Result<Self> {
        if thetas.len() != breakpoints.len() + 1 {
            return Err(invalid("piecewise control needs one more theta than breakpoints"));
        }
        for w in breakpoints.windows(2) {
            if w[1] <= w[0] {
                return Err(invalid("piecewise control breakpoints must be strictly ascending"));
            }
        }
        for &th in &thetas {
            check_theta(th, gf)?;
        }
        Ok(Self::PiecewiseConstant { breakpoints, thetas })
    }

    pub fn bang_bang(field: Arc<ControlField>, gf: &GFunction) -> Result<Self> {
        let (lo, hi) = (gf.sigma_lo_sq(), gf.sigma_hi_sq());
        let tol = 1e-12 * (1.0 + hi);
        if field
            .q
            .iter()
            .flatten()
            .any(|&q| q < lo - tol || q > hi + tol)
        {
            return Err(invalid("bang-bang field contains variances outside the band"));
        }
        Ok(Self::BangBang(field))
    }

    /// The control value at the left endpoint `(t_k, X_k)` of a step.
    pub fn theta_at(&self, t: f64, x: f64) -> f64 {
        match self {
            Self::Constant(th) => *th,
            Self::PiecewiseConstant { breakpoints, thetas } => {
                let j = breakpoints.partition_point(|&b| b <= t);
                thetas[j]
            }
            Self::BangBang(field) => field.q_at(t, x).sqrt(),
        }
    }
}

fn check_theta(theta: f64, gf: &GFunction) -> Result<()> {
    let (lo, hi) = (gf.sigma_lo(), gf.sigma_hi());
    let tol = 1e-12 * (1.0 + hi);
    if !(theta.is_finite() && theta >= lo - tol && theta <= hi + tol) {
        return Err(invalid(format!(
            "control value theta = {theta} outside the band [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Seeded Euler sample paths under one control.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub config: EulerConfig,
    pub control: VolatilityControl,
    /// `X_n(t')` per path, indexed by path.
    pub terminal_values: Vec<f64>,
    /// Running minimum over the iterates of each path, for negativity
    /// diagnostics.
    pub min_values: Vec<f64>,
}

impl PathEnsemble {
    /// Export as CSV rows `path_index,terminal,running_min` (shortest
    /// round-trip decimals).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path_index,terminal,running_min")?;
        for (i, (term, min)) in self.terminal_values.iter().zip(&self.min_values).enumerate() {
            writeln!(w, "{i},{term},{min}")?;
        }
        Ok(())
    }
}

/// A Monte Carlo estimate: sample mean, standard error `std / sqrt(n)`,
/// and the ensemble size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// JSON-facing estimate record; `theta_star` is present for the
/// constant-control maximization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateReport {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<f64>,
}

impl EstimateReport {
    pub fn from_estimate(est: McEstimate, theta_star: Option<f64>) -> Self {
        Self {
            value: est.value,
            std_error: est.std_error,
            n_paths: est.n_paths,
            theta_star,
        }
    }
}

/// Per-path normal stream: ChaCha keyed by `(seed, path)`, consumed in step
/// order. A draw is a pure function of `(seed, path, draw index)`.
fn path_rng(seed: u64, path_index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path_index.to_le_bytes());
    key[16..24].copy_from_slice(b"gcirpath");
    ChaCha12Rng::from_seed(key)
}

fn validate_interval(t: f64, t_prime: f64, x0: f64) -> Result<()> {
    if !(t.is_finite() && t_prime.is_finite() && t <= t_prime) {
        return Err(invalid(format!("simulation needs t <= t_prime, got [{t}, {t_prime}]")));
    }
    if !(x0.is_finite() && x0 >= 0.0) {
        return Err(GcirError::NegativeState(x0));
    }
    Ok(())
}

#[inline]
fn coefficient_state(x: f64, scheme: SchemeVariant) -> f64 {
    match scheme {
        SchemeVariant::DiffusionProjection => x,
        SchemeVariant::FullTruncation => x.max(0.0),
    }
}

/// One Euler path; returns the terminal state and the running minimum over
/// all iterates. The observer sees `(step, state_before, diffusion_term)`
/// for every step, which instrumented tests use to check the projection.
#[allow(clippy::too_many_arguments)]
fn euler_path_observed<F: FnMut(usize, f64, f64)>(
    params: &CirParams,
    control: &VolatilityControl,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    path_index: u64,
    mut observe: F,
) -> Result<(f64, f64)> {
    validate_interval(t, t_prime, x0)?;
    let n = config.n_steps;
    let h = (t_prime - t) / n as f64;
    let sqrt_h = h.sqrt();
    let mut rng = path_rng(config.seed, path_index);
    let mut x = x0;
    let mut running_min = x0;
    for k in 0..n {
        let tk = t + k as f64 * h;
        let theta = control.theta_at(tk, x);
        let xi: f64 = rng.sample(StandardNormal);
        let xs = coefficient_state(x, config.scheme);
        let drift = params.dt_drift(xs) + theta * theta * params.qv_drift(xs);
        let diffusion = params.projected_diffusion(xs) * theta * sqrt_h * xi;
        observe(k, x, diffusion);
        x += drift * h + diffusion;
        if !x.is_finite() {
            return Err(GcirError::NonFiniteState {
                path: path_index,
                step: k,
            });
        }
        running_min = running_min.min(x);
    }
    Ok((x, running_min))
}

/// One Euler path of the polygonal approximation; see the module docs for
/// the update rule.
pub fn euler_path(
    params: &CirParams,
    control: &VolatilityControl,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    path_index: u64,
) -> Result<(f64, f64)> {
    euler_path_observed(params, control, config, t, t_prime, x0, path_index, |_, _, _| {})
}

#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn euler_path_instrumented<F: FnMut(usize, f64, f64)>(
    params: &CirParams,
    control: &VolatilityControl,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    path_index: u64,
    observe: F,
) -> Result<(f64, f64)> {
    euler_path_observed(params, control, config, t, t_prime, x0, path_index, observe)
}

/// All paths of the ensemble; terminal and running-minimum vectors are
/// indexed by path, independent of the worker partitioning.
pub fn simulate_ensemble(
    params: &CirParams,
    control: &VolatilityControl,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
) -> Result<PathEnsemble> {
    validate_interval(t, t_prime, x0)?;
    let pairs: Vec<(f64, f64)> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| euler_path(params, control, config, t, t_prime, x0, p as u64))
        .collect::<Result<_>>()?;
    let (terminal_values, min_values) = pairs.into_iter().unzip();
    Ok(PathEnsemble {
        config: *config,
        control: control.clone(),
        terminal_values,
        min_values,
    })
}

/// Per-path payoff samples `phi(X_n(t'))`, in path order.
pub fn payoff_terminals(
    phi: &Payoff,
    params: &CirParams,
    control: &VolatilityControl,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
) -> Result<Vec<f64>> {
    validate_interval(t, t_prime, x0)?;
    (0..config.n_paths)
        .into_par_iter()
        .map(|p| {
            euler_path(params, control, config, t, t_prime, x0, p as u64)
                .map(|(term, _)| phi.eval_extended(term))
        })
        .collect()
}

/// Sample mean and standard error of `phi(X_n(t'))` under one control.
/// Deterministic given `(seed, config, control)` for any worker count:
/// paths draw from per-path streams and the reduction is a fixed pairwise
/// summation.
pub fn mc_expectation(
    phi: &Payoff,
    params: &CirParams,
    control: &VolatilityControl,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
) -> Result<McEstimate> {
    let vals = payoff_terminals(phi, params, control, config, t, t_prime, x0)?;
    Ok(estimate_from_samples(&vals))
}

fn estimate_from_samples(vals: &[f64]) -> McEstimate {
    let value = mean(vals);
    let std_error = sample_std(vals) / (vals.len() as f64).sqrt();
    McEstimate {
        value,
        std_error,
        n_paths: vals.len(),
    }
}

/// Maximize the Monte Carlo expectation over a grid of `n_theta` constant
/// controls spanning `[sigma_lo, sigma_hi]` inclusive, with common random
/// numbers across the grid. Returns the best estimate and the maximizing
/// theta; ties keep the first maximizer in grid order.
#[allow(clippy::too_many_arguments)]
pub fn upper_expectation_constant(
    phi: &Payoff,
    params: &CirParams,
    gf: &GFunction,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    n_theta: usize,
) -> Result<(McEstimate, f64)> {
    if n_theta < 2 {
        return Err(invalid("theta grid needs at least 2 points"));
    }
    let mut thetas = linspace(gf.sigma_lo(), gf.sigma_hi(), n_theta);
    thetas.dedup();
    let mut best: Option<(McEstimate, f64)> = None;
    for th in thetas {
        let control = VolatilityControl::constant(th, gf)?;
        let est = mc_expectation(phi, params, &control, config, t, t_prime, x0)?;
        match &best {
            Some((b, _)) if est.value <= b.value => {}
            _ => best = Some((est, th)),
        }
    }
    Ok(best.expect("non-empty theta grid"))
}

/// Monte Carlo expectation under the PDE-derived bang-bang control
/// `theta_k = sqrt(q*(t_k, X_k))`; states outside the field's grid clamp to
/// the nearest boundary node.
#[allow(clippy::too_many_arguments)]
pub fn upper_expectation_bangbang(
    phi: &Payoff,
    params: &CirParams,
    gf: &GFunction,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    field: Arc<ControlField>,
) -> Result<McEstimate> {
    let control = VolatilityControl::bang_bang(field, gf)?;
    mc_expectation(phi, params, &control, config, t, t_prime, x0)
}

/// Lower expectation through the constant-control maximizer:
/// `-sup E[-phi]` with the standard error preserved. Also returns the
/// maximizing theta of the negated problem.
#[allow(clippy::too_many_arguments)]
pub fn lower_expectation_constant(
    phi: &Payoff,
    params: &CirParams,
    gf: &GFunction,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    n_theta: usize,
) -> Result<(McEstimate, f64)> {
    let (est, theta) =
        upper_expectation_constant(&phi.negated(), params, gf, config, t, t_prime, x0, n_theta)?;
    Ok((
        McEstimate {
            value: -est.value,
            std_error: est.std_error,
            n_paths: est.n_paths,
        },
        theta,
    ))
}

/// Lower expectation through the bang-bang estimator. The supplied field
/// must be the maximizing field of the negated payoff's PDE solve.
#[allow(clippy::too_many_arguments)]
pub fn lower_expectation_bangbang(
    phi: &Payoff,
    params: &CirParams,
    gf: &GFunction,
    config: &EulerConfig,
    t: f64,
    t_prime: f64,
    x0: f64,
    field_for_negated: Arc<ControlField>,
) -> Result<McEstimate> {
    let est = upper_expectation_bangbang(
        &phi.negated(),
        params,
        gf,
        config,
        t,
        t_prime,
        x0,
        field_for_negated,
    )?;
    Ok(McEstimate {
        value: -est.value,
        std_error: est.std_error,
        n_paths: est.n_paths,
    })
}

/// Difference-based standard error for two estimators run on common random
/// numbers: `std(a_i - b_i) / sqrt(n)`.
pub fn joint_std_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    sample_std(&diffs) / (diffs.len() as f64).sqrt()
}

/// Deterministic pairwise mean over explicit samples, exposed for studies
/// that aggregate custom per-path statistics.
pub fn deterministic_mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        0.0
    } else {
        pairwise_sum(samples) / samples.len() as f64
    }
}
