//! Backward-in-time monotone finite-difference solver for the fully
//! nonlinear parabolic terminal-value problem
//!
//! ```text
//! u_t + (delta1 - beta1 x) u_x + 2 G((delta2 - beta2 x) u_x + sigma² x / 2 · u_xx) = 0,
//! u(t', x) = phi(x),
//! ```
//!
//! on a truncated grid `[0, x_max]`, whose solution is the upper expectation
//! `u(t, x) = E^[phi(X^{t,x}_{t'})]`.
//!
//! Scheme: explicit Euler in time stepping backward from `t'`. The second
//! derivative is the centered difference; each first-derivative term is
//! upwinded against its own effective drift. The nonlinearity is handled by
//! a two-pass freeze per node: the maximizing variance `q` is chosen by
//! `G`-argmax on a centered estimate of the second-order argument, then the
//! update is re-evaluated with the upwinded stencil and `q` held fixed,
//! which keeps the update monotone in the stencil values under the CFL
//! bound of [`cfl_dt`].
//!
//! Boundaries: at `x = 0` the diffusion coefficient vanishes and both drifts
//! are non-negative, so a one-sided forward upwind is used and no boundary
//! condition is imposed. At `x_max` the solution is treated as asymptotically
//! linear (`u_xx = 0`), which makes the one-sided backward difference exact
//! for the linear tails of the oracle solutions.

use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, GcirError, Result};
use crate::model::{CirParams, GFunction, Payoff};

/// Uniform grid `x_i = i dx` on `[0, x_max]` with `x_0 = 0` and
/// `x_{nx-1} = x_max` exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    x_max: f64,
    nx: usize,
    dx: f64,
}

impl SpatialGrid {
    pub fn new(x_max: f64, nx: usize) -> Result<Self> {
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(invalid(format!("x_max must be positive, got {x_max}")));
        }
        if nx < 16 {
            return Err(invalid(format!("grid needs at least 16 nodes, got {nx}")));
        }
        Ok(Self {
            x_max,
            nx,
            dx: x_max / (nx - 1) as f64,
        })
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Node coordinate; the endpoints are exact by construction.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.nx - 1 {
            self.x_max
        } else {
            i as f64 * self.dx
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.node(i)).collect()
    }
}

/// Default truncation radius: generous multiples of both the query point and
/// the mean-reversion level. With no positive reversion coefficient the state
/// grows at most linearly, so the horizon scales the bound instead.
pub fn default_x_max(params: &CirParams, gf: &GFunction, t_prime: f64, x_query: f64) -> f64 {
    let drift_cap = params.delta1 + gf.sigma_hi_sq() * params.delta2;
    let min_pos_beta = [params.beta1, params.beta2]
        .into_iter()
        .filter(|b| *b > 0.0)
        .fold(f64::INFINITY, f64::min);
    let base = if min_pos_beta.is_finite() {
        4.0 * drift_cap / min_pos_beta + 5.0
    } else {
        x_query + 4.0 * drift_cap * t_prime + 5.0
    };
    (5.0 * x_query).max(base)
}

/// A terminal-value problem: dynamics, volatility band, payoff, horizon.
#[derive(Debug, Clone)]
pub struct PdeProblem {
    pub params: CirParams,
    pub gf: GFunction,
    pub payoff: Payoff,
    pub t_prime: f64,
}

impl PdeProblem {
    pub fn new(params: CirParams, gf: GFunction, payoff: Payoff, t_prime: f64) -> Result<Self> {
        if !(t_prime.is_finite() && t_prime > 0.0) {
            return Err(invalid(format!("t_prime must be positive, got {t_prime}")));
        }
        Ok(Self {
            params,
            gf,
            payoff,
            t_prime,
        })
    }

    /// The payoff sampled on the grid nodes.
    pub fn terminal_slice(&self, grid: &SpatialGrid) -> Vec<f64> {
        (0..grid.nx()).map(|i| self.payoff.eval_extended(grid.node(i))).collect()
    }
}

/// Solver knobs beyond the `dt_cap` argument of the public solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Upper bound on the time step; must not exceed [`cfl_dt`].
    pub dt_cap: Option<f64>,
    /// Fraction of the CFL limit actually used (default 0.9).
    pub cfl_safety: f64,
    /// Approximate number of time levels retained in the solution
    /// (endpoints always included). The solver still steps at full
    /// resolution; storage is subsampled.
    pub stored_levels: usize,
    /// Freeze the variance at a fixed `q` instead of the `G`-argmax,
    /// reducing the scheme to a plain linear advection-diffusion solve.
    /// Diagnostic flag for the degenerate-band comparison.
    pub fixed_q: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            dt_cap: None,
            cfl_safety: 0.9,
            stored_levels: 257,
            fixed_q: None,
        }
    }
}

/// Largest stable time step for the explicit update:
/// `dt · [sigma_hi² sigma² x_max / dx² + A / dx] <= 1` with
/// `A = max_i |delta1 - beta1 x_i| + sigma_hi² |delta2 - beta2 x_i|`.
pub fn cfl_dt(grid: &SpatialGrid, params: &CirParams, gf: &GFunction) -> f64 {
    let hi = gf.sigma_hi_sq();
    let mut advection = 0.0f64;
    for i in 0..grid.nx() {
        let x = grid.node(i);
        let a = params.dt_drift(x).abs() + hi * params.qv_drift(x).abs();
        advection = advection.max(a);
    }
    let dx = grid.dx();
    let denom = hi * params.sigma * params.sigma * grid.x_max() / (dx * dx) + advection / dx;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        1.0 / denom
    }
}

/// Grid values of `u(t, x)` on the retained time levels, plus everything
/// needed to interpolate and to derive the bang-bang control field.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    problem: PdeProblem,
    grid: SpatialGrid,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    dt_used: f64,
}

/// Maximizing variance `q*(t_k, x_i) ∈ {sigma_lo², sigma_hi²}` recorded on
/// the solution's stored levels; drives the state-dependent bang-bang
/// volatility control in the simulator.
#[derive(Debug, Clone, Serialize)]
pub struct ControlField {
    pub times: Vec<f64>,
    pub x_max: f64,
    pub nx: usize,
    pub dx: f64,
    pub q: Vec<Vec<f64>>,
}

impl ControlField {
    /// Value at the nearest stored time level and nearest node; states
    /// outside the grid clamp to the boundary node.
    pub fn q_at(&self, t: f64, x: f64) -> f64 {
        let lvl = nearest_index(&self.times, t);
        let j = if x <= 0.0 {
            0
        } else {
            ((x / self.dx).round() as usize).min(self.nx - 1)
        };
        self.q[lvl][j]
    }
}

fn nearest_index(sorted: &[f64], v: f64) -> usize {
    match sorted.binary_search_by(|p| p.partial_cmp(&v).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i >= sorted.len() => sorted.len() - 1,
        Err(i) => {
            if (v - sorted[i - 1]) <= (sorted[i] - v) {
                i - 1
            } else {
                i
            }
        }
    }
}

impl PdeSolution {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt_used(&self) -> f64 {
        self.dt_used
    }

    /// Slice at the earliest retained time (`t_from` of the solve).
    pub fn initial_slice(&self) -> &[f64] {
        &self.values[0]
    }

    /// Slice at the terminal time; equals the supplied terminal data.
    pub fn terminal_slice(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    pub fn level(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn n_levels(&self) -> usize {
        self.values.len()
    }

    /// Bilinear interpolation in `(t, x)`; exact at stored nodes. Queries
    /// outside `[times.first, times.last] × [0, x_max]` are rejected.
    pub fn evaluate(&self, t: f64, x: f64) -> Result<f64> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        let eps_t = 1e-12 * (1.0 + t1.abs());
        let eps_x = 1e-12 * (1.0 + self.grid.x_max());
        if !(t >= t0 - eps_t && t <= t1 + eps_t && x >= -eps_x && x <= self.grid.x_max() + eps_x) {
            return Err(GcirError::OutOfDomain { t, x });
        }
        let t = t.clamp(t0, t1);
        let x = x.clamp(0.0, self.grid.x_max());

        let (jt, wt) = bracket(&self.times, t);
        let dx = self.grid.dx();
        let fi = (x / dx).min((self.grid.nx() - 1) as f64);
        let mut ix = fi.floor() as usize;
        let mut wx = fi - ix as f64;
        if ix >= self.grid.nx() - 1 {
            ix = self.grid.nx() - 2;
            wx = 1.0;
        }
        // Snap to nodes so that node queries return stored values exactly.
        if wx < 1e-9 {
            wx = 0.0;
        } else if wx > 1.0 - 1e-9 {
            wx = 1.0;
        }

        let blend = |lvl: &[f64]| (1.0 - wx) * lvl[ix] + wx * lvl[ix + 1];
        let lo = blend(&self.values[jt]);
        if wt == 0.0 {
            return Ok(lo);
        }
        let hi = blend(&self.values[jt + 1]);
        Ok((1.0 - wt) * lo + wt * hi)
    }

    /// Maximizing variance at every stored level and node, recomputed from
    /// the stored slices with the same centered estimate the solver's first
    /// pass uses.
    pub fn optimal_control_field(&self) -> ControlField {
        let grid = &self.grid;
        let gf = &self.problem.gf;
        let p = &self.problem.params;
        let nx = grid.nx();
        let dx = grid.dx();
        let q = self
            .values
            .iter()
            .map(|lvl| {
                (0..nx)
                    .map(|i| {
                        let x = grid.node(i);
                        let a = if i == 0 {
                            p.qv_drift(x) * (lvl[1] - lvl[0]) / dx
                        } else if i == nx - 1 {
                            p.qv_drift(x) * (lvl[i] - lvl[i - 1]) / dx
                        } else {
                            let d1 = (lvl[i + 1] - lvl[i - 1]) / (2.0 * dx);
                            let d2 = (lvl[i + 1] - 2.0 * lvl[i] + lvl[i - 1]) / (dx * dx);
                            p.qv_drift(x) * d1 + 0.5 * p.sigma * p.sigma * x * d2
                        };
                        gf.argmax(a)
                    })
                    .collect()
            })
            .collect();
        ControlField {
            times: self.times.clone(),
            x_max: grid.x_max(),
            nx,
            dx,
            q,
        }
    }

    /// Export as CSV rows `t,x,u` in time-outer order at 17 significant
    /// digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,u")?;
        for (j, t) in self.times.iter().enumerate() {
            for i in 0..self.grid.nx() {
                writeln!(w, "{:.16e},{:.16e},{:.16e}", t, self.grid.node(i), self.values[j][i])?;
            }
        }
        Ok(())
    }
}

fn bracket(times: &[f64], t: f64) -> (usize, f64) {
    if times.len() == 1 {
        return (0, 0.0);
    }
    let mut j = times.partition_point(|&v| v <= t);
    if j == 0 {
        return (0, 0.0);
    }
    if j >= times.len() {
        j = times.len() - 1;
    }
    let (a, b) = (times[j - 1], times[j]);
    let mut w = if b > a { (t - a) / (b - a) } else { 0.0 };
    if w < 1e-9 {
        w = 0.0;
    } else if w > 1.0 - 1e-9 {
        w = 1.0;
    }
    (j - 1, w)
}

/// Solve the full problem on `[0, t']` with the payoff as terminal data.
pub fn solve(problem: &PdeProblem, grid: &SpatialGrid, dt_cap: Option<f64>) -> Result<PdeSolution> {
    let terminal = problem.terminal_slice(grid);
    let opts = SolverOptions {
        dt_cap,
        ..SolverOptions::default()
    };
    solve_opts(problem, grid, 0.0, problem.t_prime, &terminal, &opts)
}

/// Same stepping as [`solve`] but from supplied terminal data over
/// `[t_from, t_to]` — the semigroup building block.
pub fn solve_segment(
    problem: &PdeProblem,
    grid: &SpatialGrid,
    t_from: f64,
    t_to: f64,
    terminal: &[f64],
    dt_cap: Option<f64>,
) -> Result<PdeSolution> {
    let opts = SolverOptions {
        dt_cap,
        ..SolverOptions::default()
    };
    solve_opts(problem, grid, t_from, t_to, terminal, &opts)
}

/// Full-control entry point used by both public solvers.
pub fn solve_opts(
    problem: &PdeProblem,
    grid: &SpatialGrid,
    t_from: f64,
    t_to: f64,
    terminal: &[f64],
    opts: &SolverOptions,
) -> Result<PdeSolution> {
    if terminal.len() != grid.nx() {
        return Err(invalid(format!(
            "terminal data has {} entries for a {}-node grid",
            terminal.len(),
            grid.nx()
        )));
    }
    if !(t_from.is_finite() && t_to.is_finite()) || t_from > t_to {
        return Err(invalid(format!("segment needs t_from <= t_to, got [{t_from}, {t_to}]")));
    }
    if t_to > problem.t_prime + 1e-12 {
        return Err(invalid(format!(
            "segment end {t_to} exceeds the horizon t_prime = {}",
            problem.t_prime
        )));
    }

    let span = t_to - t_from;
    if span == 0.0 {
        return Ok(PdeSolution {
            problem: problem.clone(),
            grid: *grid,
            times: vec![t_from],
            values: vec![terminal.to_vec()],
            dt_used: 0.0,
        });
    }

    let limit = cfl_dt(grid, &problem.params, &problem.gf);
    let mut dt_target = opts.cfl_safety * limit;
    if let Some(cap) = opts.dt_cap {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(invalid(format!("dt_cap must be positive, got {cap}")));
        }
        if cap > limit {
            return Err(GcirError::CflViolation { dt: cap, limit });
        }
        dt_target = dt_target.min(cap);
    }
    let n_steps = ((span / dt_target).ceil() as usize).max(1);
    let dt = span / n_steps as f64;

    // Per-node coefficients are time-independent.
    let nx = grid.nx();
    let dx = grid.dx();
    let p = &problem.params;
    let b1: Vec<f64> = (0..nx).map(|i| p.dt_drift(grid.node(i))).collect();
    let b2: Vec<f64> = (0..nx).map(|i| p.qv_drift(grid.node(i))).collect();
    let nu: Vec<f64> = (0..nx).map(|i| 0.5 * p.sigma * p.sigma * grid.node(i)).collect();
    debug_assert!(b1[0] >= 0.0 && b2[0] >= 0.0);

    // Which step indices (0 = t_from, n_steps = terminal) are retained.
    let stored = stored_steps(n_steps, opts.stored_levels.max(2));

    let mut prev = terminal.to_vec();
    let mut next = vec![0.0f64; nx];
    let mut kept: Vec<(usize, Vec<f64>)> = Vec::with_capacity(stored.len());
    if stored.contains(&n_steps) {
        kept.push((n_steps, prev.clone()));
    }

    let gf = &problem.gf;
    let inv_dx = 1.0 / dx;
    let inv_2dx = 0.5 / dx;
    let inv_dx2 = 1.0 / (dx * dx);

    for k in (0..n_steps).rev() {
        step_backward(&prev, &mut next, &b1, &b2, &nu, gf, opts.fixed_q, dt, inv_dx, inv_2dx, inv_dx2);
        if let Some(node) = next.iter().position(|v| !v.is_finite()) {
            return Err(GcirError::NonFiniteValue { level: k, node });
        }
        std::mem::swap(&mut prev, &mut next);
        if stored.contains(&k) {
            kept.push((k, prev.clone()));
        }
    }

    kept.reverse();
    let times = kept
        .iter()
        .map(|(k, _)| if *k == n_steps { t_to } else { t_from + *k as f64 * dt })
        .collect();
    let values = kept.into_iter().map(|(_, v)| v).collect();

    Ok(PdeSolution {
        problem: problem.clone(),
        grid: *grid,
        times,
        values,
        dt_used: dt,
    })
}

fn stored_steps(n_steps: usize, max_levels: usize) -> std::collections::BTreeSet<usize> {
    let mut set = std::collections::BTreeSet::new();
    set.insert(0);
    set.insert(n_steps);
    let interior = max_levels.saturating_sub(1).max(1);
    let stride = n_steps.div_ceil(interior).max(1);
    let mut k = 0;
    while k <= n_steps {
        set.insert(k);
        k += stride;
    }
    set
}

/// One backward step `u(t - dt) = u(t) + dt [b1 D¹u + q (b2 D¹u + nu D²u)]`
/// with the two-pass frozen-`q` upwind evaluation described in the module
/// docs.
#[allow(clippy::too_many_arguments)]
fn step_backward(
    prev: &[f64],
    next: &mut [f64],
    b1: &[f64],
    b2: &[f64],
    nu: &[f64],
    gf: &GFunction,
    fixed_q: Option<f64>,
    dt: f64,
    inv_dx: f64,
    inv_2dx: f64,
    inv_dx2: f64,
) {
    let nx = prev.len();
    let pick_q = |a: f64| match fixed_q {
        Some(q) => q,
        None => gf.argmax(a),
    };

    // x = 0: diffusion vanishes, both drifts are non-negative inflow.
    {
        let d1 = (prev[1] - prev[0]) * inv_dx;
        let q = pick_q(b2[0] * d1);
        next[0] = prev[0] + dt * (b1[0] * d1 + q * b2[0] * d1);
    }

    for (im1, w) in prev.windows(3).enumerate() {
        let i = im1 + 1;
        let (um, u0, up) = (w[0], w[1], w[2]);
        let d2 = (up - 2.0 * u0 + um) * inv_dx2;
        let d1c = (up - um) * inv_2dx;
        let q = pick_q(b2[i] * d1c + nu[i] * d2);
        let d1f = (up - u0) * inv_dx;
        let d1b = (u0 - um) * inv_dx;
        let d1_b1 = if b1[i] >= 0.0 { d1f } else { d1b };
        let d1_b2 = if b2[i] >= 0.0 { d1f } else { d1b };
        next[i] = u0 + dt * (b1[i] * d1_b1 + q * (b2[i] * d1_b2 + nu[i] * d2));
    }

    // x = x_max: u_xx = 0, one-sided backward difference.
    {
        let i = nx - 1;
        let d1 = (prev[i] - prev[i - 1]) * inv_dx;
        let q = pick_q(b2[i] * d1);
        next[i] = prev[i] + dt * (b1[i] * d1 + q * b2[i] * d1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::{self, MomentQuery, Regime};

    fn band12() -> GFunction {
        GFunction::new(1.0, 2.0).unwrap()
    }

    #[test]
    fn grid_nodes_exact_at_endpoints() {
        let g = SpatialGrid::new(5.0, 501).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(500), 5.0);
        assert_eq!(g.dx(), 0.01);
        assert!(SpatialGrid::new(5.0, 8).is_err());
        assert!(SpatialGrid::new(0.0, 64).is_err());
    }

    #[test]
    fn cfl_pure_advection_limit() {
        // sigma = 0 and A = 1 at dx = 0.1 gives dt = dx / A = 0.1.
        let p = CirParams::custom(1.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let grid = SpatialGrid::new(5.0, 51).unwrap();
        let dt = cfl_dt(&grid, &p, &band12());
        assert!((dt - 0.1).abs() < 1e-15);
    }

    #[test]
    fn cfl_formula_is_satisfied() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let gf = band12();
        let grid = SpatialGrid::new(5.0, 101).unwrap();
        let dt = cfl_dt(&grid, &p, &gf);
        let dx = grid.dx();
        let mut advection = 0.0f64;
        for i in 0..grid.nx() {
            let x = grid.node(i);
            advection = advection.max(p.dt_drift(x).abs() + 2.0 * p.qv_drift(x).abs());
        }
        let lhs = dt * (2.0 * 1.0 * 5.0 / (dx * dx) + advection / dx);
        assert!(lhs <= 1.0 + 1e-12);
        assert!(lhs > 1.0 - 1e-9);
    }

    #[test]
    fn cfl_quarters_under_refinement_when_diffusion_dominates() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let gf = band12();
        let coarse = cfl_dt(&SpatialGrid::new(5.0, 101).unwrap(), &p, &gf);
        let fine = cfl_dt(&SpatialGrid::new(5.0, 201).unwrap(), &p, &gf);
        let ratio = coarse / fine;
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn constant_payoff_is_preserved() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::constant(2.5).unwrap(), 0.5).unwrap();
        let grid = SpatialGrid::new(5.0, 64).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        for j in 0..sol.n_levels() {
            for &v in sol.level(j) {
                assert_eq!(v, 2.5);
            }
        }
        // The terminal level is the supplied payoff data exactly.
        assert_eq!(sol.terminal_slice(), &problem.terminal_slice(&grid)[..]);
        assert_eq!(*sol.times().last().unwrap(), 0.5);
        assert_eq!(sol.times()[0], 0.0);
    }

    #[test]
    fn drift_only_identity_matches_oracle() {
        let p = CirParams::drift_only(1.0, 0.5, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::identity(), 1.0).unwrap();
        let grid = SpatialGrid::new(5.0, 201).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let got = sol.evaluate(0.0, 1.0).unwrap();
        let oracle = closed_form::mean_drift_case(
            &MomentQuery::new(p, 0.0, 1.0, 1.0).unwrap(),
            Regime::DriftOnly,
        )
        .unwrap();
        assert!((got - oracle).abs() < 2e-2, "got {got}, oracle {oracle}");
    }

    /// In the qv-only regime the piecewise constant-extreme envelope (the
    /// reversion level pinned, one exponential rate per side) is only the
    /// value of the best constant control. The adapted-control value solved
    /// here strictly dominates it near the reversion level, so the honest
    /// checks are self-convergence under refinement plus the envelope as a
    /// lower bound; the Monte Carlo cross-check lives in the simulator and
    /// acceptance tests.
    #[test]
    fn qv_only_solution_converges_and_dominates_constant_envelope() {
        let p = CirParams::qv_only(1.0, 1.0, 1.0).unwrap();
        let gf = band12();
        let problem = PdeProblem::new(p, gf, Payoff::identity(), 1.0).unwrap();
        let reference = solve(&problem, &SpatialGrid::new(5.0, 1025).unwrap(), None).unwrap();
        let queries = [0.0, 0.5, 1.0, 2.0];
        let mut errs = Vec::new();
        for nx in [129, 257, 513] {
            let sol = solve(&problem, &SpatialGrid::new(5.0, nx).unwrap(), None).unwrap();
            let e = queries
                .iter()
                .map(|&x| {
                    (sol.evaluate(0.0, x).unwrap() - reference.evaluate(0.0, x).unwrap()).abs()
                })
                .fold(0.0f64, f64::max);
            errs.push(e);
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "errors {errs:?}");
        assert!(errs[2] < 2e-3, "finest self-error {:.3e}", errs[2]);

        for &x in &queries {
            let envelope = closed_form::mean_upper_qv_case(
                &MomentQuery::new(p, 0.0, 1.0, x).unwrap(),
                &gf,
                Regime::QvOnly,
            )
            .unwrap();
            let got = reference.evaluate(0.0, x).unwrap();
            assert!(
                got >= envelope - 1e-3,
                "x = {x}: solution {got} below the envelope {envelope}"
            );
        }
    }

    #[test]
    fn evaluate_is_exact_at_nodes_and_linear_between() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::identity(), 0.25).unwrap();
        let grid = SpatialGrid::new(4.0, 33).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();

        let j = sol.n_levels() / 2;
        let t = sol.times()[j];
        for i in [0, 7, 16, 32] {
            let stored = sol.level(j)[i];
            assert_eq!(sol.evaluate(t, grid.node(i)).unwrap(), stored);
        }
        let mid = 0.5 * (grid.node(4) + grid.node(5));
        let expect = 0.5 * (sol.level(j)[4] + sol.level(j)[5]);
        assert!((sol.evaluate(t, mid).unwrap() - expect).abs() < 1e-14);

        // Terminal queries reproduce the payoff at nodes.
        assert_eq!(sol.evaluate(0.25, grid.node(9)).unwrap(), grid.node(9));

        assert!(matches!(
            sol.evaluate(0.3, 1.0),
            Err(GcirError::OutOfDomain { .. })
        ));
        assert!(matches!(
            sol.evaluate(0.1, 4.5),
            Err(GcirError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn control_field_square_selects_upper_variance() {
        let p = CirParams::drift_only(1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::square(6.0).unwrap(), 0.5).unwrap();
        let grid = SpatialGrid::new(6.0, 121).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let field = sol.optimal_control_field();
        for lvl in &field.q {
            for &q in &lvl[1..grid.nx() - 1] {
                assert_eq!(q, 2.0);
            }
        }
    }

    #[test]
    fn control_field_neg_square_selects_lower_variance() {
        let p = CirParams::drift_only(1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::neg_square(6.0).unwrap(), 0.5).unwrap();
        let grid = SpatialGrid::new(6.0, 121).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let field = sol.optimal_control_field();
        for lvl in &field.q {
            for &q in &lvl[1..grid.nx() - 1] {
                assert_eq!(q, 1.0);
            }
        }
    }

    #[test]
    fn control_field_zero_diffusion_is_tie_break() {
        let p = CirParams::custom(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::square(6.0).unwrap(), 0.5).unwrap();
        let grid = SpatialGrid::new(6.0, 61).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let field = sol.optimal_control_field();
        for lvl in &field.q {
            for &q in lvl {
                assert_eq!(q, 2.0);
            }
        }
        // Every entry of any field lies in the band.
        assert!(field.q.iter().flatten().all(|&q| q == 1.0 || q == 2.0));
    }

    #[test]
    fn control_field_lookup_clamps_and_picks_nearest() {
        let field = ControlField {
            times: vec![0.0, 0.5, 1.0],
            x_max: 2.0,
            nx: 5,
            dx: 0.5,
            q: vec![
                vec![1.0, 1.0, 1.0, 1.0, 1.0],
                vec![1.0, 2.0, 1.0, 2.0, 1.0],
                vec![2.0, 2.0, 2.0, 2.0, 2.0],
            ],
        };
        // Nearest node, clamped to [0, x_max].
        assert_eq!(field.q_at(0.5, -3.0), 1.0);
        assert_eq!(field.q_at(0.5, 0.6), 2.0);
        assert_eq!(field.q_at(0.5, 99.0), 1.0);
        // Nearest time level.
        assert_eq!(field.q_at(0.9, 0.0), 2.0);
        assert_eq!(field.q_at(-1.0, 0.0), 1.0);
        assert_eq!(field.q_at(7.0, 0.0), 2.0);
    }

    #[test]
    fn segment_of_zero_length_returns_terminal() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::identity(), 1.0).unwrap();
        let grid = SpatialGrid::new(4.0, 33).unwrap();
        let terminal = problem.terminal_slice(&grid);
        let sol = solve_segment(&problem, &grid, 0.4, 0.4, &terminal, None).unwrap();
        assert_eq!(sol.n_levels(), 1);
        assert_eq!(sol.initial_slice(), &terminal[..]);
    }

    #[test]
    fn full_segment_equals_solve() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::identity(), 0.5).unwrap();
        let grid = SpatialGrid::new(4.0, 65).unwrap();
        let terminal = problem.terminal_slice(&grid);
        let a = solve(&problem, &grid, None).unwrap();
        let b = solve_segment(&problem, &grid, 0.0, 0.5, &terminal, None).unwrap();
        assert_eq!(a.initial_slice(), b.initial_slice());
        assert_eq!(a.dt_used(), b.dt_used());
    }

    #[test]
    fn two_stage_solve_stays_near_one_stage() {
        let p = CirParams::qv_only(1.0, 1.0, 1.0).unwrap();
        let gf = band12();
        let problem = PdeProblem::new(p, gf, Payoff::identity(), 1.0).unwrap();
        let grid = SpatialGrid::new(5.0, 129).unwrap();

        let one = solve(&problem, &grid, None).unwrap();
        let stage1 =
            solve_segment(&problem, &grid, 0.5, 1.0, &problem.terminal_slice(&grid), None).unwrap();
        let stage2 = solve_segment(&problem, &grid, 0.0, 0.5, stage1.initial_slice(), None).unwrap();

        let mut split_diff = 0.0f64;
        let mut oracle_err = 0.0f64;
        for i in 0..grid.nx() {
            split_diff = split_diff.max((stage2.initial_slice()[i] - one.initial_slice()[i]).abs());
            let oracle = closed_form::mean_upper_qv_case(
                &MomentQuery::new(p, 0.0, 1.0, grid.node(i)).unwrap(),
                &gf,
                Regime::QvOnly,
            )
            .unwrap();
            oracle_err = oracle_err.max((one.initial_slice()[i] - oracle).abs());
        }
        assert!(
            split_diff <= 5.0 * oracle_err,
            "split diff {split_diff}, oracle err {oracle_err}"
        );
    }

    #[test]
    fn monotone_in_payoff() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let grid = SpatialGrid::new(4.0, 65).unwrap();
        let pairs = [
            (
                Payoff::smoothed_indicator(1.0, 0.5).unwrap(),
                Payoff::constant(1.0).unwrap(),
            ),
            (
                Payoff::custom(vec![0.0, 1.0, 3.0], vec![-0.5, 0.2, -0.1]).unwrap(),
                Payoff::custom(vec![0.0, 1.0, 3.0], vec![-0.2, 0.9, 0.4]).unwrap(),
            ),
            (Payoff::negate(), Payoff::identity()),
        ];
        for (lo, hi) in pairs {
            let a = solve(&PdeProblem::new(p, band12(), lo, 0.5).unwrap(), &grid, None).unwrap();
            let b = solve(&PdeProblem::new(p, band12(), hi, 0.5).unwrap(), &grid, None).unwrap();
            for j in 0..a.n_levels() {
                for i in 0..grid.nx() {
                    assert!(
                        a.level(j)[i] <= b.level(j)[i] + 1e-12,
                        "level {j} node {i}: {} > {}",
                        a.level(j)[i],
                        b.level(j)[i]
                    );
                }
            }
        }
    }

    #[test]
    fn sup_norm_contracts_backward() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let phi = Payoff::custom(vec![0.0, 0.5, 1.5, 4.0], vec![0.3, -1.0, 0.8, -0.2]).unwrap();
        let problem = PdeProblem::new(p, band12(), phi.clone(), 0.5).unwrap();
        let grid = SpatialGrid::new(4.0, 65).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for j in 0..sol.n_levels() - 1 {
            assert!(sup(sol.level(j)) <= sup(sol.level(j + 1)) + 1e-12);
        }
        // Comparison-principle bound against the payoff sup.
        let bound = phi.sup_abs_on(grid.x_max()) + 1e-8;
        for j in 0..sol.n_levels() {
            assert!(sup(sol.level(j)) <= bound);
        }
    }

    #[test]
    fn degenerate_band_reduces_to_linear_solve() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let gf = GFunction::with_band(1.5, 1.5).unwrap();
        let problem = PdeProblem::new(p, gf, Payoff::identity(), 0.5).unwrap();
        let grid = SpatialGrid::new(4.0, 65).unwrap();
        let nonlinear = solve(&problem, &grid, None).unwrap();
        let linear = solve_opts(
            &problem,
            &grid,
            0.0,
            0.5,
            &problem.terminal_slice(&grid),
            &SolverOptions {
                fixed_q: Some(1.5),
                ..SolverOptions::default()
            },
        )
        .unwrap();
        for j in 0..nonlinear.n_levels() {
            for i in 0..grid.nx() {
                assert!((nonlinear.level(j)[i] - linear.level(j)[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn upper_dominates_negated_lower() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let grid = SpatialGrid::new(4.0, 65).unwrap();
        let phi = Payoff::smoothed_indicator(1.0, 0.25).unwrap();
        let up = solve(&PdeProblem::new(p, band12(), phi.clone(), 0.5).unwrap(), &grid, None).unwrap();
        let neg = solve(&PdeProblem::new(p, band12(), phi.negated(), 0.5).unwrap(), &grid, None).unwrap();
        for j in 0..up.n_levels() {
            for i in 0..grid.nx() {
                assert!(up.level(j)[i] >= -neg.level(j)[i] - 1e-12);
            }
        }
    }

    #[test]
    fn grid_refinement_converges_on_closed_form_cases() {
        // The drift-only mean and second moment admit exact oracles; both
        // refinement studies must show at least first-order-ish decay.
        let gf = band12();
        let drift = CirParams::drift_only(1.0, 0.5, 1.0).unwrap();

        let check = |params: CirParams, phi: Payoff, x_max: f64, x: f64, oracle: f64| {
            let mut errs = Vec::new();
            for nx in [51, 101, 201] {
                let problem = PdeProblem::new(params, gf, phi.clone(), 1.0).unwrap();
                let grid = SpatialGrid::new(x_max, nx).unwrap();
                let sol = solve(&problem, &grid, None).unwrap();
                errs.push((sol.evaluate(0.0, x).unwrap() - oracle).abs());
            }
            assert!(errs[1] < errs[0] && errs[2] < errs[1], "errors {errs:?}");
            let order = (errs[0] / errs[2]).log2() / 2.0;
            assert!(order >= 0.8, "observed order {order}, errors {errs:?}");
        };

        let mean = closed_form::mean_drift_case(
            &MomentQuery::new(drift, 0.0, 1.0, 1.0).unwrap(),
            Regime::DriftOnly,
        )
        .unwrap();
        check(drift, Payoff::identity(), 5.0, 1.0, mean);

        let second = CirParams::drift_only(1.0, 1.0, 1.0).unwrap();
        let moment = closed_form::second_moment_drift_case(
            &MomentQuery::new(second, 0.0, 1.0, 1.0).unwrap(),
            gf.sigma_hi_sq(),
            Regime::DriftOnly,
        )
        .unwrap();
        check(second, Payoff::square(8.0).unwrap(), 8.0, 1.0, moment);
    }

    #[test]
    fn cfl_violation_rejected_before_stepping() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::identity(), 0.5).unwrap();
        let grid = SpatialGrid::new(4.0, 65).unwrap();
        let limit = cfl_dt(&grid, &p, &band12());
        let err = solve(&problem, &grid, Some(limit * 2.0));
        assert!(matches!(err, Err(GcirError::CflViolation { .. })));
    }

    #[test]
    fn csv_export_shape() {
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let problem = PdeProblem::new(p, band12(), Payoff::identity(), 0.1).unwrap();
        let grid = SpatialGrid::new(2.0, 17).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x,u");
        assert_eq!(text.lines().count(), 1 + sol.n_levels() * grid.nx());
        let first = text.lines().nth(1).unwrap();
        assert_eq!(first.split(',').count(), 3);
    }

    #[test]
    fn default_x_max_handles_degenerate_reversion() {
        let gf = band12();
        let full = CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(default_x_max(&full, &gf, 1.0, 1.0) >= 5.0);
        let no_rev = CirParams::custom(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let xm = default_x_max(&no_rev, &gf, 1.0, 1.0);
        assert!(xm.is_finite() && xm > 5.0);
    }
}
