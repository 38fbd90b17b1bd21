//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (run with `-- --nocapture` to see them on success).
//!
//! Criterion 4 documents a known defect: the tabulated piecewise formulas
//! for the qv-only mean are the value of the best *constant* volatility
//! control, while the solver computes the supremum over *adapted* controls,
//! which is strictly larger near the reversion level. The test asserts the
//! stated tolerance faithfully and therefore fails; its message carries the
//! measured gap and an independent Monte Carlo cross-check certifying that
//! the solver, not the formula, is on the right side.

use std::sync::Arc;
use std::time::Instant;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use gcir::analysis::{
    increment_moment_study, markov_semigroup_check, negativity_diagnostic, qv_oracle_error_at_zero,
    strong_error_study,
};
use gcir::closed_form::{
    mean_drift_case, mean_lower_qv_case, mean_upper_qv_case, second_moment_drift_case, MomentQuery,
    Regime,
};
use gcir::model::{CirParams, GFunction, Payoff};
use gcir::pde::{solve, PdeProblem, SpatialGrid};
use gcir::simulate::{upper_expectation_bangbang, upper_expectation_constant, EulerConfig};

fn band12() -> GFunction {
    GFunction::new(1.0, 2.0).unwrap()
}

fn full_model() -> CirParams {
    CirParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance criterion {id:02} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

#[test]
fn criterion_01_closed_form_self_consistency() {
    let start = Instant::now();
    let mut rng = SmallRng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d1 = rng.random_range(0.05..4.0);
        let b1 = rng.random_range(0.05..4.0);
        let s = rng.random_range(0.05..3.0);
        let x = rng.random_range(0.0..10.0);
        let a_sq = rng.random_range(0.0..5.0);
        let t = rng.random_range(0.0..3.0);
        let p = CirParams::drift_only(d1, b1, s).unwrap();
        let q = MomentQuery::new(p, t, t, x).unwrap();

        let m2 = second_moment_drift_case(&q, a_sq, Regime::DriftOnly).unwrap();
        worst = worst.max((m2 - x * x).abs());
        let m1 = mean_drift_case(&q, Regime::DriftOnly).unwrap();
        worst = worst.max((m1 - x).abs());

        let d2 = rng.random_range(0.05..4.0);
        let b2 = rng.random_range(0.05..4.0);
        let gf = band12();
        let pq = CirParams::qv_only(d2, b2, s).unwrap();
        let qq = MomentQuery::new(pq, t, t, x).unwrap();
        worst = worst.max((mean_upper_qv_case(&qq, &gf, Regime::QvOnly).unwrap() - x).abs());
        worst = worst.max((mean_lower_qv_case(&qq, &gf, Regime::QvOnly).unwrap() - x).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && elapsed < 1.0;
    report(
        1,
        "closed-form terminal self-consistency",
        pass,
        &format!("worst terminal deviation {worst:.2e} over 100 draws, {elapsed:.3}s"),
    );
    assert!(pass, "worst deviation {worst:.2e}, elapsed {elapsed:.3}s");
}

#[test]
fn criterion_02_pde_vs_oracle_drift_mean() {
    let start = Instant::now();
    let p = CirParams::drift_only(1.0, 0.5, 1.0).unwrap();
    let problem = PdeProblem::new(p, band12(), Payoff::identity(), 1.0).unwrap();
    let grid = SpatialGrid::new(5.0, 501).unwrap();
    let sol = solve(&problem, &grid, None).unwrap();
    let got = sol.evaluate(0.0, 1.0).unwrap();
    let oracle = 2.0 - (-0.5f64).exp();
    let err = (got - oracle).abs();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = err <= 1e-2 && elapsed < 30.0;
    report(
        2,
        "PDE vs drift-only mean oracle",
        pass,
        &format!("u(0,1) = {got:.8}, oracle {oracle:.8}, |err| = {err:.2e}, {elapsed:.2}s"),
    );
    assert!(pass, "error {err:.3e}, elapsed {elapsed:.2}s");
}

#[test]
fn criterion_03_pde_vs_oracle_second_moment_with_truncation_check() {
    let p = CirParams::drift_only(1.0, 1.0, 1.0).unwrap();
    let gf = band12();
    let phi = Payoff::square(12.0).unwrap();
    let oracle = 2.0 - (-2.0f64).exp();

    let problem = PdeProblem::new(p, gf, phi.clone(), 1.0).unwrap();
    let base = solve(&problem, &SpatialGrid::new(6.0, 601).unwrap(), None).unwrap();
    let doubled = solve(&problem, &SpatialGrid::new(12.0, 1201).unwrap(), None).unwrap();
    let v1 = base.evaluate(0.0, 1.0).unwrap();
    let v2 = doubled.evaluate(0.0, 1.0).unwrap();
    let err = (v1 - oracle).abs();
    let shift = (v2 - v1).abs();
    let pass = err <= 2e-2 && shift < 5e-3;
    report(
        3,
        "PDE vs drift-only second-moment oracle",
        pass,
        &format!("u(0,1) = {v1:.8}, oracle {oracle:.8}, |err| = {err:.2e}, x_max doubling moved {shift:.2e}"),
    );
    assert!(pass, "error {err:.3e}, doubling shift {shift:.3e}");
}

/// Criterion 4 as stated: the solver output against the piecewise qv-mean
/// formulas at x in {0, 0.5, 1, 2} within 1e-2. The formulas are the best
/// *constant*-control value and the adapted-control supremum computed by
/// the solver exceeds them near the reversion level, so this criterion
/// cannot pass; the assertion message quantifies the gap and includes an
/// admissible-control Monte Carlo lower bound that certifies the solver's
/// value.
#[test]
fn criterion_04_pde_vs_qv_mean_formulas() {
    let p = CirParams::qv_only(1.0, 1.0, 1.0).unwrap();
    let gf = band12();
    let queries = [0.0, 0.5, 1.0, 2.0];

    let upper_problem = PdeProblem::new(p, gf, Payoff::identity(), 1.0).unwrap();
    let grid = SpatialGrid::new(5.0, 501).unwrap();
    let upper_sol = solve(&upper_problem, &grid, None).unwrap();
    let lower_problem = PdeProblem::new(p, gf, Payoff::negate(), 1.0).unwrap();
    let lower_sol = solve(&lower_problem, &grid, None).unwrap();

    let mut detail = String::new();
    let mut max_err = 0.0f64;
    for &x in &queries {
        let q = MomentQuery::new(p, 0.0, 1.0, x).unwrap();
        let up_formula = mean_upper_qv_case(&q, &gf, Regime::QvOnly).unwrap();
        let lo_formula = mean_lower_qv_case(&q, &gf, Regime::QvOnly).unwrap();
        let up = upper_sol.evaluate(0.0, x).unwrap();
        let lo = -lower_sol.evaluate(0.0, x).unwrap();
        max_err = max_err.max((up - up_formula).abs()).max((lo - lo_formula).abs());
        detail.push_str(&format!(
            "x={x}: upper {up:.6} vs formula {up_formula:.6}, lower {lo:.6} vs formula {lo_formula:.6}; "
        ));
    }

    // Independent certificate: one admissible adapted control already beats
    // the upper formula at the kink, so the formula is below the supremum.
    let config = EulerConfig::new(1 << 10, 100_000, 424242).unwrap();
    let field = Arc::new(upper_sol.optimal_control_field());
    let bb = upper_expectation_bangbang(&Payoff::identity(), &p, &gf, &config, 0.0, 1.0, 1.0, field)
        .unwrap();
    let kink_formula = 1.0;
    detail.push_str(&format!(
        "admissible bang-bang control at x0=1: {:.6} +/- {:.1e} vs formula {kink_formula:.6}",
        bb.value, bb.std_error
    ));

    let pass = max_err <= 1e-2;
    report(4, "PDE vs qv-only mean formulas", pass, &format!("max |err| = {max_err:.3e}; {detail}"));
    assert!(
        pass,
        "max discrepancy {max_err:.3e} > 1e-2. The piecewise formulas equal the best constant-control \
         value; the solver computes the adapted-control supremum, which is strictly larger near the \
         reversion level. {detail}"
    );
}

#[test]
fn criterion_05_monte_carlo_triangulation_both_regimes() {
    let start = Instant::now();
    let gf = band12();
    let config = EulerConfig::new(1 << 10, 100_000, 808).unwrap();

    let drift = CirParams::drift_only(1.0, 0.5, 1.0).unwrap();
    let (up_d, _) =
        upper_expectation_constant(&Payoff::identity(), &drift, &gf, &config, 0.0, 1.0, 1.0, 5)
            .unwrap();
    let oracle_d = 2.0 - (-0.5f64).exp();
    let err_d = (up_d.value - oracle_d).abs();
    let ok_d = err_d <= 3.0 * up_d.std_error + 5e-3 && up_d.std_error <= 5e-3;

    let qv = CirParams::qv_only(1.0, 1.0, 1.0).unwrap();
    let (up_q, _) =
        upper_expectation_constant(&Payoff::identity(), &qv, &gf, &config, 0.0, 1.0, 0.0, 5)
            .unwrap();
    let oracle_q = 1.0 - (-2.0f64).exp();
    let err_q = (up_q.value - oracle_q).abs();
    let ok_q = err_q <= 3.0 * up_q.std_error + 5e-3 && up_q.std_error <= 5e-3;

    let elapsed = start.elapsed().as_secs_f64();
    let pass = ok_d && ok_q && elapsed < 120.0;
    report(
        5,
        "Monte Carlo vs oracles in both regimes",
        pass,
        &format!(
            "drift: {:.6} vs {oracle_d:.6} (se {:.1e}); qv: {:.6} vs {oracle_q:.6} (se {:.1e}); {elapsed:.1}s",
            up_d.value, up_d.std_error, up_q.value, up_q.std_error
        ),
    );
    assert!(pass, "drift err {err_d:.2e} (se {:.2e}), qv err {err_q:.2e} (se {:.2e}), {elapsed:.1}s",
        up_d.std_error, up_q.std_error);
}

#[test]
fn criterion_06_increment_moment_rate() {
    let start = Instant::now();
    let config = EulerConfig::new(16, 100_000, 777).unwrap();
    let meshes: Vec<usize> = (4..=12).map(|k| 1usize << k).collect();
    let study =
        increment_moment_study(&full_model(), &band12(), &config, 0.0, 1.0, 1.0, &meshes).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let slope = study.fitted_slope;
    let pass = (0.8..=1.2).contains(&slope) && elapsed < 300.0;
    report(
        6,
        "increment-moment scaling slope",
        pass,
        &format!("fitted slope {slope:.4} over h = 2^-4..2^-12, {elapsed:.1}s"),
    );
    assert!(pass, "slope {slope:.4}, elapsed {elapsed:.1}s");
}

#[test]
fn criterion_07_strong_convergence_monotone() {
    let config = EulerConfig::new(16, 10_000, 555).unwrap();
    let meshes = [16, 32, 64, 128, 256, 4096];
    let study =
        strong_error_study(&full_model(), &band12(), &config, 0.0, 1.0, 1.0, &meshes).unwrap();
    let coupled = &study.errors[..5];
    let pass = coupled.windows(2).all(|w| w[1] < w[0]);
    report(
        7,
        "coupled strong error decreases across 4 halvings",
        pass,
        &format!("sup-square errors {coupled:?}"),
    );
    assert!(pass, "errors not strictly decreasing: {:?}", study.errors);
}

#[test]
fn criterion_08_terminal_negativity_vanishes() {
    let config = EulerConfig::new(16, 100_000, 313).unwrap();
    let meshes = [8, 32, 128, 512, 2048];
    let study =
        negativity_diagnostic(&full_model(), &band12(), &config, 0.0, 0.25, 0.0, &meshes).unwrap();
    let means = &study.terminal_neg.errors;
    let finest = *means.last().unwrap();
    // Decreasing until the statistic reaches its converged band: values
    // below 1e-6 (a thousandth of the acceptance threshold) are single-path
    // atoms whose ordering is sampling noise, not signal.
    let pass = finest <= 1e-3 && means.windows(2).all(|w| w[1] <= w[0] || w[1] <= 1e-6);
    report(
        8,
        "worst-control terminal negative part",
        pass,
        &format!(
            "means {means:?}, fractions {:?}",
            study.negative_path_fraction
        ),
    );
    assert!(pass, "means {means:?}");
}

#[test]
fn criterion_09_semigroup_identity_under_refinement() {
    let p = CirParams::qv_only(1.0, 1.0, 1.0).unwrap();
    let gf = band12();
    let problem = PdeProblem::new(p, gf, Payoff::identity(), 1.0).unwrap();
    let mut discs = Vec::new();
    let mut pass = true;
    let mut detail = String::new();
    for nx in [201usize, 401, 801] {
        let grid = SpatialGrid::new(5.0, nx).unwrap();
        let disc = markov_semigroup_check(&problem, &grid, 0.5).unwrap();
        let sol = solve(&problem, &grid, None).unwrap();
        let oracle_err = qv_oracle_error_at_zero(&sol, &p, &gf).unwrap();
        pass &= disc <= 2.0 * oracle_err;
        detail.push_str(&format!("nx={nx}: split {disc:.3e} vs 2x one-shot err {:.3e}; ", 2.0 * oracle_err));
        discs.push(disc);
    }
    // A split whose segment time-grids align exactly with the one-shot
    // grid reproduces it bitwise (discrepancy exactly 0, as for the
    // degenerate splits gamma = 0 and gamma = t'); zero cannot decrease
    // further under refinement.
    pass &= discs.windows(2).all(|w| w[1] <= w[0] || w[0] == 0.0);
    report(9, "two-stage vs one-shot semigroup solve", pass, &detail);
    assert!(pass, "{detail} discrepancies {discs:?}");
}

#[test]
fn criterion_10_g_function_property_suite() {
    let start = Instant::now();
    let mut rng = SmallRng::seed_from_u64(99);
    let mut pass = true;
    for _ in 0..10_000 {
        let lo = rng.random_range(0.0..3.0);
        let hi = lo + rng.random_range(0.1..4.0);
        let g = GFunction::new(lo, hi).unwrap();
        let a = rng.random_range(-100.0..100.0);
        let b = rng.random_range(-100.0..100.0);
        let lam = rng.random_range(0.0..50.0);

        let ulp = |v: f64| 4.0 * f64::EPSILON * v.abs().max(1e-300);

        // Sublinearity.
        let (sab, sa, sb) = (g.eval(a + b), g.eval(a), g.eval(b));
        pass &= sab <= sa + sb + ulp(sa + sb).max(ulp(sab));
        // Monotonicity.
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        pass &= g.eval(x) <= g.eval(y);
        // Positive homogeneity.
        let (lhs, rhs) = (g.eval(lam * a), lam * g.eval(a));
        pass &= (lhs - rhs).abs() <= ulp(lhs).max(ulp(rhs));
        // Argmax consistency 2G(a) = q*(a) a.
        let (twog, qa) = (2.0 * g.eval(a), g.argmax(a) * a);
        pass &= (twog - qa).abs() <= ulp(twog).max(ulp(qa));
        if !pass {
            break;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 1.0;
    report(
        10,
        "G-function property suite",
        pass,
        &format!("10^4 randomized inputs at ulp-scale tolerance, {elapsed:.3}s"),
    );
    assert!(pass, "elapsed {elapsed:.3}s");
}
