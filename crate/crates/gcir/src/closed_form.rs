//! Exact oracle formulas for the two degenerate parameter regimes of the
//! uncertain CIR model. These are the ground truth against which the PDE
//! solver and the Monte Carlo estimators are triangulated.
//!
//! * Drift-only regime (`delta2 = beta2 = 0`): the mean carries no
//!   uncertainty and the second moment is explicit with the variance bound
//!   `a² ∈ {sigma_lo², sigma_hi²}` selecting the upper/lower value.
//! * Quadratic-variation-only regime (`delta1 = beta1 = 0`): the mean is
//!   uncertain and piecewise exponential with a kink at `delta2/beta2`.
//!
//! Regimes are requested by an explicit [`Regime`] flag rather than inferred
//! from near-zero parameters; the irrelevant fields are forced to zero for
//! the evaluation. All formulas use `expm1` groupings so that the terminal
//! identity (`t = t'` returns the payoff of `x`) is exact in floating point.

use crate::error::{invalid, GcirError, Result};
use crate::model::{CirParams, GFunction};

/// Which degenerate parameter regime a closed-form oracle is asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `delta2 = beta2 = 0`, `beta1 != 0`.
    DriftOnly,
    /// `delta1 = beta1 = 0`, `beta2 != 0`.
    QvOnly,
}

/// A moment query `E^[phi(X^{t,x}_{t'})]`: parameters, the evaluation
/// interval `[t, t']`, and the state `x` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentQuery {
    pub params: CirParams,
    pub t: f64,
    pub t_prime: f64,
    pub x: f64,
}

impl MomentQuery {
    /// `t <= t'` and `x >= 0`. Equality `t = t'` is admitted so the
    /// terminal identities can be evaluated directly.
    pub fn new(params: CirParams, t: f64, t_prime: f64, x: f64) -> Result<Self> {
        if !(t.is_finite() && t_prime.is_finite() && x.is_finite()) {
            return Err(invalid("moment query fields must be finite"));
        }
        if t > t_prime {
            return Err(invalid(format!("query needs t <= t_prime, got t = {t}, t_prime = {t_prime}")));
        }
        if x < 0.0 {
            return Err(GcirError::NegativeState(x));
        }
        Ok(Self {
            params,
            t,
            t_prime,
            x,
        })
    }

    fn horizon(&self) -> f64 {
        self.t_prime - self.t
    }
}

fn require(regime: Regime, wanted: Regime, op: &str) -> Result<()> {
    if regime == wanted {
        Ok(())
    } else {
        Err(GcirError::RegimeMismatch(format!(
            "{op} requires the {wanted:?} regime flag, got {regime:?}"
        )))
    }
}

/// Mean in the drift-only regime:
/// `E^[X] = -E^[-X] = e^{-beta1 (t'-t)} (x - delta1/beta1) + delta1/beta1`.
///
/// There is no mean uncertainty here; the diffusion integral is a symmetric
/// martingale under every prior. `delta2`, `beta2` are forced to zero.
pub fn mean_drift_case(q: &MomentQuery, regime: Regime) -> Result<f64> {
    require(regime, Regime::DriftOnly, "mean_drift_case")?;
    let p = q.params;
    if p.beta1 == 0.0 {
        return Err(invalid("drift-only mean needs beta1 != 0"));
    }
    let m = p.delta1 / p.beta1;
    // x + (x - m) expm1(-beta1 tau) == e^{-beta1 tau}(x - m) + m, exact at tau = 0.
    Ok(q.x + (q.x - m) * (-p.beta1 * q.horizon()).exp_m1())
}

/// Second moment in the drift-only regime with the variance bound `a_sq`
/// selecting the branch: `a_sq = sigma_hi²` gives the upper second moment
/// `E^[X²]`, `a_sq = sigma_lo²` gives the lower one `-E^[-X²]`.
pub fn second_moment_drift_case(q: &MomentQuery, a_sq: f64, regime: Regime) -> Result<f64> {
    require(regime, Regime::DriftOnly, "second_moment_drift_case")?;
    let p = q.params;
    if p.beta1 == 0.0 {
        return Err(invalid("drift-only second moment needs beta1 != 0"));
    }
    if !(a_sq.is_finite() && a_sq >= 0.0) {
        return Err(invalid(format!("variance bound a_sq must be non-negative, got {a_sq}")));
    }
    let m = p.delta1 / p.beta1;
    let c = p.sigma * p.sigma * a_sq / (2.0 * p.beta1);
    let d = q.x - m;
    let e1 = (-p.beta1 * q.horizon()).exp_m1();
    // Grouping with every tau-dependent term carrying a factor expm1(-beta1 tau),
    // so the value at tau = 0 is bitwise x².
    Ok(q.x * q.x + e1 * ((2.0 * c + 2.0 * m) * d + (2.0 + e1) * (d * d + c * (m - 2.0 * q.x))))
}

fn qv_mean(q: &MomentQuery, exponent_below: f64, exponent_above: f64) -> Result<f64> {
    let p = q.params;
    if p.beta2 == 0.0 {
        return Err(invalid("qv-only mean needs beta2 != 0"));
    }
    let m = p.delta2 / p.beta2;
    let a_sq = if q.x <= m { exponent_below } else { exponent_above };
    Ok(q.x + (q.x - m) * (-a_sq * p.beta2 * q.horizon()).exp_m1())
}

/// Upper mean `E^[X]` in the qv-only regime: piecewise exponential with the
/// `sigma_hi²` rate below the kink `delta2/beta2` and the `sigma_lo²` rate
/// above it; continuous at the kink. `delta1`, `beta1` are forced to zero.
pub fn mean_upper_qv_case(q: &MomentQuery, gf: &GFunction, regime: Regime) -> Result<f64> {
    require(regime, Regime::QvOnly, "mean_upper_qv_case")?;
    qv_mean(q, gf.sigma_hi_sq(), gf.sigma_lo_sq())
}

/// Lower mean `-E^[-X]` in the qv-only regime: the mirror of
/// [`mean_upper_qv_case`] with the exponent roles swapped. Always at most
/// the upper mean; the gap is the mean uncertainty.
pub fn mean_lower_qv_case(q: &MomentQuery, gf: &GFunction, regime: Regime) -> Result<f64> {
    require(regime, Regime::QvOnly, "mean_lower_qv_case")?;
    qv_mean(q, gf.sigma_lo_sq(), gf.sigma_hi_sq())
}
