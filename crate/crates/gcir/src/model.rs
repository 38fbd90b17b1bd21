//! Model primitives: the sublinear generator `G`, the CIR parameter set,
//! terminal payoffs, and the sign-convention conversion between the
//! mean-reversion form `(delta - beta x)` and the general linear form
//! `(2 beta~ x + delta)`.
//!
//! Everything here is immutable after construction and evaluation is pure,
//! so values can be shared freely across worker threads.

use crate::error::{invalid, GcirError, Result};

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite, got {v}")))
    }
}

/// The sublinear and monotone generator
/// `G(a) = (sigma_hi² a⁺ − sigma_lo² a⁻) / 2`
/// together with its volatility band `[sigma_lo², sigma_hi²]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GFunction {
    sigma_lo_sq: f64,
    sigma_hi_sq: f64,
}

impl GFunction {
    /// Strict band: `0 ≤ sigma_lo_sq < sigma_hi_sq`.
    pub fn new(sigma_lo_sq: f64, sigma_hi_sq: f64) -> Result<Self> {
        check_finite("sigma_lo_sq", sigma_lo_sq)?;
        check_finite("sigma_hi_sq", sigma_hi_sq)?;
        if !(sigma_lo_sq >= 0.0 && sigma_lo_sq < sigma_hi_sq) {
            return Err(invalid(format!(
                "volatility band requires 0 <= sigma_lo_sq < sigma_hi_sq, got [{sigma_lo_sq}, {sigma_hi_sq}]"
            )));
        }
        Ok(Self {
            sigma_lo_sq,
            sigma_hi_sq,
        })
    }

    /// Band that may be degenerate (`sigma_lo_sq == sigma_hi_sq`), which
    /// collapses the sublinear expectation to a single prior. Used by the
    /// linear-reduction diagnostics; the primary constructor is [`Self::new`].
    pub fn with_band(sigma_lo_sq: f64, sigma_hi_sq: f64) -> Result<Self> {
        check_finite("sigma_lo_sq", sigma_lo_sq)?;
        check_finite("sigma_hi_sq", sigma_hi_sq)?;
        if !(sigma_lo_sq >= 0.0 && sigma_lo_sq <= sigma_hi_sq && sigma_hi_sq > 0.0) {
            return Err(invalid(format!(
                "volatility band requires 0 <= sigma_lo_sq <= sigma_hi_sq and sigma_hi_sq > 0, got [{sigma_lo_sq}, {sigma_hi_sq}]"
            )));
        }
        Ok(Self {
            sigma_lo_sq,
            sigma_hi_sq,
        })
    }

    pub fn sigma_lo_sq(&self) -> f64 {
        self.sigma_lo_sq
    }

    pub fn sigma_hi_sq(&self) -> f64 {
        self.sigma_hi_sq
    }

    /// Lower volatility `sigma_lo = sqrt(sigma_lo_sq)`.
    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo_sq.sqrt()
    }

    /// Upper volatility `sigma_hi = sqrt(sigma_hi_sq)`.
    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi_sq.sqrt()
    }

    /// `G(a) = (sigma_hi² a⁺ − sigma_lo² a⁻) / 2`, equivalently
    /// `sup_{q ∈ [sigma_lo², sigma_hi²]} q a / 2`. Total on all of `R`.
    pub fn eval(&self, a: f64) -> f64 {
        0.5 * (self.sigma_hi_sq * a.max(0.0) - self.sigma_lo_sq * (-a).max(0.0))
    }

    /// The maximizing variance `q* ∈ {sigma_lo², sigma_hi²}` in
    /// `2 G(a) = sup_q q a`. The tie at `a = 0` resolves to `sigma_hi²` so
    /// that bang-bang controls derived from this function are deterministic.
    pub fn argmax(&self, a: f64) -> f64 {
        if a < 0.0 {
            self.sigma_lo_sq
        } else {
            self.sigma_hi_sq
        }
    }
}

/// The five constants of the uncertain CIR dynamics
/// `dX = (delta1 - beta1 X) dt + (delta2 - beta2 X) d<B> + sigma sqrt(X) dB`.
///
/// The primary constructor [`Self::new`] requires all five to be strictly
/// positive. The degenerate regimes used by the closed-form oracles
/// (`delta2 = beta2 = 0` or `delta1 = beta1 = 0`) and the zero-diffusion
/// diagnostics are reachable through [`Self::drift_only`], [`Self::qv_only`]
/// and [`Self::custom`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirParams {
    pub delta1: f64,
    pub delta2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma: f64,
}

impl CirParams {
    /// All five constants strictly positive.
    pub fn new(delta1: f64, delta2: f64, beta1: f64, beta2: f64, sigma: f64) -> Result<Self> {
        let p = Self::custom(delta1, delta2, beta1, beta2, sigma)?;
        for (name, v) in [
            ("delta1", delta1),
            ("delta2", delta2),
            ("beta1", beta1),
            ("beta2", beta2),
            ("sigma", sigma),
        ] {
            if v <= 0.0 {
                return Err(invalid(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(p)
    }

    /// Degenerate regime without a `d<B>`-drift: `delta2 = beta2 = 0`.
    pub fn drift_only(delta1: f64, beta1: f64, sigma: f64) -> Result<Self> {
        Self::custom(delta1, 0.0, beta1, 0.0, sigma)
    }

    /// Degenerate regime without a `dt`-drift: `delta1 = beta1 = 0`.
    pub fn qv_only(delta2: f64, beta2: f64, sigma: f64) -> Result<Self> {
        Self::custom(0.0, delta2, 0.0, beta2, sigma)
    }

    /// Relaxed constructor admitting zeros (degenerate regimes, or
    /// `sigma = 0` for deterministic diagnostics). All fields must still be
    /// finite and non-negative.
    pub fn custom(delta1: f64, delta2: f64, beta1: f64, beta2: f64, sigma: f64) -> Result<Self> {
        for (name, v) in [
            ("delta1", delta1),
            ("delta2", delta2),
            ("beta1", beta1),
            ("beta2", beta2),
            ("sigma", sigma),
        ] {
            check_finite(name, v)?;
            if v < 0.0 {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(Self {
            delta1,
            delta2,
            beta1,
            beta2,
            sigma,
        })
    }

    /// The 1/2-Hölder constant of the diffusion map `x ↦ sigma sqrt(x)`,
    /// which equals `sigma` itself. Recorded here rather than stored.
    pub fn holder_constant(&self) -> f64 {
        self.sigma
    }

    /// `dt`-drift `delta1 - beta1 x`.
    pub fn dt_drift(&self, x: f64) -> f64 {
        self.delta1 - self.beta1 * x
    }

    /// `d<B>`-drift `delta2 - beta2 x`.
    pub fn qv_drift(&self, x: f64) -> f64 {
        self.delta2 - self.beta2 * x
    }

    /// The projected diffusion coefficient: `sigma sqrt(x)` on `[0, ∞)` and
    /// exactly 0 on negative states, so that transiently negative Euler
    /// iterates carry no stochastic increment.
    pub fn projected_diffusion(&self, x: f64) -> f64 {
        if x >= 0.0 {
            self.sigma * x.sqrt()
        } else {
            0.0
        }
    }
}

/// Coefficients of the general linear form `(2 beta~ x + delta)` for both
/// drift terms. Produced from [`CirParams`] by [`to_general_form`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralFormCoeffs {
    pub beta1_tilde: f64,
    pub beta2_tilde: f64,
    pub delta1: f64,
    pub delta2: f64,
}

/// Convert mean-reversion coefficients to the general linear form:
/// `delta - beta x = 2 (-beta/2) x + delta`, so `beta~ = -beta/2`.
pub fn to_general_form(p: &CirParams) -> GeneralFormCoeffs {
    GeneralFormCoeffs {
        beta1_tilde: -p.beta1 / 2.0,
        beta2_tilde: -p.beta2 / 2.0,
        delta1: p.delta1,
        delta2: p.delta2,
    }
}

/// Inverse of [`to_general_form`]; `sigma` is not part of the general-form
/// coefficients and is supplied separately. Exact round-trip.
pub fn from_general_form(g: &GeneralFormCoeffs, sigma: f64) -> Result<CirParams> {
    CirParams::custom(g.delta1, g.delta2, -2.0 * g.beta1_tilde, -2.0 * g.beta2_tilde, sigma)
}

#[derive(Debug, Clone, PartialEq)]
enum PayoffKind {
    Identity,
    Negate,
    Square,
    NegSquare,
    /// 1 on `[0, a]`, linear ramp down to 0 over `[a, a + w]`, 0 beyond.
    SmoothedIndicator { threshold: f64, width: f64 },
    /// `clamp(x, lo, hi)`.
    ClippedLinear { lo: f64, hi: f64 },
    /// Piecewise-linear interpolation of tabulated values, constant beyond
    /// the first/last knot.
    Custom { knots: Vec<f64>, values: Vec<f64> },
}

/// Discriminant of a payoff's functional form, for callers that dispatch on
/// it (the triangulation report matches oracle formulas by shape).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoffShape {
    Identity,
    Negate,
    Square,
    NegSquare,
    SmoothedIndicator,
    ClippedLinear,
    Custom,
}

/// A terminal payoff `phi` together with a Lipschitz bound `L` such that
/// `|phi(x) - phi(y)| <= L |x - y|` on the state domain.
///
/// The quadratic payoffs are unbounded on `[0, ∞)`; they are admitted with
/// an explicit domain cap supplied by the caller (the PDE grid truncation
/// makes them effectively bounded), and the cap fixes their recorded
/// Lipschitz bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoff {
    kind: PayoffKind,
    lipschitz_bound: f64,
}

impl Payoff {
    /// `phi(x) = x`.
    pub fn identity() -> Self {
        Self {
            kind: PayoffKind::Identity,
            lipschitz_bound: 1.0,
        }
    }

    /// `phi(x) = -x`.
    pub fn negate() -> Self {
        Self {
            kind: PayoffKind::Negate,
            lipschitz_bound: 1.0,
        }
    }

    /// `phi(x) = x²` on a domain capped at `x_cap`, so `L = 2 x_cap`.
    pub fn square(x_cap: f64) -> Result<Self> {
        check_finite("x_cap", x_cap)?;
        if x_cap <= 0.0 {
            return Err(invalid(format!("square payoff domain cap must be positive, got {x_cap}")));
        }
        Ok(Self {
            kind: PayoffKind::Square,
            lipschitz_bound: 2.0 * x_cap,
        })
    }

    /// `phi(x) = -x²` on a domain capped at `x_cap`.
    pub fn neg_square(x_cap: f64) -> Result<Self> {
        let p = Self::square(x_cap)?;
        Ok(Self {
            kind: PayoffKind::NegSquare,
            lipschitz_bound: p.lipschitz_bound,
        })
    }

    /// Default ramp width of the smoothed indicator.
    pub const DEFAULT_RAMP_WIDTH: f64 = 0.05;

    /// [`Self::smoothed_indicator`] with the default ramp width.
    pub fn smoothed_indicator_default(threshold: f64) -> Result<Self> {
        Self::smoothed_indicator(threshold, Self::DEFAULT_RAMP_WIDTH)
    }

    /// Lipschitz replacement of the indicator `1_{x <= a}`: value 1 up to
    /// `threshold`, then a linear ramp to 0 over `width`, so `L = 1/width`.
    pub fn smoothed_indicator(threshold: f64, width: f64) -> Result<Self> {
        check_finite("threshold", threshold)?;
        check_finite("width", width)?;
        if width <= 0.0 {
            return Err(invalid(format!("ramp width must be positive, got {width}")));
        }
        Ok(Self {
            kind: PayoffKind::SmoothedIndicator { threshold, width },
            lipschitz_bound: 1.0 / width,
        })
    }

    /// `phi(x) = clamp(x, lo, hi)` with `lo < hi`; `L = 1`.
    pub fn clipped_linear(lo: f64, hi: f64) -> Result<Self> {
        check_finite("lo", lo)?;
        check_finite("hi", hi)?;
        if lo >= hi {
            return Err(invalid(format!("clipped linear needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self {
            kind: PayoffKind::ClippedLinear { lo, hi },
            lipschitz_bound: 1.0,
        })
    }

    /// Piecewise-linear payoff through `(knots[i], values[i])`, constant
    /// beyond the end knots. Knots must be finite and strictly ascending.
    pub fn custom(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(invalid("custom payoff needs equal, non-zero numbers of knots and values"));
        }
        for (&k, &v) in knots.iter().zip(&values) {
            check_finite("knot", k)?;
            check_finite("value", v)?;
        }
        let mut lipschitz = 0.0f64;
        for i in 1..knots.len() {
            if knots[i] <= knots[i - 1] {
                return Err(invalid("custom payoff knots must be strictly ascending"));
            }
            let slope = (values[i] - values[i - 1]) / (knots[i] - knots[i - 1]);
            lipschitz = lipschitz.max(slope.abs());
        }
        Ok(Self {
            kind: PayoffKind::Custom { knots, values },
            lipschitz_bound: lipschitz,
        })
    }

    /// Constant payoff `phi ≡ c` (a one-knot tabulation); `L = 0`.
    pub fn constant(c: f64) -> Result<Self> {
        Self::custom(vec![0.0], vec![c])
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn shape(&self) -> PayoffShape {
        match &self.kind {
            PayoffKind::Identity => PayoffShape::Identity,
            PayoffKind::Negate => PayoffShape::Negate,
            PayoffKind::Square => PayoffShape::Square,
            PayoffKind::NegSquare => PayoffShape::NegSquare,
            PayoffKind::SmoothedIndicator { .. } => PayoffShape::SmoothedIndicator,
            PayoffKind::ClippedLinear { .. } => PayoffShape::ClippedLinear,
            PayoffKind::Custom { .. } => PayoffShape::Custom,
        }
    }

    /// Evaluate on the state domain; negative `x` is rejected.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Err(GcirError::NegativeState(x));
        }
        Ok(self.eval_extended(x))
    }

    /// Evaluate the payoff's defining formula on all of `R`. The Euler
    /// polygonal approximation may leave `[0, ∞)` transiently, so terminal
    /// functionals are applied through this natural extension.
    pub fn eval_extended(&self, x: f64) -> f64 {
        match &self.kind {
            PayoffKind::Identity => x,
            PayoffKind::Negate => -x,
            PayoffKind::Square => x * x,
            PayoffKind::NegSquare => -(x * x),
            PayoffKind::SmoothedIndicator { threshold, width } => {
                if x <= *threshold {
                    1.0
                } else if x >= threshold + width {
                    0.0
                } else {
                    1.0 - (x - threshold) / width
                }
            }
            PayoffKind::ClippedLinear { lo, hi } => x.clamp(*lo, *hi),
            PayoffKind::Custom { knots, values } => {
                if x <= knots[0] {
                    return values[0];
                }
                if x >= *knots.last().unwrap() {
                    return *values.last().unwrap();
                }
                let j = knots.partition_point(|&k| k <= x);
                let (k0, k1) = (knots[j - 1], knots[j]);
                let (v0, v1) = (values[j - 1], values[j]);
                v0 + (v1 - v0) * (x - k0) / (k1 - k0)
            }
        }
    }

    /// The exact pointwise negation `-phi`. Piecewise-linear kinds map to
    /// exact tabulations, so no approximation is introduced.
    pub fn negated(&self) -> Payoff {
        let kind = match &self.kind {
            PayoffKind::Identity => PayoffKind::Negate,
            PayoffKind::Negate => PayoffKind::Identity,
            PayoffKind::Square => PayoffKind::NegSquare,
            PayoffKind::NegSquare => PayoffKind::Square,
            PayoffKind::SmoothedIndicator { threshold, width } => PayoffKind::Custom {
                knots: vec![*threshold, threshold + width],
                values: vec![-1.0, 0.0],
            },
            PayoffKind::ClippedLinear { lo, hi } => PayoffKind::Custom {
                knots: vec![*lo, *hi],
                values: vec![-lo, -hi],
            },
            PayoffKind::Custom { knots, values } => PayoffKind::Custom {
                knots: knots.clone(),
                values: values.iter().map(|v| -v).collect(),
            },
        };
        Payoff {
            kind,
            lipschitz_bound: self.lipschitz_bound,
        }
    }

    /// Supremum of `|phi|` over `[0, x_max]`, used by boundedness checks.
    pub fn sup_abs_on(&self, x_max: f64) -> f64 {
        match &self.kind {
            PayoffKind::Identity | PayoffKind::Negate => x_max,
            PayoffKind::Square | PayoffKind::NegSquare => x_max * x_max,
            PayoffKind::SmoothedIndicator { .. } => 1.0,
            PayoffKind::ClippedLinear { lo, hi } => {
                let at0 = (0.0f64).clamp(*lo, *hi).abs();
                let at_max = x_max.clamp(*lo, *hi).abs();
                at0.max(at_max)
            }
            PayoffKind::Custom { knots, values } => {
                // Piecewise linear attains extrema at knots and interval ends.
                let mut sup = self.eval_extended(0.0).abs().max(self.eval_extended(x_max).abs());
                for (&k, &v) in knots.iter().zip(values) {
                    if k >= 0.0 && k <= x_max {
                        sup = sup.max(v.abs());
                    }
                }
                sup
            }
        }
    }
}
