//! JSON run configuration: a single document with a fixed schema. Unknown
//! keys are errors — silent typos in numeric experiment configs are the
//! dominant failure mode.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use gcir::closed_form::Regime;
use gcir::model::{CirParams, GFunction, Payoff};
use gcir::pde::{self, ControlField, PdeProblem, SpatialGrid};
use gcir::simulate::{EulerConfig, SchemeVariant, VolatilityControl};

/// Configuration-level failure: reported with a field/line diagnostic and
/// exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub sigma_lo_sq: f64,
    pub sigma_hi_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    Identity,
    Negate,
    /// `cap` bounds the domain for the recorded Lipschitz constant; the
    /// grid truncation is used when omitted.
    Square {
        #[serde(skip_serializing_if = "Option::is_none")]
        cap: Option<f64>,
    },
    NegSquare {
        #[serde(skip_serializing_if = "Option::is_none")]
        cap: Option<f64>,
    },
    SmoothedIndicator {
        threshold: f64,
        width: f64,
    },
    ClippedLinear {
        lo: f64,
        hi: f64,
    },
    Custom {
        knots: Vec<f64>,
        values: Vec<f64>,
    },
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_max: f64,
    pub nx: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EulerSection {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    Projection,
    FullTruncation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    /// One fixed volatility.
    Constant { theta: f64 },
    /// Maximize over `n_theta` constants spanning the band.
    Grid { n_theta: usize },
    /// Piecewise-constant in time.
    Piecewise { breakpoints: Vec<f64>, thetas: Vec<f64> },
    /// State-dependent control read off the PDE maximizing-variance field.
    BangBang,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeConfig {
    DriftOnly,
    QvOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudyConfig {
    Increment { mesh_steps: Vec<usize> },
    StrongError { mesh_steps: Vec<usize> },
    Negativity { mesh_steps: Vec<usize> },
}

/// The full run configuration. Sections irrelevant to a subcommand may be
/// omitted; each subcommand checks for what it needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ParamsConfig,
    pub g: BandConfig,
    pub payoff: PayoffConfig,
    pub t: f64,
    pub t_prime: f64,
    pub x0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub euler: Option<EulerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl RunConfig {
    /// Parse and validate; serde errors carry line/column, field errors
    /// carry the field path.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        // Domain constructors carry the detailed invariants; surface their
        // messages with the owning field name.
        self.build_params().map_err(|e| ConfigError(format!("params: {e}")))?;
        self.build_band().map_err(|e| ConfigError(format!("g: {e}")))?;
        if !(self.t.is_finite() && self.t_prime.is_finite() && self.t >= 0.0 && self.t < self.t_prime)
        {
            return cfg_err(format!(
                "t/t_prime: need 0 <= t < t_prime, got t = {}, t_prime = {}",
                self.t, self.t_prime
            ));
        }
        if !(self.x0.is_finite() && self.x0 >= 0.0) {
            return cfg_err(format!("x0: must be non-negative, got {}", self.x0));
        }
        if let Some(g) = &self.grid {
            SpatialGrid::new(g.x_max, g.nx).map_err(|e| ConfigError(format!("grid: {e}")))?;
        }
        if let Some(e) = &self.euler {
            EulerConfig::new(e.n_steps, e.n_paths, e.seed)
                .map_err(|e| ConfigError(format!("euler: {e}")))?;
        }
        if let Some(gamma) = self.gamma {
            if !(gamma.is_finite() && gamma >= 0.0 && gamma <= self.t_prime) {
                return cfg_err(format!("gamma: must lie in [0, t_prime], got {gamma}"));
            }
        }
        // Payoff validity may depend on the grid default; check here.
        self.build_payoff().map_err(|e| ConfigError(format!("payoff: {e}")))?;
        Ok(())
    }

    pub fn build_params(&self) -> gcir::Result<CirParams> {
        let p = &self.params;
        CirParams::custom(p.delta1, p.delta2, p.beta1, p.beta2, p.sigma)
    }

    pub fn build_band(&self) -> gcir::Result<GFunction> {
        GFunction::with_band(self.g.sigma_lo_sq, self.g.sigma_hi_sq)
    }

    pub fn regime(&self) -> Option<Regime> {
        self.regime.as_ref().map(|r| match r {
            RegimeConfig::DriftOnly => Regime::DriftOnly,
            RegimeConfig::QvOnly => Regime::QvOnly,
        })
    }

    /// Grid from the config, or the default truncation for this problem.
    pub fn build_grid(&self) -> Result<SpatialGrid, ConfigError> {
        match &self.grid {
            Some(g) => SpatialGrid::new(g.x_max, g.nx).map_err(|e| ConfigError(format!("grid: {e}"))),
            None => {
                let params = self.build_params().map_err(|e| ConfigError(e.to_string()))?;
                let gf = self.build_band().map_err(|e| ConfigError(e.to_string()))?;
                let x_max = pde::default_x_max(&params, &gf, self.t_prime, self.x0);
                SpatialGrid::new(x_max, 501).map_err(|e| ConfigError(format!("grid: {e}")))
            }
        }
    }

    pub fn build_payoff(&self) -> gcir::Result<Payoff> {
        let default_cap = || match &self.grid {
            Some(g) => g.x_max,
            None => 10.0 * (self.x0 + 1.0),
        };
        match &self.payoff {
            PayoffConfig::Identity => Ok(Payoff::identity()),
            PayoffConfig::Negate => Ok(Payoff::negate()),
            PayoffConfig::Square { cap } => Payoff::square(cap.unwrap_or_else(default_cap)),
            PayoffConfig::NegSquare { cap } => Payoff::neg_square(cap.unwrap_or_else(default_cap)),
            PayoffConfig::SmoothedIndicator { threshold, width } => {
                Payoff::smoothed_indicator(*threshold, *width)
            }
            PayoffConfig::ClippedLinear { lo, hi } => Payoff::clipped_linear(*lo, *hi),
            PayoffConfig::Custom { knots, values } => Payoff::custom(knots.clone(), values.clone()),
            PayoffConfig::Constant { value } => Payoff::constant(*value),
        }
    }

    /// Euler section with the optional CLI-level seed override applied.
    pub fn build_euler(&self, seed_override: Option<u64>) -> Result<EulerConfig, ConfigError> {
        let Some(e) = &self.euler else {
            return cfg_err("euler: section required for this subcommand");
        };
        let seed = seed_override.unwrap_or(e.seed);
        let config = EulerConfig::new(e.n_steps, e.n_paths, seed)
            .map_err(|err| ConfigError(format!("euler: {err}")))?;
        Ok(match e.scheme {
            Some(SchemeConfig::FullTruncation) => config.with_scheme(SchemeVariant::FullTruncation),
            _ => config,
        })
    }

    pub fn control(&self) -> Result<&ControlConfig, ConfigError> {
        match &self.control {
            Some(c) => Ok(c),
            None => cfg_err("control: section required for this subcommand"),
        }
    }

    /// A concrete simulation control. Bang-bang solves the PDE for the
    /// given payoff to obtain the maximizing-variance field.
    pub fn build_control(
        &self,
        control: &ControlConfig,
        payoff_for_field: &Payoff,
    ) -> Result<VolatilityControl, ConfigError> {
        let params = self.build_params().map_err(|e| ConfigError(e.to_string()))?;
        let gf = self.build_band().map_err(|e| ConfigError(e.to_string()))?;
        match control {
            ControlConfig::Constant { theta } => VolatilityControl::constant(*theta, &gf)
                .map_err(|e| ConfigError(format!("control: {e}"))),
            ControlConfig::Piecewise { breakpoints, thetas } => {
                VolatilityControl::piecewise(breakpoints.clone(), thetas.clone(), &gf)
                    .map_err(|e| ConfigError(format!("control: {e}")))
            }
            ControlConfig::BangBang => {
                let field = self.solve_control_field(&params, &gf, payoff_for_field)?;
                VolatilityControl::bang_bang(field, &gf)
                    .map_err(|e| ConfigError(format!("control: {e}")))
            }
            ControlConfig::Grid { .. } => cfg_err(
                "control: the theta-grid maximizer is not a single control; use it with the upper/lower subcommands",
            ),
        }
    }

    pub fn solve_control_field(
        &self,
        params: &CirParams,
        gf: &GFunction,
        payoff: &Payoff,
    ) -> Result<Arc<ControlField>, ConfigError> {
        let grid = self.build_grid()?;
        let problem = PdeProblem::new(*params, *gf, payoff.clone(), self.t_prime)
            .map_err(|e| ConfigError(e.to_string()))?;
        let sol = pde::solve(&problem, &grid, None).map_err(|e| ConfigError(e.to_string()))?;
        Ok(Arc::new(sol.optimal_control_field()))
    }

    /// Effective seed recorded in artifacts.
    pub fn effective_seed(&self, seed_override: Option<u64>) -> Option<u64> {
        seed_override.or(self.euler.as_ref().map(|e| e.seed))
    }

    /// The canonical serialization hashed into every artifact. The seed
    /// override is applied first so the hash identifies the effective run.
    pub fn canonical_with_seed(&self, seed_override: Option<u64>) -> String {
        let mut effective = self.clone();
        if let (Some(seed), Some(euler)) = (seed_override, effective.euler.as_mut()) {
            euler.seed = seed;
        }
        serde_json::to_string(&effective).expect("config serialization is infallible")
    }
}
