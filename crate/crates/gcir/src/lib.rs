//! Numerical engine for the Cox-Ingersoll-Ross short-rate model under
//! volatility uncertainty.
//!
//! The state follows the sublinear-expectation dynamics
//!
//! ```text
//! dX_t = (delta1 - beta1 X_t) dt + (delta2 - beta2 X_t) d<B>_t + sigma sqrt(X_t) dB_t,
//! ```
//!
//! where `B` is a G-Brownian motion whose quadratic variation is only known
//! to satisfy `d<B>_t ∈ [sigma_lo² dt, sigma_hi² dt]`. Upper and lower
//! expectations of terminal payoffs `E^[phi(X_{t'})]` are computed by three
//! mutually checking routes:
//!
//! * [`closed_form`] — exact formulas in the two degenerate parameter
//!   regimes (no `d<B>`-drift, or no `dt`-drift);
//! * [`pde`] — a monotone explicit finite-difference solver for the fully
//!   nonlinear parabolic PDE
//!   `u_t + (delta1 - beta1 x) u_x + 2 G((delta2 - beta2 x) u_x + sigma² x/2 · u_xx) = 0`;
//! * [`simulate`] — Monte Carlo over the Euler polygonal approximation,
//!   maximized over volatility controls `theta_t ∈ [sigma_lo, sigma_hi]`.
//!
//! [`analysis`] bundles the empirical verification harness: increment-moment
//! scaling, strong-convergence and non-negativity studies, the Markov
//! semigroup identity at the PDE level, and a triangulation report that
//! cross-checks all routes.

pub mod analysis;
pub mod closed_form;
pub mod error;
pub mod model;
pub mod numeric;
pub mod pde;
pub mod simulate;

pub use error::{GcirError, Result};
pub use model::{CirParams, GFunction, GeneralFormCoeffs, Payoff};
