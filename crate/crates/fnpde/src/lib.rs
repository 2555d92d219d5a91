//! Backward-in-time solver for fully nonlinear second-order parabolic PDEs.
//!
//! The terminal value problem
//!
//! ```text
//!   -dv/dt - L v - F(t, x, v, Dv, D2v) = 0,    v(T, x) = g(x)
//! ```
//!
//! with `L` the generator of a forward diffusion `X`, is discretised by
//! stepping backwards on a time grid. Each step first computes the
//! conditional expectation of the next layer together with its first and
//! second space derivatives, obtained by weighting the layer against
//! polynomials in the Brownian increment, and then applies an explicit
//! correction through the nonlinearity `F`.
//!
//! Two expectation backends are provided:
//!
//! * a grid backend for one and two space dimensions that stores each layer
//!   as a cubic spline and integrates the Gaussian transition kernel against
//!   the spline basis in closed form, and
//! * a particle backend that simulates a cloud of forward paths once and
//!   estimates conditional expectations by local least squares regression
//!   (or by a Malliavin-style weighted average) along the stored paths.
//!
//! The [`nonlinearity`] module ships the operators used by the built-in
//! presets: a linear generator for rate checks, the level-set mean curvature
//! operator, and two Hamilton-Jacobi-Bellman operators from portfolio
//! optimisation. The [`oracles`] module provides independent reference
//! values (exact quadrature for the linear family, shrinking spheres for
//! mean curvature flow, a Feynman-Kac representation for the stochastic
//! volatility control problem) against which the solver is tested.

pub mod config;
pub mod expectation;
pub mod frontprop;
pub mod nonlinearity;
pub mod oracles;
pub mod presets;
pub mod regression;
pub mod runner;
pub mod sde;
pub mod solver;
pub mod weights;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration input.
    #[error("configuration error: {0}")]
    Config(String),

    /// The diffusion matrix is numerically singular, so the derivative
    /// weights cannot be formed.
    #[error("diffusion matrix singular or ill conditioned at t = {t}, x = {x:?} (condition estimate {cond:.3e})")]
    SingularDiffusion {
        /// Time at which the failure occurred.
        t: f64,
        /// State at which the failure occurred.
        x: Vec<f64>,
        /// One norm condition estimate of the offending matrix.
        cond: f64,
    },

    /// A numerical routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Underlying I/O failure while reading or writing run artifacts.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
