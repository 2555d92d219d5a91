//! Reference values the integration tests compare against: the explicit
//! solution of the linear testbed, the shrinking-sphere radius law, and the
//! quasi-explicit value of the stochastic-volatility portfolio problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::expectation::gauss_hermite;
use crate::sde::cir_implicit_milstein_step;
use crate::{Error, Result};

/// Exact solution of `v_t + (1 + 2c)/2 v_xx = 0` with terminal data `g`:
/// `v(t, x) = E[g(x + sqrt(1 + 2c) W_(T-t))]`, evaluated by Gauss-Hermite
/// quadrature of order 64.
pub fn linear_exact(g: &dyn Fn(f64) -> f64, c: f64, t: f64, x: f64, t_end: f64) -> Result<f64> {
    if c < 0.0 {
        return Err(Error::Config(format!("diffusion augmentation must be nonnegative, got {c}")));
    }
    if t > t_end {
        return Err(Error::Config(format!(
            "evaluation time {t} lies beyond the horizon {t_end}"
        )));
    }
    if t == t_end {
        return Ok(g(x));
    }
    let scale = ((1.0 + 2.0 * c) * (t_end - t)).sqrt();
    let (nodes, weights) = gauss_hermite(64)?;
    let mut v = 0.0;
    for (z, w) in nodes.iter().zip(&weights) {
        v += w * g(x + scale * z);
    }
    Ok(v)
}

/// Radius at flow time `t` of a sphere moving by mean curvature from the
/// initial profile `4r^2 - |x|^2` in three dimensions: `2 sqrt(r^2 - t)`.
pub fn sphere_radius(t: f64, r: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Config(format!("flow time must be nonnegative, got {t}")));
    }
    if t >= r * r {
        return Err(Error::Config(format!(
            "surface is extinct at flow time {t} (extinction at {})",
            r * r
        )));
    }
    Ok(2.0 * (r * r - t).sqrt())
}

/// Inputs of [`zariphopoulou_value`]: market and variance-process parameters
/// together with the Monte Carlo resolution.
#[derive(Clone, Copy, Debug)]
pub struct PortfolioValueInputs {
    /// Risky asset excess drift.
    pub mu: f64,
    /// Variance process volatility.
    pub c: f64,
    /// Variance mean-reversion rate.
    pub k: f64,
    /// Variance mean-reversion level.
    pub m: f64,
    /// Correlation between asset and variance noise.
    pub rho: f64,
    /// Exponential risk aversion.
    pub eta: f64,
    /// Initial wealth.
    pub x: f64,
    /// Initial variance.
    pub y: f64,
    /// Valuation time.
    pub t: f64,
    /// Horizon.
    pub t_end: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

/// Monte Carlo value plus the number of integrand evaluations that needed
/// the positivity guard.
#[derive(Clone, Copy, Debug)]
pub struct PortfolioValue {
    pub value: f64,
    pub guarded_steps: usize,
}

/// Quasi-explicit value of the exponential-utility portfolio problem under
/// a square-root variance process:
/// `v(t, x, y) = -e^(-eta x) (E[R^p])^(1/p)` with `p = 1 - rho^2` and
/// `R = exp(-1/2 int_t^T mu^2 / Y~_s ds)`, where `Y~` follows the variance
/// dynamics with drift adjusted to `k(m - y) - mu c rho`. The integral uses
/// the trapezoid rule on the simulation grid and guards the integrand at
/// `y = 1e-8`.
pub fn zariphopoulou_value(inp: &PortfolioValueInputs) -> Result<PortfolioValue> {
    if inp.rho * inp.rho >= 1.0 {
        return Err(Error::Config(format!(
            "correlation must satisfy rho^2 < 1, got {}",
            inp.rho
        )));
    }
    if !(inp.k > 0.0) || !(inp.m > 0.0) || inp.c < 0.0 || !(inp.eta > 0.0) || !(inp.y >= 0.0) {
        return Err(Error::Config(
            "variance parameters k, m and risk aversion eta must be positive, c and y nonnegative"
                .into(),
        ));
    }
    if inp.t > inp.t_end || inp.n_steps == 0 || inp.n_paths == 0 {
        return Err(Error::Config(
            "horizon must not precede the valuation time and the Monte Carlo resolution must be positive"
                .into(),
        ));
    }
    let p = 1.0 - inp.rho * inp.rho;
    if inp.t == inp.t_end {
        return Ok(PortfolioValue {
            value: -(-inp.eta * inp.x).exp(),
            guarded_steps: 0,
        });
    }
    let h = (inp.t_end - inp.t) / inp.n_steps as f64;
    let m_adjusted = inp.m - inp.mu * inp.c * inp.rho / inp.k;
    let mut rng = ChaCha12Rng::seed_from_u64(inp.seed);
    let mut guarded = 0usize;
    let mut integrand = |y: f64| {
        if y < 1e-8 {
            guarded += 1;
            inp.mu * inp.mu / 1e-8
        } else {
            inp.mu * inp.mu / y
        }
    };
    let mut acc = 0.0f64;
    for _ in 0..inp.n_paths {
        let mut y = inp.y;
        let mut total = 0.0;
        let mut f_prev = integrand(y);
        for _ in 0..inp.n_steps {
            let xi: f64 = rng.sample(StandardNormal);
            y = cir_implicit_milstein_step(inp.k, m_adjusted, inp.c, y, xi, h);
            let f_next = integrand(y);
            total += 0.5 * h * (f_prev + f_next);
            f_prev = f_next;
        }
        acc += (-0.5 * total).exp().powf(p);
    }
    let norm = (acc / inp.n_paths as f64).powf(1.0 / p);
    Ok(PortfolioValue {
        value: -(-inp.eta * inp.x).exp() * norm,
        guarded_steps: guarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_exact_terminal_identity() {
        let g = |x: f64| (x * 0.7).cos() + 0.2 * x;
        for &x in &[-1.3, 0.0, 2.4] {
            assert_eq!(linear_exact(&g, 0.4, 1.0, x, 1.0).unwrap(), g(x));
        }
    }

    #[test]
    fn linear_exact_matches_cosine_closed_form() {
        let g = |x: f64| x.cos();
        for &c in &[0.0, 0.25, 1.0] {
            for &(t, x) in &[(0.0, 0.0), (0.3, -1.1), (0.7, 2.0)] {
                let got = linear_exact(&g, c, t, x, 1.0).unwrap();
                let expect = x.cos() * (-(1.0 + 2.0 * c) * (1.0 - t) / 2.0).exp();
                assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn linear_exact_at_zero_c_is_heat_convolution() {
        let g = |x: f64| (0.5 * x).cos() * (-0.25 * x * x).exp();
        let (t, x, t_end) = (0.25, 0.4, 1.0);
        let got = linear_exact(&g, 0.0, t, x, t_end).unwrap();
        let s = (t_end - t).sqrt();
        let mut sum = 0.0;
        let half_width = 10.0;
        let steps = 400_000;
        let dz = 2.0 * half_width / steps as f64;
        for i in 0..=steps {
            let z = -half_width + i as f64 * dz;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            sum += w * g(x + s * z) * (-0.5 * z * z).exp();
        }
        let expect = sum * dz / (2.0 * std::f64::consts::PI).sqrt();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-8);
    }

    #[test]
    fn linear_exact_satisfies_the_pde_residual() {
        let g = |x: f64| x.tanh();
        let c = 0.25;
        let (dt, dx) = (1e-4, 1e-3);
        for &t in &[0.2, 0.5] {
            for &x in &[-1.0, 0.0, 1.3] {
                let v = |tt: f64, xx: f64| linear_exact(&g, c, tt, xx, 1.0).unwrap();
                let vt = (v(t + dt, x) - v(t - dt, x)) / (2.0 * dt);
                let vxx = (v(t, x + dx) - 2.0 * v(t, x) + v(t, x - dx)) / (dx * dx);
                let residual = vt + 0.5 * (1.0 + 2.0 * c) * vxx;
                assert!(residual.abs() <= 1e-4, "residual {residual} at t={t}, x={x}");
            }
        }
    }

    #[test]
    fn sphere_radius_law() {
        assert_abs_diff_eq!(sphere_radius(0.0, 0.5).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            sphere_radius(0.15, 0.5).unwrap(),
            2.0 * 0.1f64.sqrt(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            sphere_radius(0.1, 0.5).unwrap(),
            0.7745966692414834,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            sphere_radius(0.2, 0.5).unwrap(),
            0.4472135954999579,
            epsilon = 1e-15
        );
        assert!(sphere_radius(0.2499999, 0.5).unwrap() < 2e-3);
        assert!(sphere_radius(0.25, 0.5).is_err());
        assert!(sphere_radius(0.3, 0.5).is_err());
    }

    fn paper_inputs() -> PortfolioValueInputs {
        PortfolioValueInputs {
            mu: 0.15,
            c: 0.2,
            k: 0.1,
            m: 0.3,
            rho: 0.0,
            eta: 1.0,
            x: 1.0,
            y: 0.3,
            t: 0.0,
            t_end: 1.0,
            n_steps: 100,
            n_paths: 200_000,
            seed: 42,
        }
    }

    #[test]
    fn portfolio_value_with_zero_drift_is_pure_utility() {
        let mut inp = paper_inputs();
        inp.mu = 0.0;
        inp.n_paths = 500;
        let got = zariphopoulou_value(&inp).unwrap();
        assert_abs_diff_eq!(got.value, -(-1.0f64).exp(), epsilon = 1e-14);
        assert_eq!(got.guarded_steps, 0);
    }

    #[test]
    fn portfolio_value_with_deterministic_variance_matches_ode_integral() {
        let mut inp = paper_inputs();
        inp.c = 0.0;
        inp.y = 0.45;
        inp.n_steps = 2000;
        inp.n_paths = 1;
        let got = zariphopoulou_value(&inp).unwrap();
        let a = inp.y - inp.m;
        let integral = inp.mu * inp.mu
            * (((inp.m * (inp.k * inp.t_end).exp() + a).ln()) - inp.y.ln())
            / (inp.k * inp.m);
        let expect = -(-inp.eta * inp.x).exp() * (-0.5 * integral).exp();
        assert_abs_diff_eq!(got.value, expect, epsilon = 1e-3);
    }

    #[test]
    fn portfolio_value_reproduces_printed_figure() {
        let got = zariphopoulou_value(&paper_inputs()).unwrap();
        assert_abs_diff_eq!(got.value, -0.3534, epsilon = 2e-3);
        assert_eq!(got.guarded_steps, 0);
    }

    #[test]
    fn portfolio_value_magnitude_shrinks_with_wealth_and_risk_aversion() {
        let mut prev = f64::INFINITY;
        for &x in &[0.5, 1.0, 1.5, 2.0] {
            let mut inp = paper_inputs();
            inp.n_paths = 2000;
            inp.x = x;
            let v = zariphopoulou_value(&inp).unwrap().value;
            assert!(v < 0.0);
            assert!(v.abs() < prev, "|v| not decreasing in wealth at x = {x}");
            prev = v.abs();
        }
        prev = f64::INFINITY;
        for &eta in &[0.5, 1.0, 2.0] {
            let mut inp = paper_inputs();
            inp.n_paths = 2000;
            inp.eta = eta;
            let v = zariphopoulou_value(&inp).unwrap().value;
            assert!(v.abs() < prev, "|v| not decreasing in risk aversion at eta = {eta}");
            prev = v.abs();
        }
    }

    #[test]
    fn portfolio_value_rejects_bad_parameters() {
        let mut inp = paper_inputs();
        inp.rho = 1.0;
        assert!(zariphopoulou_value(&inp).is_err());
        let mut inp = paper_inputs();
        inp.k = 0.0;
        assert!(zariphopoulou_value(&inp).is_err());
        let mut inp = paper_inputs();
        inp.t = 2.0;
        assert!(zariphopoulou_value(&inp).is_err());
    }
}
