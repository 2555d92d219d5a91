//! Backward induction engines for the one-step update
//! `T_h[psi](t, x) = E[psi(t + h, X^)] + h * sign * F(t, x, D_h psi)`:
//! a deterministic grid engine that integrates cubic spline layers against
//! the Gaussian transition exactly, and a Monte Carlo engine that replaces
//! the conditional expectations with regressions over a particle cloud.

use std::cell::Cell;
use std::io::Write;

use crate::expectation::{gaussian_interval_moments, gh_expectation, QuadratureRule, WeightKind};
use crate::nonlinearity::{monotonicity_transform, NonlinearOperator};
use crate::regression::{LocalBasisConfig, LocalBasisFit, LocalBasisGeometry, MalliavinEstimator};
use crate::sde::{DiffusionSpec, ParticleCloud, Stepper};
use crate::weights::SigmaInverse;
use crate::{Error, Result};

/// Clamp constants for the layer sup bound. Fields left unset fall back to
/// the operator's declared bounds and the terminal sup.
#[derive(Clone, Debug, Default)]
pub struct TruncationConfig {
    /// Growth rate; defaults to the operator's `fr_sup` bound.
    pub c1: Option<f64>,
    /// Additive inflow; defaults to the operator's cap, then its zero level.
    pub c2: Option<f64>,
    /// Sup of the terminal layer; defaults to the measured one.
    pub g_sup: Option<f64>,
}

/// Shared knobs of one backward solve.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Step size; the horizon must be an integer multiple of it.
    pub h: f64,
    /// Horizon T carrying the terminal condition.
    pub t_end: f64,
    /// 1 estimates the Hessian with second-order increment weights, 2 chains
    /// a fitted gradient through first-order weights.
    pub scheme: u8,
    /// Exponential shift restoring monotonicity; 0 disables it.
    pub theta: f64,
    /// Layer clamping; `None` disables it.
    pub truncation: Option<TruncationConfig>,
    /// Seed recorded with the run and used to draw the particle cloud.
    pub seed: u64,
}

impl SolverConfig {
    /// Number of backward steps, after validating every shared field.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.h > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::Config(format!(
                "step size and horizon must be positive, got h = {}, T = {}",
                self.h, self.t_end
            )));
        }
        let nf = self.t_end / self.h;
        let n = nf.round();
        if n < 1.0 || (nf - n).abs() > 1e-9 * nf.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {} is not an integer number of steps of size {}",
                self.t_end, self.h
            )));
        }
        if self.scheme != 1 && self.scheme != 2 {
            return Err(Error::Config(format!(
                "scheme must be 1 or 2, got {}",
                self.scheme
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::Config("the monotonicity shift must be finite".into()));
        }
        if let Some(tc) = &self.truncation {
            for (name, v) in [("C1", tc.c1), ("C2", tc.c2), ("g_sup", tc.g_sup)] {
                if let Some(v) = v {
                    if !(v >= 0.0) {
                        return Err(Error::Config(format!(
                            "truncation constant {name} must be nonnegative, got {v}"
                        )));
                    }
                }
            }
        }
        Ok(n as usize)
    }
}

/// One-step growth of the layer sup bound:
/// `K_h[psi_sup] = psi_sup (1 + C1 h) + C2 h`.
pub fn truncation_bound(psi_sup: f64, c1: f64, c2: f64, h: f64) -> f64 {
    psi_sup * (1.0 + c1 * h) + c2 * h
}

fn resolve_truncation(
    tc: &TruncationConfig,
    op: &NonlinearOperator,
    measured_g_sup: f64,
) -> Result<(f64, f64, f64)> {
    let c1 = tc.c1.unwrap_or(op.bounds.fr_sup);
    let c2 = tc.c2.unwrap_or_else(|| op.cap.unwrap_or(op.bounds.zero_level));
    let g_sup = tc.g_sup.unwrap_or(measured_g_sup);
    for (name, v) in [("C1", c1), ("C2", c2), ("g_sup", g_sup)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!(
                "resolved truncation constant {name} = {v} is not a nonnegative finite number"
            )));
        }
    }
    Ok((c1, c2, g_sup))
}

fn k_schedule(n: usize, c1: f64, c2: f64, g_sup: f64, h: f64) -> Vec<f64> {
    let mut k = vec![0.0; n + 1];
    k[n] = g_sup;
    for i in (0..n).rev() {
        k[i] = truncation_bound(k[i + 1], c1, c2, h);
    }
    k
}

/// Least-squares slope of `log error` against `log h`.
#[derive(Clone, Copy, Debug)]
pub struct RateEstimate {
    pub slope: f64,
    pub intercept: f64,
    /// Pairs dropped because their error was not positive.
    pub excluded: usize,
}

/// Fits the observed convergence order from at least three `(h, error)`
/// pairs. Nonpositive errors cannot enter the log fit and are dropped,
/// with the count reported in the estimate.
pub fn estimate_rate(hs: &[f64], errs: &[f64]) -> Result<RateEstimate> {
    if hs.len() != errs.len() {
        return Err(Error::Config(format!(
            "got {} step sizes but {} errors",
            hs.len(),
            errs.len()
        )));
    }
    if hs.len() < 3 {
        return Err(Error::Config(format!(
            "rate estimation needs at least three points, got {}",
            hs.len()
        )));
    }
    if hs.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Config("every step size must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .zip(errs)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&h, &e)| (h.ln(), e.ln()))
        .collect();
    let excluded = hs.len() - pts.len();
    if pts.len() < 2 {
        return Err(Error::Numerical(format!(
            "only {} positive errors left after exclusions; cannot fit a rate",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 * (n * sxx).abs().max(1.0) {
        return Err(Error::Numerical(
            "step sizes are too close together to fit a rate".into(),
        ));
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    Ok(RateEstimate {
        slope,
        intercept,
        excluded,
    })
}

/// Applies the one-step update to a value function given as a closure,
/// estimating the gradient and Hessian arguments with first and second
/// order increment weights under Gauss-Hermite quadrature.
pub fn apply_one_step(
    spec: &DiffusionSpec,
    op: &NonlinearOperator,
    psi: &dyn Fn(f64, &[f64]) -> f64,
    t: f64,
    x: &[f64],
    h: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    if spec.dim != op.dim {
        return Err(Error::Config(format!(
            "diffusion dimension {} does not match operator dimension {}",
            spec.dim, op.dim
        )));
    }
    let e0 = gh_expectation(psi, WeightKind::Value, spec, t, x, h, rule)?;
    let e1 = gh_expectation(psi, WeightKind::Gradient, spec, t, x, h, rule)?;
    let e2 = gh_expectation(psi, WeightKind::Hessian, spec, t, x, h, rule)?;
    let f = op.apply(t, x, e0[0], &e1, &e2);
    Ok(e0[0] + h * op.step_sign * f)
}

/// One-step update with the Hessian argument built by chaining an explicit
/// gradient field through first-order weights instead of second-order ones.
pub fn apply_one_step_with_gradient(
    spec: &DiffusionSpec,
    op: &NonlinearOperator,
    psi: &dyn Fn(f64, &[f64]) -> f64,
    grad_psi: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    t: f64,
    x: &[f64],
    h: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    let d = spec.dim;
    if d != op.dim {
        return Err(Error::Config(format!(
            "diffusion dimension {d} does not match operator dimension {}",
            op.dim
        )));
    }
    let e0 = gh_expectation(psi, WeightKind::Value, spec, t, x, h, rule)?;
    let e1 = gh_expectation(psi, WeightKind::Gradient, spec, t, x, h, rule)?;
    let mu = spec.drift_at(t, x);
    let sigma = spec.diffusion_at(t, x);
    let inv = SigmaInverse::new_at(&sigma, d, t, x)?;
    let sqrt_h = h.sqrt();
    let mut gamma = vec![0.0; d * d];
    let mut y = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut h1 = vec![0.0; d];
    for i in 0..rule.len() {
        let z = rule.node(i);
        for k in 0..d {
            dw[k] = sqrt_h * z[k];
        }
        for k in 0..d {
            let mut v = x[k] + mu[k] * h;
            for l in 0..d {
                v += sigma[k * d + l] * dw[l];
            }
            y[k] = v;
        }
        let grad = grad_psi(t + h, &y);
        inv.h1(&dw, h, &mut h1);
        let w = rule.weights[i];
        for j in 0..d {
            for k in 0..d {
                gamma[j * d + k] += w * 0.5 * (grad[j] * h1[k] + grad[k] * h1[j]);
            }
        }
    }
    let f = op.apply(t, x, e0[0], &e1, &gamma);
    Ok(e0[0] + h * op.step_sign * f)
}

/// Evaluation bounds covering `5 sigma sqrt(T)` of diffusion around the
/// start point on every axis.
pub fn default_grid_bounds(x0: &[f64], sigma_diag: &[f64], t_end: f64) -> (Vec<f64>, Vec<f64>) {
    let reach: Vec<f64> = sigma_diag
        .iter()
        .map(|s| 5.0 * s.abs() * t_end.sqrt())
        .collect();
    let lo = x0.iter().zip(&reach).map(|(x, r)| x - r).collect();
    let hi = x0.iter().zip(&reach).map(|(x, r)| x + r).collect();
    (lo, hi)
}

/// Node layout of the deterministic engine: an axis-aligned uniform grid.
#[derive(Clone, Debug)]
pub struct GridConfig {
    pub nodes: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

const PIECES: [[f64; 4]; 4] = [
    [8.0 / 6.0, 2.0, 1.0, 1.0 / 6.0],
    [4.0 / 6.0, 0.0, -1.0, -0.5],
    [4.0 / 6.0, 0.0, -1.0, 0.5],
    [8.0 / 6.0, -2.0, 1.0, -1.0 / 6.0],
];

const Z_REACH: f64 = 10.0;

fn bspline3(u: f64) -> f64 {
    let a = u.abs();
    if a >= 2.0 {
        0.0
    } else if a >= 1.0 {
        let w = 2.0 - a;
        w * w * w / 6.0
    } else {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    }
}

/// Natural cubic spline coefficients of uniformly spaced values, in the
/// cardinal B-spline basis. The result has two phantom entries extending
/// the ends linearly, so index `j + 1` carries the coefficient of the
/// basis function centered on node `j`.
fn spline_coeffs(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut c = vec![0.0; n + 2];
    c[1] = v[0];
    c[n] = v[n - 1];
    let m = n.saturating_sub(2);
    if m > 0 {
        let mut cp = vec![0.0; m];
        let mut dp = vec![0.0; m];
        for j in 0..m {
            let mut rhs = 6.0 * v[j + 1];
            if j == 0 {
                rhs -= v[0];
            }
            if j == m - 1 {
                rhs -= v[n - 1];
            }
            if j == 0 {
                cp[0] = 1.0 / 4.0;
                dp[0] = rhs / 4.0;
            } else {
                let denom = 4.0 - cp[j - 1];
                cp[j] = 1.0 / denom;
                dp[j] = (rhs - dp[j - 1]) / denom;
            }
        }
        c[m + 1] = dp[m - 1];
        for j in (0..m - 1).rev() {
            dp[j] -= cp[j] * dp[j + 1];
            c[j + 2] = dp[j];
        }
    }
    c[0] = 2.0 * c[1] - c[2];
    c[n + 1] = 2.0 * c[n] - c[n - 1];
    c
}

fn spline_eval(c: &[f64], lo: f64, dx: f64, n: usize, x: f64) -> f64 {
    let hi = lo + (n - 1) as f64 * dx;
    let xc = x.clamp(lo, hi);
    let cell = (((xc - lo) / dx).floor() as isize).clamp(0, n as isize - 2);
    let mut v = 0.0;
    for j in cell - 1..=cell + 2 {
        let xj = lo + j as f64 * dx;
        v += c[(j + 1) as usize] * bspline3((xc - xj) / dx);
    }
    v
}

/// Exact Gaussian moments of every spline basis function along one axis,
/// seen from one query point: entry `a[j][w]` is
/// `E[B_j(center + s Z) Z^w 1{center + s Z inside}]`, and the tails carry
/// the moments of the out-of-range mass.
struct AxisMoments {
    a: Vec<[f64; 3]>,
    tail_lo: [f64; 3],
    tail_hi: [f64; 3],
}

fn axis_moments(center: f64, s: f64, lo: f64, dx: f64, n: usize) -> AxisMoments {
    let hi = lo + (n - 1) as f64 * dx;
    let z_lo = (lo - center) / s;
    let z_hi = (hi - center) / s;
    let ml = gaussian_interval_moments(f64::NEG_INFINITY, z_lo, 2);
    let mh = gaussian_interval_moments(z_hi, f64::INFINITY, 2);
    let mut out = AxisMoments {
        a: vec![[0.0; 3]; n + 2],
        tail_lo: [ml[0], ml[1], ml[2]],
        tail_hi: [mh[0], mh[1], mh[2]],
    };
    let xi_lo = lo.max(center - Z_REACH * s);
    let xi_hi = hi.min(center + Z_REACH * s);
    if xi_lo >= xi_hi {
        return out;
    }
    let j_min = ((((xi_lo - lo) / dx).floor() as isize) - 2).max(-1);
    let j_max = ((((xi_hi - lo) / dx).ceil() as isize) + 2).min(n as isize);
    let beta = s / dx;
    let b2 = beta * beta;
    let b3 = b2 * beta;
    for j in j_min..=j_max {
        let xj = lo + j as f64 * dx;
        let alpha = (center - xj) / dx;
        let a2 = alpha * alpha;
        let a3 = a2 * alpha;
        let mut acc = [0.0f64; 3];
        for (k, poly) in PIECES.iter().enumerate() {
            let p_lo = xj + (k as f64 - 2.0) * dx;
            let a_xi = p_lo.max(xi_lo);
            let b_xi = (p_lo + dx).min(xi_hi);
            if a_xi >= b_xi {
                continue;
            }
            let za = (a_xi - center) / s;
            let zb = (b_xi - center) / s;
            let m = gaussian_interval_moments(za, zb, 5);
            let c0 = poly[0] + poly[1] * alpha + poly[2] * a2 + poly[3] * a3;
            let c1 = beta * (poly[1] + 2.0 * poly[2] * alpha + 3.0 * poly[3] * a2);
            let c2 = b2 * (poly[2] + 3.0 * poly[3] * alpha);
            let c3 = b3 * poly[3];
            for w in 0..3 {
                acc[w] += c0 * m[w] + c1 * m[w + 1] + c2 * m[w + 2] + c3 * m[w + 3];
            }
        }
        out.a[(j + 1) as usize] = acc;
    }
    out
}

/// Value surface produced by the grid engine: one layer of node values per
/// time step, already mapped back through any monotonicity shift.
pub struct GridSolution {
    dim: usize,
    nodes: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    dx: Vec<f64>,
    h: f64,
    layers: Vec<Vec<f64>>,
    /// Clamp events applied during the backward sweep.
    pub clipped: usize,
    /// Per-layer sup bound enforced by truncation, empty when disabled.
    pub k_bounds: Vec<f64>,
    /// Sup of each stored layer before output scaling.
    pub layer_sup: Vec<f64>,
    queries_clamped: Cell<usize>,
}

impl GridSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.h
    }

    /// Coordinate of node `j` along `axis`.
    pub fn node_coord(&self, axis: usize, j: usize) -> f64 {
        self.lo[axis] + j as f64 * self.dx[axis]
    }

    /// Raw node values of one layer, axis 0 major.
    pub fn node_values(&self, step: usize) -> &[f64] {
        &self.layers[step]
    }

    /// Queries outside the grid are clamped onto it and counted.
    pub fn queries_clamped(&self) -> usize {
        self.queries_clamped.get()
    }

    /// Spline interpolation of the stored layer at an arbitrary point.
    pub fn value_at(&self, step: usize, x: &[f64]) -> Result<f64> {
        if step >= self.layers.len() {
            return Err(Error::Config(format!(
                "time step {step} is outside the stored range 0..={}",
                self.layers.len() - 1
            )));
        }
        if x.len() != self.dim {
            return Err(Error::Config(format!(
                "query point has dimension {}, grid has {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .any(|((v, lo), hi)| v < lo || v > hi)
        {
            self.queries_clamped.set(self.queries_clamped.get() + 1);
        }
        let layer = &self.layers[step];
        match self.dim {
            1 => {
                let c = spline_coeffs(layer);
                Ok(spline_eval(&c, self.lo[0], self.dx[0], self.nodes[0], x[0]))
            }
            _ => {
                let (n0, n1) = (self.nodes[0], self.nodes[1]);
                let mut edge = vec![0.0; n0];
                for j0 in 0..n0 {
                    let c = spline_coeffs(&layer[j0 * n1..(j0 + 1) * n1]);
                    edge[j0] = spline_eval(&c, self.lo[1], self.dx[1], n1, x[1]);
                }
                let c = spline_coeffs(&edge);
                Ok(spline_eval(&c, self.lo[0], self.dx[0], n0, x[0]))
            }
        }
    }

    /// Dumps every layer as `step,t,<coords>,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        match self.dim {
            1 => writeln!(w, "step,t,x0,value")?,
            _ => writeln!(w, "step,t,x0,x1,value")?,
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let t = self.time(i);
            match self.dim {
                1 => {
                    for (j, v) in layer.iter().enumerate() {
                        writeln!(w, "{i},{t},{},{v}", self.node_coord(0, j))?;
                    }
                }
                _ => {
                    let n1 = self.nodes[1];
                    for (jj, v) in layer.iter().enumerate() {
                        let (j0, j1) = (jj / n1, jj % n1);
                        writeln!(
                            w,
                            "{i},{t},{},{},{v}",
                            self.node_coord(0, j0),
                            self.node_coord(1, j1)
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn probe_constant_coefficients(
    spec: &DiffusionSpec,
    lo: &[f64],
    hi: &[f64],
    t_end: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.dim;
    if !spec.steppers.iter().all(|s| matches!(s, Stepper::Euler)) {
        return Err(Error::Config(
            "the grid engine integrates the Euler transition; every component must use the \
             Euler stepper"
                .into(),
        ));
    }
    let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mu = spec.drift_at(0.0, &center);
    let sigma = spec.diffusion_at(0.0, &center);
    let mut probes = vec![center.clone()];
    let corners = 1usize << d;
    for mask in 0..corners {
        let p: Vec<f64> = (0..d)
            .map(|k| if mask >> k & 1 == 1 { hi[k] } else { lo[k] })
            .collect();
        probes.push(p);
    }
    for &t in &[0.0, 0.5 * t_end, t_end] {
        for p in &probes {
            if spec.drift_at(t, p) != mu || spec.diffusion_at(t, p) != sigma {
                return Err(Error::Config(
                    "the grid engine needs constant drift and diffusion coefficients".into(),
                ));
            }
        }
    }
    for j in 0..d {
        for k in 0..d {
            if j != k && sigma[j * d + k] != 0.0 {
                return Err(Error::Config(
                    "the grid engine needs a diagonal diffusion matrix".into(),
                ));
            }
        }
        if !(sigma[j * d + j] > 0.0) {
            return Err(Error::Config(format!(
                "diffusion must be positive on every axis, got {} on axis {j}",
                sigma[j * d + j]
            )));
        }
    }
    Ok((mu, (0..d).map(|k| sigma[k * d + k]).collect()))
}

/// Solves the terminal value problem on a uniform grid, representing each
/// layer as a natural cubic spline and integrating it against the Gaussian
/// transition in closed form. Values beyond the grid are clamped to the
/// edge profile. Constant coefficients, dimension at most two, scheme 1.
pub fn backward_solve_grid(
    spec: &DiffusionSpec,
    op: &NonlinearOperator,
    g: &dyn Fn(&[f64]) -> f64,
    cfg: &SolverConfig,
    grid: &GridConfig,
) -> Result<GridSolution> {
    let n_steps = cfg.n_steps()?;
    let d = spec.dim;
    if d != op.dim {
        return Err(Error::Config(format!(
            "diffusion dimension {d} does not match operator dimension {}",
            op.dim
        )));
    }
    if d > 2 {
        return Err(Error::Config(format!(
            "the grid engine supports one and two dimensions, got {d}"
        )));
    }
    if cfg.scheme != 1 {
        return Err(Error::Config(
            "the grid engine implements scheme 1 only; the gradient-chain scheme needs the \
             particle engine"
                .into(),
        ));
    }
    if grid.nodes.len() != d || grid.lo.len() != d || grid.hi.len() != d {
        return Err(Error::Config(format!(
            "grid axes do not match dimension {d}"
        )));
    }
    for k in 0..d {
        if grid.nodes[k] < 4 {
            return Err(Error::Config(format!(
                "axis {k} needs at least 4 nodes, got {}",
                grid.nodes[k]
            )));
        }
        if !(grid.lo[k] < grid.hi[k]) {
            return Err(Error::Config(format!(
                "axis {k} bounds are not increasing: [{}, {}]",
                grid.lo[k], grid.hi[k]
            )));
        }
    }
    let (mu, sigma_diag) = probe_constant_coefficients(spec, &grid.lo, &grid.hi, cfg.t_end)?;
    let op_t = monotonicity_transform(op, cfg.theta, cfg.t_end);
    let h = cfg.h;
    let sqrt_h = h.sqrt();
    let dx: Vec<f64> = (0..d)
        .map(|k| (grid.hi[k] - grid.lo[k]) / (grid.nodes[k] - 1) as f64)
        .collect();
    let n_total: usize = grid.nodes.iter().product();

    let coord = |axis: usize, j: usize| grid.lo[axis] + j as f64 * dx[axis];
    let mut u_next = vec![0.0; n_total];
    let mut xbuf = vec![0.0; d];
    for (jj, u) in u_next.iter_mut().enumerate() {
        match d {
            1 => xbuf[0] = coord(0, jj),
            _ => {
                xbuf[0] = coord(0, jj / grid.nodes[1]);
                xbuf[1] = coord(1, jj % grid.nodes[1]);
            }
        }
        *u = g(&xbuf);
        if !u.is_finite() {
            return Err(Error::Numerical(format!(
                "terminal condition is not finite at {xbuf:?}"
            )));
        }
    }
    let measured_g_sup = u_next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let trunc = match &cfg.truncation {
        Some(tc) => {
            let (c1, c2, gs) = resolve_truncation(tc, &op_t, measured_g_sup)?;
            Some((c1, c2, k_schedule(n_steps, c1, c2, gs, h)))
        }
        None => None,
    };

    let moments: Vec<Vec<AxisMoments>> = (0..d)
        .map(|axis| {
            (0..grid.nodes[axis])
                .map(|j| {
                    axis_moments(
                        coord(axis, j) + mu[axis] * h,
                        sigma_diag[axis] * sqrt_h,
                        grid.lo[axis],
                        dx[axis],
                        grid.nodes[axis],
                    )
                })
                .collect()
        })
        .collect();

    let mut layers = vec![Vec::new(); n_steps + 1];
    let mut layer_sup = vec![0.0; n_steps + 1];
    layer_sup[n_steps] = measured_g_sup;
    let scale = |i: usize| (-cfg.theta * (cfg.t_end - i as f64 * h)).exp();
    layers[n_steps] = u_next.clone();
    let mut clipped = 0usize;
    let mut u_cur = vec![0.0; n_total];
    let mut pvec = vec![0.0; d];
    let mut gam = vec![0.0; d * d];

    for i in (0..n_steps).rev() {
        let t = i as f64 * h;
        let k_i = trunc.as_ref().map(|(_, _, ks)| ks[i]);
        if d == 1 {
            let n = grid.nodes[0];
            let c = spline_coeffs(&u_next);
            let (s0, s1) = (sigma_diag[0] * sqrt_h, sigma_diag[0] * sigma_diag[0] * h);
            for (j, out) in u_cur.iter_mut().enumerate() {
                let am = &moments[0][j];
                let mut e = [0.0f64; 3];
                for (cj, aj) in c.iter().zip(&am.a) {
                    e[0] += cj * aj[0];
                    e[1] += cj * aj[1];
                    e[2] += cj * aj[2];
                }
                for w in 0..3 {
                    e[w] += u_next[0] * am.tail_lo[w] + u_next[n - 1] * am.tail_hi[w];
                }
                xbuf[0] = coord(0, j);
                pvec[0] = e[1] / s0;
                gam[0] = (e[2] - e[0]) / s1;
                let f = op_t.apply(t, &xbuf, e[0], &pvec, &gam);
                let mut v = e[0] + h * op_t.step_sign * f;
                if let Some(k) = k_i {
                    let c = v.clamp(-k, k);
                    if c != v {
                        clipped += 1;
                        v = c;
                    }
                }
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "backward value is not finite at t = {t}, x = {:?}",
                        &xbuf
                    )));
                }
                *out = v;
            }
        } else {
            let (n0, n1) = (grid.nodes[0], grid.nodes[1]);
            let mut cols = vec![0.0; (n0 + 2) * n1];
            let mut col = vec![0.0; n0];
            for k in 0..n1 {
                for j in 0..n0 {
                    col[j] = u_next[j * n1 + k];
                }
                let cc = spline_coeffs(&col);
                for j in 0..n0 + 2 {
                    cols[j * n1 + k] = cc[j];
                }
            }
            let mut c2d = vec![0.0; (n0 + 2) * (n1 + 2)];
            for j in 0..n0 + 2 {
                let cc = spline_coeffs(&cols[j * n1..(j + 1) * n1]);
                c2d[j * (n1 + 2)..(j + 1) * (n1 + 2)].copy_from_slice(&cc);
            }
            let w1 = n1 + 2;
            let mut e_lo = vec![0.0; w1];
            let mut e_hi = vec![0.0; w1];
            for k in 0..w1 {
                e_lo[k] = (c2d[k] + 4.0 * c2d[w1 + k] + c2d[2 * w1 + k]) / 6.0;
                e_hi[k] =
                    (c2d[(n0 - 1) * w1 + k] + 4.0 * c2d[n0 * w1 + k] + c2d[(n0 + 1) * w1 + k])
                        / 6.0;
            }
            let mut f_lo = vec![0.0; n0 + 2];
            let mut f_hi = vec![0.0; n0 + 2];
            for j in 0..n0 + 2 {
                f_lo[j] = (c2d[j * w1] + 4.0 * c2d[j * w1 + 1] + c2d[j * w1 + 2]) / 6.0;
                f_hi[j] = (c2d[j * w1 + n1 - 1]
                    + 4.0 * c2d[j * w1 + n1]
                    + c2d[j * w1 + n1 + 1])
                    / 6.0;
            }
            let corners = [
                u_next[0],
                u_next[n1 - 1],
                u_next[(n0 - 1) * n1],
                u_next[(n0 - 1) * n1 + n1 - 1],
            ];
            let (sa, sb) = (sigma_diag[0], sigma_diag[1]);
            let mut p_buf = vec![[0.0f64; 3]; n0 + 2];
            for i1 in 0..n1 {
                let am1 = &moments[1][i1];
                for (j, pj) in p_buf.iter_mut().enumerate() {
                    let row = &c2d[j * w1..(j + 1) * w1];
                    let mut acc = [0.0f64; 3];
                    for (ck, ak) in row.iter().zip(&am1.a) {
                        acc[0] += ck * ak[0];
                        acc[1] += ck * ak[1];
                        acc[2] += ck * ak[2];
                    }
                    *pj = acc;
                }
                let mut el = [0.0f64; 3];
                let mut eh = [0.0f64; 3];
                for (k, ak) in am1.a.iter().enumerate() {
                    for w in 0..3 {
                        el[w] += e_lo[k] * ak[w];
                        eh[w] += e_hi[k] * ak[w];
                    }
                }
                for i0 in 0..n0 {
                    let am0 = &moments[0][i0];
                    let mut e = [[0.0f64; 3]; 3];
                    for (aj, pj) in am0.a.iter().zip(&p_buf) {
                        for wa in 0..3 {
                            if aj[wa] == 0.0 {
                                continue;
                            }
                            for wb in 0..3 {
                                e[wa][wb] += aj[wa] * pj[wb];
                            }
                        }
                    }
                    let mut fl = [0.0f64; 3];
                    let mut fh = [0.0f64; 3];
                    for (j, aj) in am0.a.iter().enumerate() {
                        for w in 0..3 {
                            fl[w] += aj[w] * f_lo[j];
                            fh[w] += aj[w] * f_hi[j];
                        }
                    }
                    for wa in 0..3 {
                        for wb in 0..3 {
                            e[wa][wb] += am0.tail_lo[wa] * el[wb]
                                + am0.tail_hi[wa] * eh[wb]
                                + fl[wa] * am1.tail_lo[wb]
                                + fh[wa] * am1.tail_hi[wb]
                                + corners[0] * am0.tail_lo[wa] * am1.tail_lo[wb]
                                + corners[1] * am0.tail_lo[wa] * am1.tail_hi[wb]
                                + corners[2] * am0.tail_hi[wa] * am1.tail_lo[wb]
                                + corners[3] * am0.tail_hi[wa] * am1.tail_hi[wb];
                        }
                    }
                    let r = e[0][0];
                    pvec[0] = e[1][0] / (sa * sqrt_h);
                    pvec[1] = e[0][1] / (sb * sqrt_h);
                    gam[0] = (e[2][0] - r) / (sa * sa * h);
                    gam[3] = (e[0][2] - r) / (sb * sb * h);
                    gam[1] = e[1][1] / (sa * sb * h);
                    gam[2] = gam[1];
                    xbuf[0] = coord(0, i0);
                    xbuf[1] = coord(1, i1);
                    let f = op_t.apply(t, &xbuf, r, &pvec, &gam);
                    let mut v = r + h * op_t.step_sign * f;
                    if let Some(k) = k_i {
                        let cv = v.clamp(-k, k);
                        if cv != v {
                            clipped += 1;
                            v = cv;
                        }
                    }
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "backward value is not finite at t = {t}, x = {:?}",
                            &xbuf
                        )));
                    }
                    u_cur[i0 * n1 + i1] = v;
                }
            }
        }
        layer_sup[i] = u_cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        layers[i] = u_cur.clone();
        std::mem::swap(&mut u_next, &mut u_cur);
    }

    for (i, layer) in layers.iter_mut().enumerate() {
        let s = scale(i);
        if s != 1.0 {
            for v in layer.iter_mut() {
                *v *= s;
            }
        }
    }

    Ok(GridSolution {
        dim: d,
        nodes: grid.nodes.clone(),
        lo: grid.lo.clone(),
        hi: grid.hi.clone(),
        dx,
        h,
        layers,
        clipped,
        k_bounds: trunc.map(|(_, _, ks)| ks).unwrap_or_default(),
        layer_sup,
        queries_clamped: Cell::new(0),
    })
}

/// Conditional-expectation backend of the particle engine.
#[derive(Clone, Debug)]
pub enum RegressionBackend {
    /// Piecewise affine least squares on a quantile partition.
    LocalBasis { cells_per_axis: Vec<usize> },
    /// Localized integration-by-parts weights; dimension at most two,
    /// constant diagonal diffusion, value scheme only.
    Malliavin { eta: Option<Vec<f64>> },
}

/// Which interior layers keep a queryable fit of their values.
#[derive(Clone, Debug)]
pub enum KeepLayers {
    None,
    All,
    Steps(Vec<usize>),
}

/// Particle engine knobs beyond the shared [`SolverConfig`].
#[derive(Clone, Debug)]
pub struct ParticleBackendConfig {
    pub regression: RegressionBackend,
    pub keep: KeepLayers,
}

/// Per-step regression diagnostics of the particle sweep.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub groups: usize,
    pub merged_cells: usize,
    pub mean_fallbacks: usize,
    pub value_rss: f64,
    pub clipped: usize,
}

struct KeptLayer {
    step: usize,
    t: f64,
    scale: f64,
    fit: LocalBasisFit,
    values: Vec<f64>,
}

/// Output of the particle engine: the root estimate plus any kept interior
/// layers, queryable for values and fitted gradients.
pub struct ParticleSolution {
    dim: usize,
    h: f64,
    pub root_value: f64,
    pub root_gradient: Vec<f64>,
    /// Clamp events applied during the backward sweep.
    pub clipped: usize,
    /// Per-layer sup bound enforced by truncation, empty when disabled.
    pub k_bounds: Vec<f64>,
    /// Sup of each backward layer over the particles, before output scaling.
    pub layer_sup: Vec<f64>,
    /// Regression groups that fell back to a cell mean, summed over steps.
    pub fallback_groups: usize,
    pub steps: Vec<StepDiagnostics>,
    kept: Vec<KeptLayer>,
}

impl ParticleSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.h
    }

    /// Steps with a stored value fit, ascending.
    pub fn kept_steps(&self) -> Vec<usize> {
        self.kept.iter().map(|l| l.step).collect()
    }

    /// Fitted value and gradient of a kept layer at an arbitrary point.
    pub fn value_and_gradient_at(&self, step: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let layer = self
            .kept
            .iter()
            .find(|l| l.step == step)
            .ok_or_else(|| {
                Error::Config(format!(
                    "step {step} was not kept; stored steps are {:?}",
                    self.kept_steps()
                ))
            })?;
        let v = layer.scale * layer.fit.eval(x);
        let grad = layer
            .fit
            .gradient_at(x)
            .into_iter()
            .map(|gk| layer.scale * gk)
            .collect();
        Ok((v, grad))
    }

    /// Dumps the kept layers as `step,t,<coords>,value` rows, one row per
    /// particle.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "step,t")?;
        for k in 0..self.dim {
            write!(w, ",x{k}")?;
        }
        writeln!(w, ",value")?;
        for layer in &self.kept {
            let pts = layer.fit.geometry().points();
            for (p, v) in layer.values.iter().enumerate() {
                write!(w, "{},{}", layer.step, layer.t)?;
                for k in 0..self.dim {
                    write!(w, ",{}", pts[p * self.dim + k])?;
                }
                writeln!(w, ",{}", layer.scale * v)?;
            }
        }
        Ok(())
    }

    /// Per-step regression diagnostics as CSV.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("step,t,groups,merged_cells,mean_fallbacks,value_rss,clipped\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.step, s.t, s.groups, s.merged_cells, s.mean_fallbacks, s.value_rss, s.clipped
            ));
        }
        out
    }
}

fn assemble_weighted_responses(
    responses: &mut [Vec<f64>],
    y: &[f64],
    cy: &[f64],
    z: &[f64],
    cz: &[f64],
    w1: &[f64],
    w2: &[f64],
    d: usize,
    n_pairs: usize,
    scheme: u8,
) {
    for p in 0..y.len() {
        let yc = y[p] - cy[p];
        let h1p = &w1[p * d..(p + 1) * d];
        for k in 0..d {
            responses[1 + k][p] = yc * h1p[k];
        }
        if scheme == 1 {
            for idx in 0..n_pairs {
                responses[1 + d + idx][p] = yc * w2[p * n_pairs + idx];
            }
        } else {
            for j in 0..d {
                for k in j..d {
                    let zj = z[p * d + j] - cz[p * d + j];
                    let zk = z[p * d + k] - cz[p * d + k];
                    responses[1 + d + pair_index(d, j, k)][p] =
                        0.5 * (zj * h1p[k] + zk * h1p[j]);
                }
            }
        }
    }
}

fn pair_index(d: usize, j: usize, k: usize) -> usize {
    debug_assert!(j <= k);
    j * d - j * (j + 1) / 2 + k
}

/// Solves the terminal value problem over a simulated particle cloud,
/// estimating every conditional expectation by regression on the particles
/// of the earlier slice. Scheme 2 chains fitted gradients and requires the
/// analytic terminal gradient.
pub fn backward_solve_particles(
    spec: &DiffusionSpec,
    cloud: &ParticleCloud,
    op: &NonlinearOperator,
    g: &dyn Fn(&[f64]) -> f64,
    grad_g: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    cfg: &SolverConfig,
    pcfg: &ParticleBackendConfig,
) -> Result<ParticleSolution> {
    let n_steps = cfg.n_steps()?;
    let d = spec.dim;
    let n = cloud.n_particles;
    if d != op.dim || d != cloud.dim {
        return Err(Error::Config(format!(
            "dimensions disagree: diffusion {d}, operator {}, cloud {}",
            op.dim, cloud.dim
        )));
    }
    if cloud.n_steps != n_steps {
        return Err(Error::Config(format!(
            "cloud has {} steps but the configuration asks for {n_steps}",
            cloud.n_steps
        )));
    }
    if (cloud.h - cfg.h).abs() > 1e-12 * cfg.h {
        return Err(Error::Config(format!(
            "cloud step size {} does not match configured {}",
            cloud.h, cfg.h
        )));
    }
    if cfg.scheme == 2 && grad_g.is_none() {
        return Err(Error::Config(
            "scheme 2 needs the analytic terminal gradient".into(),
        ));
    }
    let keep_steps: Vec<usize> = match &pcfg.keep {
        KeepLayers::None => Vec::new(),
        KeepLayers::All => (1..n_steps).collect(),
        KeepLayers::Steps(s) => {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            for &i in &s {
                if i == 0 || i >= n_steps {
                    return Err(Error::Config(format!(
                        "kept steps must be interior (1..{n_steps}); step 0 is the root value \
                         and step {n_steps} is the terminal condition"
                    )));
                }
            }
            s
        }
    };
    let malliavin_eta = match &pcfg.regression {
        RegressionBackend::Malliavin { eta } => {
            if cfg.scheme == 2 {
                return Err(Error::Config(
                    "the Malliavin backend estimates value expectations only; scheme 2 needs \
                     the local basis backend"
                        .into(),
                ));
            }
            if !keep_steps.is_empty() {
                return Err(Error::Config(
                    "the Malliavin backend does not store queryable layers".into(),
                ));
            }
            Some(eta.clone())
        }
        RegressionBackend::LocalBasis { cells_per_axis } => {
            if cells_per_axis.len() != d {
                return Err(Error::Config(format!(
                    "cells_per_axis has {} axes, dimension is {d}",
                    cells_per_axis.len()
                )));
            }
            None
        }
    };

    let op_t = monotonicity_transform(op, cfg.theta, cfg.t_end);
    let h = cfg.h;
    let scale = |i: usize| (-cfg.theta * (cfg.t_end - i as f64 * h)).exp();

    let mut y = vec![0.0; n];
    for (p, yp) in y.iter_mut().enumerate() {
        *yp = g(cloud.state(p, n_steps));
        if !yp.is_finite() {
            return Err(Error::Numerical(format!(
                "terminal condition is not finite at {:?}",
                cloud.state(p, n_steps)
            )));
        }
    }
    let mut z: Vec<f64> = Vec::new();
    if cfg.scheme == 2 {
        let gg = grad_g.unwrap();
        z = vec![0.0; n * d];
        for p in 0..n {
            let gv = gg(cloud.state(p, n_steps));
            if gv.len() != d {
                return Err(Error::Config(format!(
                    "terminal gradient has {} components, dimension is {d}",
                    gv.len()
                )));
            }
            z[p * d..(p + 1) * d].copy_from_slice(&gv);
        }
    }

    let measured_g_sup = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let trunc = match &cfg.truncation {
        Some(tc) => {
            let (c1, c2, gs) = resolve_truncation(tc, &op_t, measured_g_sup)?;
            Some((c1, c2, k_schedule(n_steps, c1, c2, gs, h)))
        }
        None => None,
    };
    let mut layer_sup = vec![0.0; n_steps + 1];
    layer_sup[n_steps] = measured_g_sup;

    let n_pairs = d * (d + 1) / 2;
    let n_resp = 1 + d + n_pairs;
    let mut responses: Vec<Vec<f64>> = vec![vec![0.0; n]; n_resp];
    let mut h1 = vec![0.0; d];
    let mut h2 = vec![0.0; d * d];
    let mut sig = vec![0.0; d * d];
    let mut prev_sig: Vec<f64> = Vec::new();
    let mut inv: Option<SigmaInverse> = None;
    let mut y_new = vec![0.0; n];
    let mut z_new = vec![0.0; if cfg.scheme == 2 { n * d } else { 0 }];
    let mut w1 = vec![0.0; n * d];
    let mut w2 = vec![0.0; if cfg.scheme == 1 { n * n_pairs } else { 0 }];
    let mut cy = vec![0.0; n];
    let mut cz = vec![0.0; if cfg.scheme == 2 { n * d } else { 0 }];
    let mut gidx = vec![0usize; n];
    let mut pvec = vec![0.0; d];
    let mut gam = vec![0.0; d * d];
    let mut clipped_total = 0usize;
    let mut fallback_total = 0usize;
    let mut steps_diag: Vec<StepDiagnostics> = Vec::with_capacity(n_steps);
    let mut kept: Vec<KeptLayer> = Vec::new();
    let mut root_value = 0.0;
    let mut root_gradient = vec![0.0; d];

    for i in (0..n_steps).rev() {
        let t = i as f64 * h;
        let k_i = trunc.as_ref().map(|(_, _, ks)| ks[i]);
        let mut clipped_step = 0usize;

        for p in 0..n {
            let x = cloud.state(p, i);
            (spec.diffusion)(t, x, &mut sig);
            if inv.is_none() || sig != prev_sig {
                inv = Some(SigmaInverse::new_at(&sig, d, t, x)?);
                prev_sig.clear();
                prev_sig.extend_from_slice(&sig);
            }
            let si = inv.as_ref().unwrap();
            let dw = cloud.increment(p, i);
            si.h1(dw, h, &mut h1);
            responses[0][p] = y[p];
            w1[p * d..(p + 1) * d].copy_from_slice(&h1);
            if cfg.scheme == 1 {
                si.h2(dw, h, &mut h2);
                for j in 0..d {
                    for k in j..d {
                        w2[p * n_pairs + pair_index(d, j, k)] = h2[j * d + k];
                    }
                }
            }
        }

        if i == 0 {
            let inv_n = 1.0 / n as f64;
            let ybar = y.iter().sum::<f64>() * inv_n;
            cy.fill(ybar);
            if cfg.scheme == 2 {
                for j in 0..d {
                    let zbar = (0..n).map(|p| z[p * d + j]).sum::<f64>() * inv_n;
                    for p in 0..n {
                        cz[p * d + j] = zbar;
                    }
                }
            }
            assemble_weighted_responses(
                &mut responses,
                &y,
                &cy,
                &z,
                &cz,
                &w1,
                &w2,
                d,
                n_pairs,
                cfg.scheme,
            );
            let means: Vec<f64> = responses
                .iter()
                .map(|r| r.iter().sum::<f64>() * inv_n)
                .collect();
            let x0 = cloud.state(0, 0);
            pvec.copy_from_slice(&means[1..1 + d]);
            for j in 0..d {
                for k in j..d {
                    let v = means[1 + d + pair_index(d, j, k)];
                    gam[j * d + k] = v;
                    gam[k * d + j] = v;
                }
            }
            let r = means[0];
            let f = op_t.apply(t, x0, r, &pvec, &gam);
            let mut v = r + h * op_t.step_sign * f;
            if let Some(k) = k_i {
                let c = v.clamp(-k, k);
                if c != v {
                    clipped_step += 1;
                    v = c;
                }
            }
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "backward value is not finite at t = {t}, x = {x0:?}"
                )));
            }
            layer_sup[0] = v.abs();
            root_value = scale(0) * v;
            for k in 0..d {
                root_gradient[k] = scale(0) * pvec[k];
            }
            clipped_total += clipped_step;
            steps_diag.push(StepDiagnostics {
                step: 0,
                t,
                groups: 1,
                merged_cells: 0,
                mean_fallbacks: 0,
                value_rss: 0.0,
                clipped: clipped_step,
            });
            break;
        }

        let points = cloud.states_at(i);
        match &malliavin_eta {
            None => {
                let cells = match &pcfg.regression {
                    RegressionBackend::LocalBasis { cells_per_axis } => cells_per_axis.clone(),
                    RegressionBackend::Malliavin { .. } => unreachable!(),
                };
                let geom = LocalBasisGeometry::build(
                    &points,
                    d,
                    &LocalBasisConfig {
                        cells_per_axis: cells,
                    },
                )?;
                let fit0 = geom.fit(&responses[0])?;
                let mut zfits: Vec<LocalBasisFit> = Vec::with_capacity(d);
                if cfg.scheme == 2 {
                    let mut zcol = vec![0.0; n];
                    for j in 0..d {
                        for (p, zc) in zcol.iter_mut().enumerate() {
                            *zc = z[p * d + j];
                        }
                        zfits.push(geom.fit(&zcol)?);
                    }
                }
                for p in 0..n {
                    let x = cloud.state(p, i);
                    let gi = geom.locate(x);
                    gidx[p] = gi;
                    cy[p] = fit0.eval_in_group(gi, x);
                    if cfg.scheme == 2 {
                        for (j, zf) in zfits.iter().enumerate() {
                            cz[p * d + j] = zf.eval_in_group(gi, x);
                        }
                    }
                }
                assemble_weighted_responses(
                    &mut responses,
                    &y,
                    &cy,
                    &z,
                    &cz,
                    &w1,
                    &w2,
                    d,
                    n_pairs,
                    cfg.scheme,
                );
                let wfits: Vec<LocalBasisFit> = responses[1..]
                    .iter()
                    .map(|r| geom.fit(r))
                    .collect::<Result<_>>()?;
                let step_fallbacks: usize = fit0.fallback_groups
                    + wfits.iter().map(|f| f.fallback_groups).sum::<usize>();
                let mut dump = match std::env::var("FNPDE_STEP_DUMP") {
                    Ok(dir) if i + 4 > n_steps => std::fs::File::create(format!(
                        "{dir}/step_{i}.csv"
                    ))
                    .ok()
                    .map(std::io::BufWriter::new),
                    _ => None,
                };
                for p in 0..n {
                    let x = cloud.state(p, i);
                    let gi = gidx[p];
                    let r = cy[p];
                    for k in 0..d {
                        pvec[k] = wfits[k].eval_in_group(gi, x);
                    }
                    for j in 0..d {
                        for k in j..d {
                            let v = wfits[d + pair_index(d, j, k)].eval_in_group(gi, x);
                            gam[j * d + k] = v;
                            gam[k * d + j] = v;
                        }
                    }
                    let f = op_t.apply(t, x, r, &pvec, &gam);
                    let mut v = r + h * op_t.step_sign * f;
                    if let Some(k) = k_i {
                        let c = v.clamp(-k, k);
                        if c != v {
                            clipped_step += 1;
                            v = c;
                        }
                    }
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "backward value is not finite at t = {t}, x = {x:?}"
                        )));
                    }
                    y_new[p] = v;
                    if cfg.scheme == 2 {
                        z_new[p * d..(p + 1) * d].copy_from_slice(&pvec);
                    }
                    if let Some(w) = dump.as_mut() {
                        use std::io::Write;
                        let _ = writeln!(
                            w,
                            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                            x[0],
                            x.get(1).copied().unwrap_or(0.0),
                            gi,
                            r,
                            pvec[0],
                            gam[0],
                            if d > 1 { gam[1] } else { 0.0 },
                            f,
                            v,
                            if cfg.scheme == 2 { z[p * d] } else { 0.0 },
                            if cfg.scheme == 2 { cz[p * d] } else { 0.0 },
                            w1[p * d],
                            responses[1 + d][p]
                        );
                    }
                }
                fallback_total += step_fallbacks;
                steps_diag.push(StepDiagnostics {
                    step: i,
                    t,
                    groups: geom.group_count(),
                    merged_cells: geom.merge_count(),
                    mean_fallbacks: step_fallbacks,
                    value_rss: fit0.rss,
                    clipped: clipped_step,
                });
                if keep_steps.binary_search(&i).is_ok() {
                    let fit = geom.fit(&y_new)?;
                    kept.push(KeptLayer {
                        step: i,
                        t,
                        scale: scale(i),
                        fit,
                        values: y_new.clone(),
                    });
                }
            }
            Some(eta) => {
                let sigma0 = spec.diffusion_at(cloud.time(i - 1), cloud.state(0, i - 1));
                for probe in 1..n.min(8) {
                    let s = spec.diffusion_at(cloud.time(i - 1), cloud.state(probe, i - 1));
                    if s != sigma0 {
                        return Err(Error::Config(
                            "the Malliavin backend needs constant diffusion coefficients".into(),
                        ));
                    }
                }
                for j in 0..d {
                    for k in 0..d {
                        if j != k && sigma0[j * d + k] != 0.0 {
                            return Err(Error::Config(
                                "the Malliavin backend needs a diagonal diffusion matrix".into(),
                            ));
                        }
                    }
                }
                let sdiag: Vec<f64> = (0..d).map(|k| sigma0[k * d + k]).collect();
                cy.fill(0.0);
                cz.fill(0.0);
                assemble_weighted_responses(
                    &mut responses,
                    &y,
                    &cy,
                    &z,
                    &cz,
                    &w1,
                    &w2,
                    d,
                    n_pairs,
                    cfg.scheme,
                );
                let est = MalliavinEstimator::new(
                    d,
                    points.clone(),
                    &cloud.increments_at(i - 1),
                    &sdiag,
                    h,
                    eta.clone(),
                )?;
                let resp_refs: Vec<&[f64]> = responses.iter().map(|r| r.as_slice()).collect();
                for p in 0..n {
                    let x = cloud.state(p, i);
                    let es = est.estimate_many(&resp_refs, x);
                    let r = es[0];
                    pvec.copy_from_slice(&es[1..1 + d]);
                    for j in 0..d {
                        for k in j..d {
                            let v = es[1 + d + pair_index(d, j, k)];
                            gam[j * d + k] = v;
                            gam[k * d + j] = v;
                        }
                    }
                    let f = op_t.apply(t, x, r, &pvec, &gam);
                    let mut v = r + h * op_t.step_sign * f;
                    if let Some(k) = k_i {
                        let c = v.clamp(-k, k);
                        if c != v {
                            clipped_step += 1;
                            v = c;
                        }
                    }
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "backward value is not finite at t = {t}, x = {x:?}"
                        )));
                    }
                    y_new[p] = v;
                }
                steps_diag.push(StepDiagnostics {
                    step: i,
                    t,
                    groups: 0,
                    merged_cells: 0,
                    mean_fallbacks: est.fallback_count(),
                    value_rss: 0.0,
                    clipped: clipped_step,
                });
            }
        }
        layer_sup[i] = y_new.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        std::mem::swap(&mut y, &mut y_new);
        if cfg.scheme == 2 {
            std::mem::swap(&mut z, &mut z_new);
        }
        clipped_total += clipped_step;
    }

    steps_diag.reverse();
    kept.sort_by_key(|l| l.step);
    Ok(ParticleSolution {
        dim: d,
        h,
        root_value,
        root_gradient,
        clipped: clipped_total,
        k_bounds: trunc.map(|(_, _, ks)| ks).unwrap_or_default(),
        layer_sup,
        fallback_groups: fallback_total,
        steps: steps_diag,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::{linear_f, linear_reaction_f, OperatorBounds};
    use crate::sde::simulate_cloud;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::sync::Arc;

    fn cfg(h: f64, t_end: f64) -> SolverConfig {
        SolverConfig {
            h,
            t_end,
            scheme: 1,
            theta: 0.0,
            truncation: None,
            seed: 7,
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        assert_eq!(cfg(0.1, 1.0).n_steps().unwrap(), 10);
        assert!(cfg(0.3, 1.0).n_steps().is_err());
        assert!(cfg(-0.1, 1.0).n_steps().is_err());
        let mut c = cfg(0.1, 1.0);
        c.scheme = 3;
        assert!(c.n_steps().is_err());
        let mut c = cfg(0.1, 1.0);
        c.truncation = Some(TruncationConfig {
            c1: Some(-1.0),
            ..Default::default()
        });
        assert!(c.n_steps().is_err());
    }

    #[test]
    fn one_step_reproduces_quadratic_example() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let rule = QuadratureRule::tensor(8, 1).unwrap();
        let psi = |_: f64, y: &[f64]| y[0] * y[0];
        for &c in &[0.0, 0.25, 0.8] {
            let op = linear_f(1, c);
            for &x in &[-0.7, 0.0, 1.2] {
                for &h in &[0.1, 0.02] {
                    let got = apply_one_step(&spec, &op, &psi, 0.0, &[x], h, &rule).unwrap();
                    assert_abs_diff_eq!(got, x * x + h + 2.0 * c * h, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_step_with_zero_operator_is_the_smoothed_value() {
        let spec = DiffusionSpec::constant(1, vec![0.3], vec![1.0]).unwrap();
        let rule = QuadratureRule::tensor(32, 1).unwrap();
        let op = linear_f(1, 0.0);
        let psi = |_: f64, y: &[f64]| y[0].cos();
        let (x, h) = (0.4, 0.25);
        let got = apply_one_step(&spec, &op, &psi, 0.0, &[x], h, &rule).unwrap();
        let expect = (x + 0.3 * h).cos() * (-0.5 * h).exp();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn one_step_gradient_chain_agrees_on_the_quadratic() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let rule = QuadratureRule::tensor(8, 1).unwrap();
        let op = linear_f(1, 0.25);
        let psi = |_: f64, y: &[f64]| y[0] * y[0];
        let grad = |_: f64, y: &[f64]| vec![2.0 * y[0]];
        let got =
            apply_one_step_with_gradient(&spec, &op, &psi, &grad, 0.0, &[0.5], 0.1, &rule)
                .unwrap();
        assert_abs_diff_eq!(got, 0.25 + 0.1 + 2.0 * 0.25 * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn truncation_bound_example_and_growth_envelope() {
        assert_abs_diff_eq!(truncation_bound(1.0, 2.0, 3.0, 0.1), 1.5, epsilon = 1e-15);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c1 = rng.random::<f64>() * 3.0;
            let c2 = rng.random::<f64>() * 2.0;
            let g = rng.random::<f64>() * 4.0;
            let n = 1 + (rng.random::<f64>() * 40.0) as usize;
            let t_end = 0.2 + rng.random::<f64>();
            let h = t_end / n as f64;
            let ks = k_schedule(n, c1, c2, g, h);
            let envelope = (c1 * t_end).exp() * (g + c2 * t_end);
            assert!(ks[0] <= envelope + 1e-12, "{} > {}", ks[0], envelope);
        }
    }

    #[test]
    fn rate_fit_recovers_known_orders() {
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let e1: Vec<f64> = hs.iter().map(|&h| 2.0 * h).collect();
        let r = estimate_rate(&hs, &e1).unwrap();
        assert_abs_diff_eq!(r.slope, 1.0, epsilon = 1e-12);
        assert_eq!(r.excluded, 0);
        let e2: Vec<f64> = hs.iter().map(|&h| h.sqrt()).collect();
        assert_abs_diff_eq!(estimate_rate(&hs, &e2).unwrap().slope, 0.5, epsilon = 1e-12);
        let e3: Vec<f64> = hs.iter().map(|&h| 3.0 * h * h).collect();
        assert_abs_diff_eq!(estimate_rate(&hs, &e3).unwrap().slope, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_fit_excludes_nonpositive_errors() {
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let errs = [0.1, 0.05, 0.0, 0.0125];
        let r = estimate_rate(&hs, &errs).unwrap();
        assert_eq!(r.excluded, 1);
        assert_abs_diff_eq!(r.slope, 1.0, epsilon = 1e-12);
        assert!(estimate_rate(&hs[..2], &errs[..2]).is_err());
        assert!(estimate_rate(&hs, &[0.0, -1.0, 0.0, -2.0]).is_err());
        assert!(estimate_rate(&hs, &errs[..3]).is_err());
    }

    fn random_trig(rng: &mut ChaCha12Rng) -> impl Fn(f64) -> f64 {
        let terms: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random::<f64>() * 2.0 - 1.0,
                    0.3 + 1.7 * rng.random::<f64>(),
                    rng.random::<f64>() * std::f64::consts::TAU,
                )
            })
            .collect();
        move |x: f64| terms.iter().map(|(a, w, p)| a * (w * x + p).cos()).sum()
    }

    #[test]
    fn one_step_contracts_the_sup_distance_over_random_pairs() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.3);
        let rule = QuadratureRule::tensor(16, 1).unwrap();
        let h = 0.1f64;
        let sqrt_h = h.sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..100 {
            let phi = random_trig(&mut rng);
            let psi = random_trig(&mut rng);
            let x = rng.random::<f64>() * 2.0 - 1.0;
            let t_phi =
                apply_one_step(&spec, &op, &|_, y: &[f64]| phi(y[0]), 0.0, &[x], h, &rule)
                    .unwrap();
            let t_psi =
                apply_one_step(&spec, &op, &|_, y: &[f64]| psi(y[0]), 0.0, &[x], h, &rule)
                    .unwrap();
            let mut sup = 0.0f64;
            for i in 0..rule.len() {
                let yc = x + sqrt_h * rule.node(i)[0];
                sup = sup.max((phi(yc) - psi(yc)).abs());
            }
            assert!(
                (t_phi - t_psi).abs() <= sup + 1e-8,
                "contraction violated: {} > {}",
                (t_phi - t_psi).abs(),
                sup
            );
        }
    }

    #[test]
    fn exponential_shift_restores_monotonicity() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let rule = QuadratureRule::tensor(16, 1).unwrap();
        let h = 0.1;
        let base = linear_reaction_f(1, 0.3, 12.0);

        let zero = |_: f64, _: &[f64]| 0.0;
        let bump = |_: f64, y: &[f64]| (-(y[0] / 0.3) * (y[0] / 0.3)).exp();
        let t_zero = apply_one_step(&spec, &base, &zero, 0.0, &[0.0], h, &rule).unwrap();
        let t_bump = apply_one_step(&spec, &base, &bump, 0.0, &[0.0], h, &rule).unwrap();
        assert!(
            t_bump < t_zero - 1e-4,
            "expected a monotonicity violation, got {t_bump} >= {t_zero}"
        );

        let shifted = monotonicity_transform(&base, 12.0, h);
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        for _ in 0..100 {
            let phi = random_trig(&mut rng);
            let amp = rng.random::<f64>();
            let center = rng.random::<f64>() * 2.0 - 1.0;
            let width = 0.2 + 0.8 * rng.random::<f64>();
            let lower = |_: f64, y: &[f64]| phi(y[0]);
            let upper = |_: f64, y: &[f64]| {
                phi(y[0]) + amp * (-((y[0] - center) / width).powi(2)).exp()
            };
            let x = rng.random::<f64>() * 2.0 - 1.0;
            let t_lo = apply_one_step(&spec, &shifted, &lower, 0.0, &[x], h, &rule).unwrap();
            let t_hi = apply_one_step(&spec, &shifted, &upper, 0.0, &[x], h, &rule).unwrap();
            assert!(
                t_hi >= t_lo - 1e-12,
                "shifted operator lost monotonicity: {t_hi} < {t_lo}"
            );
        }
    }

    #[test]
    fn spline_coefficients_interpolate_the_nodes() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..17).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let c = spline_coeffs(&v);
        for (j, &vj) in v.iter().enumerate() {
            let s = spline_eval(&c, -1.0, 0.25, v.len(), -1.0 + 0.25 * j as f64);
            assert_abs_diff_eq!(s, vj, epsilon = 1e-12);
        }
        let affine: Vec<f64> = (0..9).map(|j| 0.7 * j as f64 - 1.3).collect();
        let c = spline_coeffs(&affine);
        for &x in &[0.0, 0.13, 3.9, 7.61, 8.0] {
            assert_abs_diff_eq!(
                spline_eval(&c, 0.0, 1.0, 9, x),
                0.7 * x - 1.3,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn axis_moments_resolve_the_gaussian_partition_of_unity() {
        for &(center, s) in &[(0.0, 0.3), (1.7, 0.05), (-3.9, 0.8), (4.2, 0.4)] {
            let am = axis_moments(center, s, -4.0, 0.1, 81);
            let mut sums = [0.0f64; 3];
            for w in 0..3 {
                sums[w] = am.a.iter().map(|a| a[w]).sum::<f64>()
                    + am.tail_lo[w]
                    + am.tail_hi[w];
            }
            assert_abs_diff_eq!(sums[0], 1.0, epsilon = 1e-11);
            assert_abs_diff_eq!(sums[1], 0.0, epsilon = 1e-11);
            assert_abs_diff_eq!(sums[2], 1.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn grid_keeps_constant_layers_fixed() {
        let spec = DiffusionSpec::constant(2, vec![0.2, -0.1], vec![1.0, 0.0, 0.0, 0.7]).unwrap();
        let op = linear_f(2, 0.1);
        let sol = backward_solve_grid(
            &spec,
            &op,
            &|_| 1.0,
            &cfg(0.1, 0.5),
            &GridConfig {
                nodes: vec![12, 9],
                lo: vec![-2.0, -1.5],
                hi: vec![2.0, 1.5],
            },
        )
        .unwrap();
        for step in 0..=5 {
            for &v in sol.node_values(step) {
                assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn grid_matches_the_exact_smoothing_of_cosine() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let sol = backward_solve_grid(
            &spec,
            &op,
            &|x| x[0].cos(),
            &cfg(0.05, 0.5),
            &GridConfig {
                nodes: vec![161],
                lo: vec![-8.0],
                hi: vec![8.0],
            },
        )
        .unwrap();
        let decay = (-0.25f64).exp();
        for j in 0..161 {
            let x = sol.node_coord(0, j);
            if x.abs() <= 2.0 {
                let err = (sol.node_values(0)[j] - x.cos() * decay).abs();
                assert!(err <= 1e-3, "error {err} at x = {x}");
            }
        }
        let off = sol.value_at(0, &[0.317]).unwrap();
        assert_abs_diff_eq!(off, 0.317f64.cos() * decay, epsilon = 1e-3);
    }

    #[test]
    fn grid_one_step_reproduces_the_quadratic_example() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let c = 0.25;
        let op = linear_f(1, c);
        let h = 0.05;
        let sol = backward_solve_grid(
            &spec,
            &op,
            &|x| x[0] * x[0],
            &cfg(h, h),
            &GridConfig {
                nodes: vec![161],
                lo: vec![-8.0],
                hi: vec![8.0],
            },
        )
        .unwrap();
        for j in 0..161 {
            let x = sol.node_coord(0, j);
            if x.abs() <= 2.0 {
                let expect = x * x + h + 2.0 * c * h;
                assert_abs_diff_eq!(sol.node_values(0)[j], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn grid_shift_agreement_shrinks_linearly_in_h() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.3);
        let grid = GridConfig {
            nodes: vec![121],
            lo: vec![-6.0],
            hi: vec![6.0],
        };
        let g = |x: &[f64]| x[0].cos();
        let mut gaps = Vec::new();
        for &h in &[0.1, 0.05] {
            let plain = backward_solve_grid(&spec, &op, &g, &cfg(h, 0.4), &grid).unwrap();
            let mut shifted_cfg = cfg(h, 0.4);
            shifted_cfg.theta = 1.2;
            let shifted = backward_solve_grid(&spec, &op, &g, &shifted_cfg, &grid).unwrap();
            let j = 60;
            gaps.push((plain.node_values(0)[j] - shifted.node_values(0)[j]).abs());
        }
        assert!(gaps[0] < 0.06, "gap {} too large", gaps[0]);
        let ratio = gaps[0] / gaps[1];
        assert!(
            (1.4..=2.8).contains(&ratio),
            "gap ratio {ratio} is not consistent with first order"
        );
    }

    #[test]
    fn grid_truncation_clamps_and_counts() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let mut c = cfg(0.1, 0.3);
        c.truncation = Some(TruncationConfig {
            c1: None,
            c2: None,
            g_sup: Some(0.5),
        });
        let sol = backward_solve_grid(
            &spec,
            &op,
            &|x| 2.0 * x[0].cos(),
            &c,
            &GridConfig {
                nodes: vec![81],
                lo: vec![-4.0],
                hi: vec![4.0],
            },
        )
        .unwrap();
        assert!(sol.clipped > 0);
        assert_eq!(sol.k_bounds, vec![0.5; 4]);
        for step in 0..3 {
            assert!(sol.layer_sup[step] <= 0.5 + 1e-12);
        }
        assert!(sol.layer_sup[3] > 0.5);
    }

    #[test]
    fn grid_rejects_unsupported_setups() {
        let spec1 = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op1 = linear_f(1, 0.1);
        let grid1 = GridConfig {
            nodes: vec![11],
            lo: vec![-1.0],
            hi: vec![1.0],
        };
        let mut c = cfg(0.1, 0.5);
        c.scheme = 2;
        assert!(backward_solve_grid(&spec1, &op1, &|_| 0.0, &c, &grid1).is_err());

        let spec3 = DiffusionSpec::scaled_brownian(3, 1.0).unwrap();
        let op3 = linear_f(3, 0.1);
        assert!(backward_solve_grid(
            &spec3,
            &op3,
            &|_| 0.0,
            &cfg(0.1, 0.5),
            &GridConfig {
                nodes: vec![11, 11, 11],
                lo: vec![-1.0; 3],
                hi: vec![1.0; 3],
            }
        )
        .is_err());

        assert!(backward_solve_grid(
            &spec1,
            &op1,
            &|_| 0.0,
            &cfg(0.1, 0.5),
            &GridConfig {
                nodes: vec![3],
                lo: vec![-1.0],
                hi: vec![1.0],
            }
        )
        .is_err());

        let varying = DiffusionSpec::new(
            1,
            Arc::new(|_t: f64, x: &[f64], out: &mut [f64]| out[0] = x[0]),
            Arc::new(|_t: f64, _x: &[f64], out: &mut [f64]| out[0] = 1.0),
        )
        .unwrap();
        assert!(backward_solve_grid(&varying, &op1, &|_| 0.0, &cfg(0.1, 0.5), &grid1).is_err());

        let coupled =
            DiffusionSpec::constant(2, vec![0.0, 0.0], vec![1.0, 0.4, 0.0, 1.0]).unwrap();
        let op2 = linear_f(2, 0.1);
        assert!(backward_solve_grid(
            &coupled,
            &op2,
            &|_| 0.0,
            &cfg(0.1, 0.5),
            &GridConfig {
                nodes: vec![9, 9],
                lo: vec![-1.0, -1.0],
                hi: vec![1.0, 1.0],
            }
        )
        .is_err());
    }

    #[test]
    fn default_bounds_cover_five_sigmas() {
        let (lo, hi) = default_grid_bounds(&[1.0, -2.0], &[0.5, 2.0], 4.0);
        assert_eq!(lo, vec![1.0 - 5.0, -2.0 - 20.0]);
        assert_eq!(hi, vec![1.0 + 5.0, -2.0 + 20.0]);
    }

    fn particle_cfg(cells: Vec<usize>) -> ParticleBackendConfig {
        ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: cells,
            },
            keep: KeepLayers::None,
        }
    }

    #[test]
    fn particles_with_zero_operator_preserve_the_sample_mean() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let c = cfg(0.05, 0.25);
        let cloud = simulate_cloud(&spec, &[0.3], 5, 0.05, 3000, 99).unwrap();
        let g = |x: &[f64]| x[0].abs();
        let sol =
            backward_solve_particles(&spec, &cloud, &op, &g, None, &c, &particle_cfg(vec![6]))
                .unwrap();
        let mean: f64 =
            (0..3000).map(|p| g(cloud.state(p, 5))).sum::<f64>() / 3000.0;
        assert_abs_diff_eq!(sol.root_value, mean, epsilon = 1e-9);
    }

    #[test]
    fn particles_track_the_exact_linear_solution() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.25);
        let c = cfg(0.1, 0.5);
        let cloud = simulate_cloud(&spec, &[0.0], 5, 0.1, 20_000, 4242).unwrap();
        let g = |x: &[f64]| x[0].cos();
        let sol =
            backward_solve_particles(&spec, &cloud, &op, &g, None, &c, &particle_cfg(vec![8]))
                .unwrap();
        let exact = (-(1.0 + 2.0 * 0.25) * 0.5 / 2.0f64).exp();
        assert!(
            (sol.root_value - exact).abs() < 0.03,
            "root {} vs exact {exact}",
            sol.root_value
        );
    }

    #[test]
    fn particle_schemes_agree_on_the_linear_testbed() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.25);
        let c1 = cfg(0.1, 0.5);
        let mut c2 = c1.clone();
        c2.scheme = 2;
        let cloud = simulate_cloud(&spec, &[0.0], 5, 0.1, 20_000, 777).unwrap();
        let g = |x: &[f64]| x[0].cos();
        let grad = |x: &[f64]| vec![-x[0].sin()];
        let r1 =
            backward_solve_particles(&spec, &cloud, &op, &g, None, &c1, &particle_cfg(vec![8]))
                .unwrap()
                .root_value;
        let r2 = backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            Some(&grad),
            &c2,
            &particle_cfg(vec![8]),
        )
        .unwrap()
        .root_value;
        assert!((r1 - r2).abs() < 0.03, "scheme roots {r1} vs {r2}");
    }

    #[test]
    fn particle_sweep_is_deterministic_for_a_fixed_seed() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.2);
        let c = cfg(0.1, 0.3);
        let g = |x: &[f64]| x[0] * x[0];
        let run = || {
            let cloud = simulate_cloud(&spec, &[0.1], 3, 0.1, 2000, 1234).unwrap();
            backward_solve_particles(&spec, &cloud, &op, &g, None, &c, &particle_cfg(vec![5]))
                .unwrap()
                .root_value
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn particles_abort_on_a_nan_from_the_operator() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = NonlinearOperator {
            dim: 1,
            label: "poison".into(),
            eval: Arc::new(|_, _, r, _, _| if r > 5.0 { f64::NAN } else { 0.0 }),
            step_sign: 1.0,
            cap: None,
            bounds: OperatorBounds {
                zero_level: 0.0,
                fr_sup: 0.0,
            },
            partials: None,
        };
        let c = cfg(0.1, 0.3);
        let cloud = simulate_cloud(&spec, &[0.0], 3, 0.1, 500, 5).unwrap();
        let g = |x: &[f64]| 20.0 + x[0];
        let err = match backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            None,
            &c,
            &particle_cfg(vec![4]),
        ) {
            Err(e) => e,
            Ok(_) => panic!("expected the sweep to abort"),
        };
        assert!(err.to_string().contains("not finite"), "{err}");
    }

    #[test]
    fn particle_truncation_clamps_and_records_bounds() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let mut c = cfg(0.1, 0.3);
        c.truncation = Some(TruncationConfig {
            c1: None,
            c2: None,
            g_sup: Some(0.1),
        });
        let cloud = simulate_cloud(&spec, &[0.0], 3, 0.1, 2000, 8).unwrap();
        let g = |x: &[f64]| x[0] * x[0];
        let sol =
            backward_solve_particles(&spec, &cloud, &op, &g, None, &c, &particle_cfg(vec![5]))
                .unwrap();
        assert!(sol.clipped > 0);
        assert_eq!(sol.k_bounds, vec![0.1; 4]);
        for i in 0..3 {
            assert!(sol.layer_sup[i] <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn kept_layers_track_an_affine_value_surface() {
        let spec = DiffusionSpec::constant(1, vec![0.3], vec![1.0]).unwrap();
        let op = linear_f(1, 0.0);
        let c = cfg(0.05, 0.25);
        let n = 20_000;
        let cloud = simulate_cloud(&spec, &[0.0], 5, 0.05, n, 31).unwrap();
        let g = |x: &[f64]| 2.0 * x[0] + 1.0;
        let pc = ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: vec![5],
            },
            keep: KeepLayers::All,
        };
        let sol = backward_solve_particles(&spec, &cloud, &op, &g, None, &c, &pc).unwrap();
        assert_eq!(sol.kept_steps(), vec![1, 2, 3, 4]);
        for &step in &[1usize, 3] {
            let tau = 0.25 - sol.time(step);
            let q = [0.1];
            let (v, grad) = sol.value_and_gradient_at(step, &q).unwrap();
            assert_abs_diff_eq!(v, 2.0 * (0.1 + 0.3 * tau) + 1.0, epsilon = 0.03);
            assert_abs_diff_eq!(grad[0], 2.0, epsilon = 0.3);
        }
        let mut csv = Vec::new();
        sol.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,t,x0,value\n"));
        assert_eq!(text.lines().count(), 1 + 4 * n);
    }

    #[test]
    fn malliavin_backend_tracks_the_linear_solution() {
        let spec = DiffusionSpec::constant(1, vec![0.1], vec![1.0]).unwrap();
        let op = linear_f(1, 0.15);
        let c = cfg(0.05, 0.2);
        let cloud = simulate_cloud(&spec, &[0.0], 4, 0.05, 3000, 61).unwrap();
        let g = |x: &[f64]| x[0].cos();
        let pc = ParticleBackendConfig {
            regression: RegressionBackend::Malliavin { eta: None },
            keep: KeepLayers::None,
        };
        let sol = backward_solve_particles(&spec, &cloud, &op, &g, None, &c, &pc).unwrap();
        let exact = (0.1f64 * 0.2).cos() * (-(1.0 + 2.0 * 0.15) * 0.2 / 2.0f64).exp();
        assert!(
            (sol.root_value - exact).abs() < 0.08,
            "root {} vs exact {exact}",
            sol.root_value
        );
    }

    #[test]
    fn malliavin_backend_rejects_unsupported_requests() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let cloud = simulate_cloud(&spec, &[0.0], 3, 0.1, 200, 3).unwrap();
        let g = |x: &[f64]| x[0];
        let grad = |_: &[f64]| vec![1.0];
        let mut c2 = cfg(0.1, 0.3);
        c2.scheme = 2;
        let pc = ParticleBackendConfig {
            regression: RegressionBackend::Malliavin { eta: None },
            keep: KeepLayers::None,
        };
        assert!(
            backward_solve_particles(&spec, &cloud, &op, &g, Some(&grad), &c2, &pc).is_err()
        );
        let pc_keep = ParticleBackendConfig {
            regression: RegressionBackend::Malliavin { eta: None },
            keep: KeepLayers::All,
        };
        assert!(
            backward_solve_particles(&spec, &cloud, &op, &g, None, &cfg(0.1, 0.3), &pc_keep)
                .is_err()
        );
    }

    #[test]
    fn particle_solver_rejects_mismatched_inputs() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let cloud = simulate_cloud(&spec, &[0.0], 3, 0.1, 200, 3).unwrap();
        let g = |x: &[f64]| x[0];
        assert!(backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            None,
            &cfg(0.1, 0.5),
            &particle_cfg(vec![4])
        )
        .is_err());
        assert!(backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            None,
            &cfg(0.15, 0.45),
            &particle_cfg(vec![4])
        )
        .is_err());
        let mut c2 = cfg(0.1, 0.3);
        c2.scheme = 2;
        assert!(backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            None,
            &c2,
            &particle_cfg(vec![4])
        )
        .is_err());
        assert!(backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            None,
            &cfg(0.1, 0.3),
            &particle_cfg(vec![4, 4])
        )
        .is_err());
        let pc_keep = ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: vec![4],
            },
            keep: KeepLayers::Steps(vec![0]),
        };
        assert!(backward_solve_particles(
            &spec,
            &cloud,
            &op,
            &g,
            None,
            &cfg(0.1, 0.3),
            &pc_keep
        )
        .is_err());
    }

    #[test]
    fn grid_csv_has_one_row_per_node_and_step() {
        let spec = DiffusionSpec::scaled_brownian(1, 1.0).unwrap();
        let op = linear_f(1, 0.0);
        let sol = backward_solve_grid(
            &spec,
            &op,
            &|x| x[0],
            &cfg(0.1, 0.2),
            &GridConfig {
                nodes: vec![5],
                lo: vec![-1.0],
                hi: vec![1.0],
            },
        )
        .unwrap();
        let mut csv = Vec::new();
        sol.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 5);
        assert!(text.starts_with("step,t,x0,value\n"));
    }
}
