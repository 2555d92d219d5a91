//! Named experiment presets and their configuration schema.
//!
//! A preset bundles a forward diffusion, a nonlinear operator, a terminal
//! condition, and solver settings under a single `preset` name. Resolution
//! reads the user's [`ConfigMap`], validates every value, and stamps each
//! applied default back into the map, so serializing the map afterwards
//! yields a complete record of the run: feeding that record back through
//! [`resolve_preset`] reproduces the identical experiment.
//!
//! Keys that default to a quantity derived at solve time (the truncation
//! constants, which come from the operator bounds and the realized terminal
//! sup) are left absent unless the user pins them explicitly.

use std::sync::Arc;

use crate::config::ConfigMap;
use crate::frontprop::{two_disks_gradient, two_disks_initial};
use crate::nonlinearity::{
    heston_f, hjb5d_f, linear_f, mcf_f, Hjb5dMarket, NonlinearOperator,
};
use crate::oracles::PortfolioValueInputs;
use crate::sde::{child_seed, CloudStart, DiffusionFn, DiffusionSpec, DriftFn, Stepper};
use crate::solver::{
    GridConfig, KeepLayers, ParticleBackendConfig, RegressionBackend, SolverConfig,
    TruncationConfig,
};
use crate::{Error, Result};

fn stamp(cfg: &mut ConfigMap, key: &str, value: impl std::fmt::Display) -> Result<()> {
    cfg.set(key, value)?;
    let _ = cfg.get_str(key);
    Ok(())
}

fn eff_f64(cfg: &mut ConfigMap, key: &str, default: f64) -> Result<f64> {
    match cfg.get_f64(key)? {
        Some(v) => Ok(v),
        None => {
            stamp(cfg, key, default)?;
            Ok(default)
        }
    }
}

fn eff_u64(cfg: &mut ConfigMap, key: &str, default: u64) -> Result<u64> {
    match cfg.get_u64(key)? {
        Some(v) => Ok(v),
        None => {
            stamp(cfg, key, default)?;
            Ok(default)
        }
    }
}

fn eff_usize(cfg: &mut ConfigMap, key: &str, default: usize) -> Result<usize> {
    match cfg.get_usize(key)? {
        Some(v) => Ok(v),
        None => {
            stamp(cfg, key, default)?;
            Ok(default)
        }
    }
}

fn eff_bool(cfg: &mut ConfigMap, key: &str, default: bool) -> Result<bool> {
    match cfg.get_bool(key)? {
        Some(v) => Ok(v),
        None => {
            stamp(cfg, key, default)?;
            Ok(default)
        }
    }
}

fn join_list<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn eff_f64_list(cfg: &mut ConfigMap, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    match cfg.get_f64_list(key)? {
        Some(v) => Ok(v),
        None => {
            stamp(cfg, key, join_list(default))?;
            Ok(default.to_vec())
        }
    }
}

fn eff_usize_list(cfg: &mut ConfigMap, key: &str, default: &[usize]) -> Result<Vec<usize>> {
    match cfg.get_usize_list(key)? {
        Some(v) => Ok(v),
        None => {
            stamp(cfg, key, join_list(default))?;
            Ok(default.to_vec())
        }
    }
}

fn require_positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("key `{key}` must be positive, got {v}")))
    }
}

fn resolve_truncation(cfg: &mut ConfigMap, default_on: bool) -> Result<Option<TruncationConfig>> {
    if !eff_bool(cfg, "truncation.enabled", default_on)? {
        return Ok(None);
    }
    Ok(Some(TruncationConfig {
        c1: cfg.get_f64("truncation.c1")?,
        c2: cfg.get_f64("truncation.c2")?,
        g_sup: cfg.get_f64("truncation.g_sup")?,
    }))
}

fn resolve_cells(cfg: &mut ConfigMap, key: &str, default: &[usize], dim: usize) -> Result<Vec<usize>> {
    let cells = eff_usize_list(cfg, key, default)?;
    if cells.len() != dim {
        return Err(Error::Config(format!(
            "key `{key}` must list {dim} cell counts, got {}",
            cells.len()
        )));
    }
    if cells.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!("key `{key}` must not contain zeros")));
    }
    Ok(cells)
}

/// Converts flow times (time already spent moving the front) into backward
/// layer indices, requiring each to land on an interior time layer.
fn flow_steps_of(flow_times: &[f64], t_end: f64, h: f64, n_steps: usize) -> Result<Vec<usize>> {
    let mut steps = Vec::with_capacity(flow_times.len());
    for &s in flow_times {
        if !(s > 0.0 && s < t_end) {
            return Err(Error::Config(format!(
                "flow time {s} must lie strictly between 0 and the horizon {t_end}"
            )));
        }
        let ratio = (t_end - s) / h;
        let i = ratio.round();
        if (ratio - i).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "flow time {s} does not land on the time grid: ({t_end} - {s}) / {h} = {ratio}"
            )));
        }
        let i = i as usize;
        if i == 0 || i >= n_steps {
            return Err(Error::Config(format!(
                "flow time {s} maps to layer {i}, but only interior layers 1..{} can be kept",
                n_steps - 1
            )));
        }
        if steps.contains(&i) {
            return Err(Error::Config(format!(
                "flow time {s} duplicates an earlier entry at layer {i}"
            )));
        }
        steps.push(i);
    }
    Ok(steps)
}

/// Convergence study for the linear generator on the spline grid backend.
///
/// Solves `-v_t - (1/2) sigma^2 v_xx - c v = 0` backwards from a smoothly
/// clamped cosine and compares the value at a probe point against exact
/// Gauss-Hermite quadrature, once per step size in the sweep.
#[derive(Clone, Debug)]
pub struct LinearRatePreset {
    pub c: f64,
    pub sigma: f64,
    pub t_end: f64,
    pub x_probe: f64,
    /// Half-width outside which the cosine argument is frozen.
    pub clamp: f64,
    pub nodes: usize,
    pub lo: f64,
    pub hi: f64,
    /// Step sizes of the sweep, largest first by convention.
    pub hs: Vec<f64>,
    pub theta: f64,
    pub scheme: u8,
    pub seed: u64,
    pub truncation: Option<TruncationConfig>,
}

impl LinearRatePreset {
    pub fn resolve(cfg: &mut ConfigMap) -> Result<Self> {
        let c = eff_f64(cfg, "linear.c", 0.25)?;
        let sigma = require_positive("linear.sigma", eff_f64(cfg, "linear.sigma", 1.0)?)?;
        let t_end = require_positive("linear.t_end", eff_f64(cfg, "linear.t_end", 1.0)?)?;
        let x_probe = eff_f64(cfg, "linear.x_probe", 0.0)?;
        let clamp = require_positive("linear.clamp", eff_f64(cfg, "linear.clamp", 10.0)?)?;
        let nodes = eff_usize(cfg, "grid.nodes", 201)?;
        let lo = eff_f64(cfg, "grid.lo", -10.0)?;
        let hi = eff_f64(cfg, "grid.hi", 10.0)?;
        if !(lo < hi) {
            return Err(Error::Config(format!(
                "grid.lo = {lo} must be below grid.hi = {hi}"
            )));
        }
        let hs = eff_f64_list(cfg, "sweep.hs", &[0.1, 0.05, 0.025, 0.0125])?;
        if hs.is_empty() {
            return Err(Error::Config("sweep.hs must list at least one step size".into()));
        }
        let theta = eff_f64(cfg, "solver.theta", 0.0)?;
        let scheme = eff_u64(cfg, "solver.scheme", 1)? as u8;
        let seed = eff_u64(cfg, "run.seed", 42)?;
        let truncation = resolve_truncation(cfg, false)?;
        let preset = Self {
            c,
            sigma,
            t_end,
            x_probe,
            clamp,
            nodes,
            lo,
            hi,
            hs,
            theta,
            scheme,
            seed,
            truncation,
        };
        for &h in &preset.hs {
            preset.solver_config(h).n_steps()?;
        }
        Ok(preset)
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        DiffusionSpec::constant(1, vec![0.0], vec![self.sigma])
    }

    pub fn operator(&self) -> NonlinearOperator {
        linear_f(1, self.c)
    }

    pub fn terminal(&self) -> impl Fn(&[f64]) -> f64 + Send + Sync {
        let b = self.clamp;
        move |x: &[f64]| x[0].clamp(-b, b).cos()
    }

    /// Same profile as a function of a scalar, for the quadrature oracle.
    pub fn terminal_scalar(&self) -> impl Fn(f64) -> f64 + Send + Sync {
        let b = self.clamp;
        move |u: f64| u.clamp(-b, b).cos()
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            nodes: vec![self.nodes],
            lo: vec![self.lo],
            hi: vec![self.hi],
        }
    }

    pub fn solver_config(&self, h: f64) -> SolverConfig {
        SolverConfig {
            h,
            t_end: self.t_end,
            scheme: self.scheme,
            theta: self.theta,
            truncation: self.truncation.clone(),
            seed: self.seed,
        }
    }
}

/// Mean curvature flow of a shrinking sphere, solved with the particle
/// backend on the level-set operator and read off by ray tracing the kept
/// layers.
///
/// The initial front is the sphere of radius `2 * radius`; under mean
/// curvature flow it stays a sphere and vanishes at time `radius^2`.
#[derive(Clone, Debug)]
pub struct McfSpherePreset {
    pub sigma: f64,
    pub cap: f64,
    pub radius: f64,
    pub t_end: f64,
    pub h: f64,
    pub scheme: u8,
    pub theta: f64,
    pub particles: usize,
    pub seed: u64,
    pub cells: Vec<usize>,
    /// Elapsed flow times at which the front is extracted.
    pub flow_times: Vec<f64>,
    pub rays: usize,
    pub ray_tol: f64,
    pub ray_step: f64,
    pub max_evals: usize,
    /// Radius of the sphere of ray seeds, inside the front.
    pub seed_radius: f64,
    pub truncation: Option<TruncationConfig>,
}

impl McfSpherePreset {
    pub fn resolve(cfg: &mut ConfigMap) -> Result<Self> {
        let sigma = require_positive("mcf.sigma", eff_f64(cfg, "mcf.sigma", 1.0)?)?;
        let cap = require_positive("mcf.cap", eff_f64(cfg, "mcf.cap", 200.0)?)?;
        let radius = require_positive("mcf.radius", eff_f64(cfg, "mcf.radius", 0.5)?)?;
        let t_end =
            require_positive("mcf.t_end", eff_f64(cfg, "mcf.t_end", radius * radius)?)?;
        let h = require_positive("solver.h", eff_f64(cfg, "solver.h", 0.0125)?)?;
        let scheme = eff_u64(cfg, "solver.scheme", 2)? as u8;
        let theta = eff_f64(cfg, "solver.theta", 0.0)?;
        let particles = eff_usize(cfg, "run.particles", 100_000)?;
        let seed = eff_u64(cfg, "run.seed", 42)?;
        let cells = resolve_cells(cfg, "mcf.cells", &[10, 10, 10], 3)?;
        let flow_times = eff_f64_list(cfg, "mcf.flow_times", &[0.1, 0.2])?;
        let rays = eff_usize(cfg, "mcf.rays", 1024)?;
        let ray_tol = require_positive("mcf.ray_tol", eff_f64(cfg, "mcf.ray_tol", 0.01)?)?;
        let ray_step = require_positive("mcf.ray_step", eff_f64(cfg, "mcf.ray_step", 0.05)?)?;
        let max_evals = eff_usize(cfg, "mcf.max_evals", 200)?;
        let seed_radius =
            require_positive("mcf.seed_radius", eff_f64(cfg, "mcf.seed_radius", 0.2)?)?;
        let truncation = resolve_truncation(cfg, true)?;
        let preset = Self {
            sigma,
            cap,
            radius,
            t_end,
            h,
            scheme,
            theta,
            particles,
            seed,
            cells,
            flow_times,
            rays,
            ray_tol,
            ray_step,
            max_evals,
            seed_radius,
            truncation,
        };
        preset.flow_steps()?;
        Ok(preset)
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        DiffusionSpec::scaled_brownian(3, self.sigma)
    }

    pub fn operator(&self) -> NonlinearOperator {
        mcf_f(3, self.sigma, self.cap)
    }

    pub fn terminal(&self) -> impl Fn(&[f64]) -> f64 + Send + Sync {
        let r2 = 4.0 * self.radius * self.radius;
        move |x: &[f64]| r2 - x.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn terminal_gradient(&self) -> impl Fn(&[f64]) -> Vec<f64> + Send + Sync {
        |x: &[f64]| x.iter().map(|v| -2.0 * v).collect()
    }

    pub fn x0(&self) -> Vec<f64> {
        vec![0.0; 3]
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            h: self.h,
            t_end: self.t_end,
            scheme: self.scheme,
            theta: self.theta,
            truncation: self.truncation.clone(),
            seed: self.seed,
        }
    }

    pub fn flow_steps(&self) -> Result<Vec<usize>> {
        let n = self.solver_config().n_steps()?;
        flow_steps_of(&self.flow_times, self.t_end, self.h, n)
    }

    pub fn backend_config(&self) -> Result<ParticleBackendConfig> {
        Ok(ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: self.cells.clone(),
            },
            keep: KeepLayers::Steps(self.flow_steps()?),
        })
    }
}

/// Mean curvature flow of two unit disks joined by a stripe of unit width,
/// centred at (-3/2, 0) and (3/2, 0).
///
/// The forward cloud starts uniformly inside a box covering the whole
/// figure, so the kept layers are populated wherever the front can sit.
/// Rays are seeded on a circle outside the figure and walk inwards.
#[derive(Clone, Debug)]
pub struct McfTwoDisksPreset {
    pub sigma: f64,
    pub cap: f64,
    pub t_end: f64,
    pub h: f64,
    pub scheme: u8,
    pub theta: f64,
    pub particles: usize,
    pub seed: u64,
    pub cells: Vec<usize>,
    pub flow_times: Vec<f64>,
    pub rays: usize,
    pub ray_tol: f64,
    pub ray_step: f64,
    pub max_evals: usize,
    /// Radius of the seed circle, outside the initial front.
    pub seed_radius: f64,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub truncation: Option<TruncationConfig>,
}

impl McfTwoDisksPreset {
    pub fn resolve(cfg: &mut ConfigMap) -> Result<Self> {
        let sigma = require_positive("mcf.sigma", eff_f64(cfg, "mcf.sigma", 1.0)?)?;
        let cap = require_positive("mcf.cap", eff_f64(cfg, "mcf.cap", 200.0)?)?;
        let t_end = require_positive("mcf.t_end", eff_f64(cfg, "mcf.t_end", 0.2)?)?;
        let h = require_positive("solver.h", eff_f64(cfg, "solver.h", 0.0125)?)?;
        let scheme = eff_u64(cfg, "solver.scheme", 2)? as u8;
        let theta = eff_f64(cfg, "solver.theta", 0.0)?;
        let particles = eff_usize(cfg, "run.particles", 100_000)?;
        let seed = eff_u64(cfg, "run.seed", 42)?;
        let cells = resolve_cells(cfg, "mcf.cells", &[10, 10], 2)?;
        let flow_times = eff_f64_list(cfg, "mcf.flow_times", &[0.05, 0.1, 0.15])?;
        let rays = eff_usize(cfg, "mcf.rays", 1024)?;
        let ray_tol = require_positive("mcf.ray_tol", eff_f64(cfg, "mcf.ray_tol", 0.01)?)?;
        let ray_step = require_positive("mcf.ray_step", eff_f64(cfg, "mcf.ray_step", 0.05)?)?;
        let max_evals = eff_usize(cfg, "mcf.max_evals", 200)?;
        let seed_radius =
            require_positive("mcf.seed_radius", eff_f64(cfg, "mcf.seed_radius", 3.0)?)?;
        let box_lo = eff_f64_list(cfg, "mcf.box_lo", &[-3.5, -2.0])?;
        let box_hi = eff_f64_list(cfg, "mcf.box_hi", &[3.5, 2.0])?;
        if box_lo.len() != 2 || box_hi.len() != 2 {
            return Err(Error::Config(
                "mcf.box_lo and mcf.box_hi must each list two coordinates".into(),
            ));
        }
        for k in 0..2 {
            if !(box_lo[k] < box_hi[k]) {
                return Err(Error::Config(format!(
                    "initial box is empty on axis {k}: [{}, {}]",
                    box_lo[k], box_hi[k]
                )));
            }
        }
        let truncation = resolve_truncation(cfg, true)?;
        let preset = Self {
            sigma,
            cap,
            t_end,
            h,
            scheme,
            theta,
            particles,
            seed,
            cells,
            flow_times,
            rays,
            ray_tol,
            ray_step,
            max_evals,
            seed_radius,
            box_lo,
            box_hi,
            truncation,
        };
        preset.flow_steps()?;
        Ok(preset)
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        DiffusionSpec::scaled_brownian(2, self.sigma)
    }

    pub fn operator(&self) -> NonlinearOperator {
        mcf_f(2, self.sigma, self.cap)
    }

    pub fn terminal(&self) -> impl Fn(&[f64]) -> f64 + Send + Sync {
        |x: &[f64]| two_disks_initial(x)
    }

    pub fn terminal_gradient(&self) -> impl Fn(&[f64]) -> Vec<f64> + Send + Sync {
        |x: &[f64]| two_disks_gradient(x)
    }

    pub fn cloud_start(&self) -> CloudStart<'_> {
        CloudStart::UniformBox {
            lo: &self.box_lo,
            hi: &self.box_hi,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            h: self.h,
            t_end: self.t_end,
            scheme: self.scheme,
            theta: self.theta,
            truncation: self.truncation.clone(),
            seed: self.seed,
        }
    }

    pub fn flow_steps(&self) -> Result<Vec<usize>> {
        let n = self.solver_config().n_steps()?;
        flow_steps_of(&self.flow_times, self.t_end, self.h, n)
    }

    pub fn backend_config(&self) -> Result<ParticleBackendConfig> {
        Ok(ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: self.cells.clone(),
            },
            keep: KeepLayers::Steps(self.flow_steps()?),
        })
    }
}

/// Exponential-utility portfolio optimization with stochastic volatility,
/// batched over several forward clouds to expose the Monte Carlo spread.
///
/// State is (wealth, variance). The wealth component of the forward cloud
/// diffuses artificially at rate `sigma`, which must dominate the optimal
/// diffusion for the scheme to stay monotone; the variance follows the
/// square-root process exactly as in the operator.
#[derive(Clone, Debug)]
pub struct Heston2dPreset {
    pub mu: f64,
    pub c: f64,
    pub k: f64,
    pub m: f64,
    pub rho: f64,
    pub x0: f64,
    pub y0: f64,
    pub t_end: f64,
    pub eta: f64,
    pub eps: f64,
    pub theta_max: f64,
    pub sigma: f64,
    pub cells: Vec<usize>,
    pub h: f64,
    pub scheme: u8,
    pub theta: f64,
    pub particles: usize,
    pub master_seed: u64,
    pub n_seeds: usize,
    pub reference_paths: usize,
    pub reference_steps: usize,
    pub truncation: Option<TruncationConfig>,
}

impl Heston2dPreset {
    pub fn resolve(cfg: &mut ConfigMap) -> Result<Self> {
        let mu = eff_f64(cfg, "heston.mu", 0.15)?;
        let c = require_positive("heston.c", eff_f64(cfg, "heston.c", 0.2)?)?;
        let k = require_positive("heston.k", eff_f64(cfg, "heston.k", 0.1)?)?;
        let m = require_positive("heston.m", eff_f64(cfg, "heston.m", 0.3)?)?;
        let rho = eff_f64(cfg, "heston.rho", 0.0)?;
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!(
                "heston.rho must lie in [-1, 1], got {rho}"
            )));
        }
        let x0 = eff_f64(cfg, "heston.x0", 1.0)?;
        let y0 = require_positive("heston.y0", eff_f64(cfg, "heston.y0", m)?)?;
        let t_end = require_positive("heston.t_end", eff_f64(cfg, "heston.t_end", 1.0)?)?;
        let eta = match cfg.get_f64("heston.eta")? {
            Some(v) => require_positive("heston.eta", v)?,
            None => {
                return Err(Error::Config(
                    "heston.eta is required: set the exponential risk aversion, \
                     for example heston.eta = 1"
                        .into(),
                ))
            }
        };
        let eps = require_positive("heston.eps", eff_f64(cfg, "heston.eps", 1e-4)?)?;
        let theta_max =
            require_positive("heston.theta_max", eff_f64(cfg, "heston.theta_max", 40.0)?)?;
        if theta_max <= eps {
            return Err(Error::Config(format!(
                "heston.theta_max = {theta_max} must exceed heston.eps = {eps}"
            )));
        }
        let sigma = require_positive("heston.sigma", eff_f64(cfg, "heston.sigma", 0.5)?)?;
        let cells = resolve_cells(cfg, "heston.cells", &[40, 10], 2)?;
        let h = require_positive("solver.h", eff_f64(cfg, "solver.h", 0.05)?)?;
        let scheme = eff_u64(cfg, "solver.scheme", 2)? as u8;
        let theta = eff_f64(cfg, "solver.theta", 0.0)?;
        let particles = eff_usize(cfg, "run.particles", 200_000)?;
        let master_seed = eff_u64(cfg, "run.seed", 42)?;
        let n_seeds = eff_usize(cfg, "run.n_seeds", 10)?;
        if n_seeds == 0 {
            return Err(Error::Config("run.n_seeds must be at least 1".into()));
        }
        let reference_paths = eff_usize(cfg, "reference.paths", 200_000)?;
        let reference_steps = eff_usize(cfg, "reference.steps", 100)?;
        let truncation = resolve_truncation(cfg, true)?;
        let preset = Self {
            mu,
            c,
            k,
            m,
            rho,
            x0,
            y0,
            t_end,
            eta,
            eps,
            theta_max,
            sigma,
            cells,
            h,
            scheme,
            theta,
            particles,
            master_seed,
            n_seeds,
            reference_paths,
            reference_steps,
            truncation,
        };
        preset.solver_config(0).n_steps()?;
        Ok(preset)
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        let (k, m, c, sigma) = (self.k, self.m, self.c, self.sigma);
        let drift: DriftFn = Arc::new(move |_t, x, out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = k * (m - x[1]);
        });
        let diffusion: DiffusionFn = Arc::new(move |_t, x, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = sigma;
            out[3] = c * x[1].max(0.0).sqrt();
        });
        DiffusionSpec::with_steppers(
            2,
            drift,
            diffusion,
            vec![
                Stepper::Euler,
                Stepper::CirImplicitMilstein {
                    k,
                    m,
                    c,
                    clamp_at_zero: false,
                },
            ],
        )
    }

    pub fn operator(&self) -> NonlinearOperator {
        heston_f(self.eps, self.theta_max, self.sigma, self.mu, self.rho, self.c)
    }

    pub fn terminal(&self) -> impl Fn(&[f64]) -> f64 + Send + Sync {
        let eta = self.eta;
        move |x: &[f64]| -(-eta * x[0]).exp()
    }

    pub fn terminal_gradient(&self) -> impl Fn(&[f64]) -> Vec<f64> + Send + Sync {
        let eta = self.eta;
        move |x: &[f64]| vec![eta * (-eta * x[0]).exp(), 0.0]
    }

    pub fn x0(&self) -> Vec<f64> {
        vec![self.x0, self.y0]
    }

    /// One deterministic cloud seed per batch entry.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds)
            .map(|i| child_seed(self.master_seed, i as u64))
            .collect()
    }

    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            h: self.h,
            t_end: self.t_end,
            scheme: self.scheme,
            theta: self.theta,
            truncation: self.truncation.clone(),
            seed,
        }
    }

    pub fn backend_config(&self) -> ParticleBackendConfig {
        ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: self.cells.clone(),
            },
            keep: KeepLayers::None,
        }
    }

    /// Inputs for the independent one-dimensional reference value.
    pub fn reference_inputs(&self) -> PortfolioValueInputs {
        PortfolioValueInputs {
            mu: self.mu,
            c: self.c,
            k: self.k,
            m: self.m,
            rho: self.rho,
            eta: self.eta,
            x: self.x0,
            y: self.y0,
            t: 0.0,
            t_end: self.t_end,
            n_steps: self.reference_steps,
            n_paths: self.reference_paths,
            seed: child_seed(self.master_seed, 1 << 32),
        }
    }
}

/// Five-dimensional portfolio problem: wealth, a stochastic short rate, one
/// asset price with CEV volatility, and the two variance factors.
///
/// State ordering is (wealth, rate, price, variance 1, variance 2). The
/// wealth coordinate diffuses artificially at rate `sigma`; every other
/// coordinate follows its market dynamics with a dedicated stepper.
#[derive(Clone, Debug)]
pub struct Hjb5dPreset {
    pub mu1: f64,
    pub sigma1: f64,
    pub beta1: f64,
    pub k1: f64,
    pub m1: f64,
    pub c1: f64,
    pub kappa: f64,
    pub b: f64,
    pub zeta: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub k2: f64,
    pub m2: f64,
    pub c2: f64,
    pub eta: f64,
    pub eps: f64,
    pub theta_max: f64,
    pub sigma: f64,
    pub w0: f64,
    pub s0: f64,
    pub t_end: f64,
    pub cells: Vec<usize>,
    pub h: f64,
    pub scheme: u8,
    pub theta: f64,
    pub particles: usize,
    pub master_seed: u64,
    pub n_seeds: usize,
    pub truncation: Option<TruncationConfig>,
}

impl Hjb5dPreset {
    pub fn resolve(cfg: &mut ConfigMap) -> Result<Self> {
        let mu1 = eff_f64(cfg, "hjb.mu1", 0.10)?;
        let sigma1 = require_positive("hjb.sigma1", eff_f64(cfg, "hjb.sigma1", 0.3)?)?;
        let beta1 = eff_f64(cfg, "hjb.beta1", 0.5)?;
        let k1 = require_positive("hjb.k1", eff_f64(cfg, "hjb.k1", 0.1)?)?;
        let m1 = require_positive("hjb.m1", eff_f64(cfg, "hjb.m1", 1.0)?)?;
        let c1 = require_positive("hjb.c1", eff_f64(cfg, "hjb.c1", 0.1)?)?;
        let kappa = match cfg.get_f64("hjb.kappa")? {
            Some(v) => require_positive("hjb.kappa", v)?,
            None => {
                return Err(Error::Config(
                    "hjb.kappa is required: set the short rate mean reversion speed, \
                     for example hjb.kappa = 0.1"
                        .into(),
                ))
            }
        };
        let b = eff_f64(cfg, "hjb.b", 0.07)?;
        let zeta = require_positive("hjb.zeta", eff_f64(cfg, "hjb.zeta", 0.3)?)?;
        let mu2 = eff_f64(cfg, "hjb.mu2", 0.15)?;
        let sigma2 = require_positive("hjb.sigma2", eff_f64(cfg, "hjb.sigma2", 1.0)?)?;
        let k2 = require_positive("hjb.k2", eff_f64(cfg, "hjb.k2", 0.1)?)?;
        let m2 = require_positive("hjb.m2", eff_f64(cfg, "hjb.m2", 0.3)?)?;
        let c2 = require_positive("hjb.c2", eff_f64(cfg, "hjb.c2", 0.2)?)?;
        let eta = match cfg.get_f64("hjb.eta")? {
            Some(v) => require_positive("hjb.eta", v)?,
            None => {
                return Err(Error::Config(
                    "hjb.eta is required: set the exponential risk aversion, \
                     for example hjb.eta = 1"
                        .into(),
                ))
            }
        };
        let eps = require_positive("hjb.eps", eff_f64(cfg, "hjb.eps", 1e-4)?)?;
        let theta_max =
            require_positive("hjb.theta_max", eff_f64(cfg, "hjb.theta_max", 40.0)?)?;
        if theta_max <= eps {
            return Err(Error::Config(format!(
                "hjb.theta_max = {theta_max} must exceed hjb.eps = {eps}"
            )));
        }
        let sigma = require_positive("hjb.sigma", eff_f64(cfg, "hjb.sigma", 1.0)?)?;
        let w0 = eff_f64(cfg, "hjb.w0", 1.0)?;
        let s0 = require_positive("hjb.s0", eff_f64(cfg, "hjb.s0", 1.0)?)?;
        let cells = resolve_cells(cfg, "hjb.cells", &[4, 4, 4, 4, 10], 5)?;
        let h = require_positive("solver.h", eff_f64(cfg, "solver.h", 0.1)?)?;
        let scheme = eff_u64(cfg, "solver.scheme", 2)? as u8;
        let theta = eff_f64(cfg, "solver.theta", 0.0)?;
        let particles = eff_usize(cfg, "run.particles", 100_000)?;
        let master_seed = eff_u64(cfg, "run.seed", 42)?;
        let n_seeds = eff_usize(cfg, "run.n_seeds", 3)?;
        if n_seeds == 0 {
            return Err(Error::Config("run.n_seeds must be at least 1".into()));
        }
        let t_end = require_positive("hjb.t_end", eff_f64(cfg, "hjb.t_end", 1.0)?)?;
        let truncation = resolve_truncation(cfg, true)?;
        let preset = Self {
            mu1,
            sigma1,
            beta1,
            k1,
            m1,
            c1,
            kappa,
            b,
            zeta,
            mu2,
            sigma2,
            k2,
            m2,
            c2,
            eta,
            eps,
            theta_max,
            sigma,
            w0,
            s0,
            t_end,
            cells,
            h,
            scheme,
            theta,
            particles,
            master_seed,
            n_seeds,
            truncation,
        };
        preset.solver_config(0).n_steps()?;
        Ok(preset)
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        let (kappa, b) = (self.kappa, self.b);
        let (mu1, k1, m1, k2, m2) = (self.mu1, self.k1, self.m1, self.k2, self.m2);
        let (sigma, zeta, sigma1, beta1, c1, c2) =
            (self.sigma, self.zeta, self.sigma1, self.beta1, self.c1, self.c2);
        let drift: DriftFn = Arc::new(move |_t, x, out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = kappa * (b - x[1]);
            out[2] = mu1 * x[2];
            out[3] = k1 * (m1 - x[3]);
            out[4] = k2 * (m2 - x[4]);
        });
        let diffusion: DiffusionFn = Arc::new(move |_t, x, out: &mut [f64]| {
            out.fill(0.0);
            let s = x[2].max(1e-12);
            let y1 = x[3].max(0.0);
            let y2 = x[4].max(0.0);
            out[0] = sigma;
            out[6] = zeta;
            out[12] = sigma1 * y1.sqrt() * s.powf(beta1);
            out[18] = c1 * y1.sqrt();
            out[24] = c2 * y2.sqrt();
        });
        DiffusionSpec::with_steppers(
            5,
            drift,
            diffusion,
            vec![
                Stepper::Euler,
                Stepper::OuExact {
                    kappa,
                    b,
                    zeta,
                },
                Stepper::CevLog {
                    mu: mu1,
                    sigma: sigma1,
                    beta: beta1,
                    variance_component: 3,
                },
                Stepper::CirImplicitMilstein {
                    k: k1,
                    m: m1,
                    c: c1,
                    clamp_at_zero: false,
                },
                Stepper::CirImplicitMilstein {
                    k: k2,
                    m: m2,
                    c: c2,
                    clamp_at_zero: false,
                },
            ],
        )
    }

    pub fn operator(&self) -> NonlinearOperator {
        hjb5d_f(
            self.eps,
            self.theta_max,
            self.sigma,
            Hjb5dMarket {
                mu1: self.mu1,
                sigma1: self.sigma1,
                beta1: self.beta1,
                mu2: self.mu2,
                sigma2: self.sigma2,
            },
        )
    }

    pub fn terminal(&self) -> impl Fn(&[f64]) -> f64 + Send + Sync {
        let eta = self.eta;
        move |x: &[f64]| -(-eta * x[0]).exp()
    }

    pub fn terminal_gradient(&self) -> impl Fn(&[f64]) -> Vec<f64> + Send + Sync {
        let eta = self.eta;
        move |x: &[f64]| vec![eta * (-eta * x[0]).exp(), 0.0, 0.0, 0.0, 0.0]
    }

    pub fn x0(&self) -> Vec<f64> {
        vec![self.w0, self.b, self.s0, self.m1, self.m2]
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds)
            .map(|i| child_seed(self.master_seed, i as u64))
            .collect()
    }

    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            h: self.h,
            t_end: self.t_end,
            scheme: self.scheme,
            theta: self.theta,
            truncation: self.truncation.clone(),
            seed,
        }
    }

    pub fn backend_config(&self) -> ParticleBackendConfig {
        ParticleBackendConfig {
            regression: RegressionBackend::LocalBasis {
                cells_per_axis: self.cells.clone(),
            },
            keep: KeepLayers::None,
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug)]
pub enum Preset {
    LinearRate(LinearRatePreset),
    McfSphere(McfSpherePreset),
    McfTwoDisks(McfTwoDisksPreset),
    Heston2d(Heston2dPreset),
    Hjb5d(Hjb5dPreset),
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::LinearRate(_) => "linear_rate",
            Preset::McfSphere(_) => "mcf_sphere",
            Preset::McfTwoDisks(_) => "mcf_two_disks",
            Preset::Heston2d(_) => "heston2d",
            Preset::Hjb5d(_) => "hjb5d",
        }
    }
}

/// Resolves the `preset` key and the preset's own keys, stamping defaults.
///
/// On success every recognized key has been read, so a subsequent
/// [`ConfigMap::ensure_fully_used`] rejects exactly the unknown ones.
pub fn resolve_preset(cfg: &mut ConfigMap) -> Result<Preset> {
    let name = cfg.require_str("preset")?;
    match name.as_str() {
        "linear_rate" => Ok(Preset::LinearRate(LinearRatePreset::resolve(cfg)?)),
        "mcf_sphere" => Ok(Preset::McfSphere(McfSpherePreset::resolve(cfg)?)),
        "mcf_two_disks" => Ok(Preset::McfTwoDisks(McfTwoDisksPreset::resolve(cfg)?)),
        "heston2d" => Ok(Preset::Heston2d(Heston2dPreset::resolve(cfg)?)),
        "hjb5d" => Ok(Preset::Hjb5d(Hjb5dPreset::resolve(cfg)?)),
        other => Err(Error::Config(format!(
            "unknown preset `{other}`; available presets: linear_rate, mcf_sphere, \
             mcf_two_disks, heston2d, hjb5d"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_of(text: &str) -> ConfigMap {
        ConfigMap::parse(text).unwrap()
    }

    #[test]
    fn linear_rate_defaults_are_stamped_and_reproducible() {
        let mut cfg = cfg_of("preset = linear_rate\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::LinearRate(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        assert_eq!(p.hs, vec![0.1, 0.05, 0.025, 0.0125]);
        assert_eq!(p.nodes, 201);
        cfg.ensure_fully_used().unwrap();
        let doc = cfg.serialize();
        assert!(doc.contains("linear.c = 0.25"));
        assert!(doc.contains("sweep.hs = 0.1,0.05,0.025,0.0125"));

        let mut again = cfg_of(&doc);
        let q = match resolve_preset(&mut again).unwrap() {
            Preset::LinearRate(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        assert_eq!(again.serialize(), doc);
        assert_eq!(format!("{q:?}"), format!("{p:?}"));
    }

    #[test]
    fn user_values_survive_verbatim() {
        let mut cfg = cfg_of("preset = linear_rate\nlinear.c = 2.5e-1\n");
        resolve_preset(&mut cfg).unwrap();
        assert!(cfg.serialize().contains("linear.c = 2.5e-1"));
    }

    #[test]
    fn unknown_preset_is_rejected_with_the_roster() {
        let mut cfg = cfg_of("preset = quantum\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("available presets"));
    }

    #[test]
    fn heston_requires_risk_aversion() {
        let mut cfg = cfg_of("preset = heston2d\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("heston.eta"));
        let mut cfg = cfg_of("preset = heston2d\nheston.eta = 1\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::Heston2d(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        assert_eq!(p.y0, p.m);
        assert_eq!(p.seeds().len(), 10);
        cfg.ensure_fully_used().unwrap();
    }

    #[test]
    fn hjb5d_requires_kappa_and_eta() {
        let mut cfg = cfg_of("preset = hjb5d\nhjb.eta = 1\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("hjb.kappa"));
        let mut cfg = cfg_of("preset = hjb5d\nhjb.kappa = 0.1\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("hjb.eta"));
        let mut cfg = cfg_of("preset = hjb5d\nhjb.kappa = 0.1\nhjb.eta = 1\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::Hjb5d(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        assert_eq!(p.x0(), vec![1.0, 0.07, 1.0, 1.0, 0.3]);
        assert_eq!(p.cells, vec![4, 4, 4, 4, 10]);
        cfg.ensure_fully_used().unwrap();
    }

    #[test]
    fn sphere_flow_times_must_sit_on_the_grid() {
        let mut cfg = cfg_of("preset = mcf_sphere\nmcf.flow_times = 0.013\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("does not land on the time grid"));

        let mut cfg = cfg_of("preset = mcf_sphere\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::McfSphere(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        assert_eq!(p.flow_steps().unwrap(), vec![12, 4]);
        cfg.ensure_fully_used().unwrap();
    }

    #[test]
    fn terminal_flow_time_is_rejected() {
        let mut cfg = cfg_of("preset = mcf_sphere\nmcf.flow_times = 0.25\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("strictly between"));
    }

    #[test]
    fn two_disks_profile_and_box_are_consistent() {
        let mut cfg = cfg_of("preset = mcf_two_disks\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::McfTwoDisks(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        let g = p.terminal();
        assert!(g(&[1.5, 0.0]) > 0.0);
        assert!(g(&[0.0, 0.25]) > 0.0);
        assert!(g(&[0.0, 0.75]) < 0.0);
        assert!(g(&[3.0, 0.0]) < 0.0);
        assert_eq!(p.flow_steps().unwrap(), vec![12, 8, 4]);
        cfg.ensure_fully_used().unwrap();
    }

    #[test]
    fn truncation_keys_pass_through() {
        let mut cfg = cfg_of(
            "preset = heston2d\nheston.eta = 1\ntruncation.c1 = 0.5\ntruncation.g_sup = 7\n",
        );
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::Heston2d(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        let tc = p.truncation.clone().unwrap();
        assert_eq!(tc.c1, Some(0.5));
        assert_eq!(tc.c2, None);
        assert_eq!(tc.g_sup, Some(7.0));
        cfg.ensure_fully_used().unwrap();

        let mut cfg = cfg_of("preset = heston2d\nheston.eta = 1\ntruncation.enabled = false\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::Heston2d(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        assert!(p.truncation.is_none());
    }

    #[test]
    fn invalid_scheme_fails_at_resolution() {
        let mut cfg = cfg_of("preset = heston2d\nheston.eta = 1\nsolver.scheme = 3\n");
        let err = resolve_preset(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("scheme"));
    }

    #[test]
    fn five_dimensional_diffusion_respects_market_dynamics() {
        let mut cfg = cfg_of("preset = hjb5d\nhjb.kappa = 0.1\nhjb.eta = 1\n");
        let p = match resolve_preset(&mut cfg).unwrap() {
            Preset::Hjb5d(p) => p,
            other => panic!("wrong preset {}", other.name()),
        };
        let spec = p.diffusion().unwrap();
        let x = p.x0();
        let mut mu = vec![0.0; 5];
        (spec.drift)(0.0, &x, &mut mu);
        assert_eq!(mu[0], 0.0);
        assert_eq!(mu[1], 0.0);
        assert!((mu[2] - 0.10).abs() < 1e-15);
        assert_eq!(mu[3], 0.0);
        assert_eq!(mu[4], 0.0);
        let mut sig = vec![0.0; 25];
        (spec.diffusion)(0.0, &x, &mut sig);
        assert_eq!(sig[0], 1.0);
        assert!((sig[6] - 0.3).abs() < 1e-15);
        assert!((sig[12] - 0.3).abs() < 1e-15);
        assert!((sig[18] - 0.1).abs() < 1e-15);
        assert!((sig[24] - 0.2 * 0.3f64.sqrt()).abs() < 1e-15);
    }
}
