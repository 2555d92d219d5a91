//! Nonlinear remainder operators F(t, x, r, p, gamma), their built-in
//! instances, the exponential monotonicity transform, and diagnostics for
//! the ellipticity and domination conditions the scheme relies on.
//!
//! An operator evaluates on the value `r`, gradient `p`, and symmetric
//! row-major Hessian `gamma` produced by the derivative estimates, and
//! declares with which sign it enters the one-step update: the step computes
//! `E[psi] + step_sign * h * F(...)`. Operators transcribed from equations of
//! the form `-v_t - Lv + F = 0` carry `step_sign = -1`.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::sde::DiffusionSpec;

/// Operator evaluation closure `(t, x, r, p, gamma) -> scalar` with `gamma`
/// row-major symmetric.
pub type OperatorEval = Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Declared bounds feeding the truncation constants.
#[derive(Clone, Copy, Debug)]
pub struct OperatorBounds {
    /// Supremum of `|F(t, x, 0, 0, 0)|` over the domain.
    pub zero_level: f64,
    /// Supremum of `|dF/dr|` over the domain.
    pub fr_sup: f64,
}

/// Optional analytic partial derivatives of an operator.
#[derive(Clone)]
pub struct OperatorPartials {
    /// `dF/dr`.
    pub fr: Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    /// `dF/dp`, d values.
    pub fp: Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    /// `dF/dgamma` as a symmetric matrix, row-major d x d.
    pub fgamma: Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
}

/// A nonlinear remainder operator together with the metadata the solver
/// needs to apply and truncate it.
#[derive(Clone)]
pub struct NonlinearOperator {
    /// Space dimension d of `x`, `p`, and `gamma`.
    pub dim: usize,
    /// Short name used in diagnostics.
    pub label: String,
    /// The operator body.
    pub eval: OperatorEval,
    /// Sign with which `h * F` enters the one-step update.
    pub step_sign: f64,
    /// Optional clamp applied to the evaluation result.
    pub cap: Option<f64>,
    /// Declared bounds for the truncation constants.
    pub bounds: OperatorBounds,
    /// Analytic partials, when available.
    pub partials: Option<OperatorPartials>,
}

impl NonlinearOperator {
    /// Evaluates the operator, applying the clamp if one is declared.
    pub fn apply(&self, t: f64, x: &[f64], r: f64, p: &[f64], gamma: &[f64]) -> f64 {
        let v = (self.eval)(t, x, r, p, gamma);
        match self.cap {
            Some(cap) => v.clamp(-cap, cap),
            None => v,
        }
    }
}

fn trace(gamma: &[f64], d: usize) -> f64 {
    (0..d).map(|k| gamma[k * d + k]).sum()
}

/// Linear operator `F = c * Tr[gamma]`, the constant-coefficient testbed.
pub fn linear_f(dim: usize, c: f64) -> NonlinearOperator {
    let eval: OperatorEval = Arc::new(move |_t, _x, _r, _p, gamma| c * trace(gamma, dim));
    let partials = OperatorPartials {
        fr: Arc::new(|_, _, _, _, _| 0.0),
        fp: Arc::new(move |_, _, _, _, _| vec![0.0; dim]),
        fgamma: Arc::new(move |_, _, _, _, _| {
            let mut g = vec![0.0; dim * dim];
            for k in 0..dim {
                g[k * dim + k] = c;
            }
            g
        }),
    };
    NonlinearOperator {
        dim,
        label: format!("linear(c={c})"),
        eval,
        step_sign: 1.0,
        cap: None,
        bounds: OperatorBounds {
            zero_level: 0.0,
            fr_sup: 0.0,
        },
        partials: Some(partials),
    }
}

/// Linear diffusion plus reaction, `F = c * Tr[gamma] - beta * r`.
pub fn linear_reaction_f(dim: usize, c: f64, beta: f64) -> NonlinearOperator {
    let eval: OperatorEval =
        Arc::new(move |_t, _x, r, _p, gamma| c * trace(gamma, dim) - beta * r);
    let partials = OperatorPartials {
        fr: Arc::new(move |_, _, _, _, _| -beta),
        fp: Arc::new(move |_, _, _, _, _| vec![0.0; dim]),
        fgamma: Arc::new(move |_, _, _, _, _| {
            let mut g = vec![0.0; dim * dim];
            for k in 0..dim {
                g[k * dim + k] = c;
            }
            g
        }),
    };
    NonlinearOperator {
        dim,
        label: format!("reaction(c={c},beta={beta})"),
        eval,
        step_sign: 1.0,
        cap: None,
        bounds: OperatorBounds {
            zero_level: 0.0,
            fr_sup: beta.abs(),
        },
        partials: Some(partials),
    }
}

/// Mean curvature flow remainder
/// `F = Tr[gamma] (sigma^2 / 2 - 1) + z' gamma z / |z|^2`,
/// with the curvature term taken as 0 at `z = 0`, clamped to `[-cap, cap]`.
///
/// Enters the update with a minus sign: combined with an isotropic forward
/// diffusion of volatility `sigma`, the step approximates the level-set
/// equation of motion by mean curvature regardless of `sigma`.
pub fn mcf_f(dim: usize, sigma: f64, cap: f64) -> NonlinearOperator {
    let eval: OperatorEval = Arc::new(move |_t, _x, _r, p, gamma| {
        let tr = trace(gamma, dim);
        let zz: f64 = p.iter().map(|v| v * v).sum();
        let curvature = if zz > 0.0 {
            let mut num = 0.0;
            for i in 0..dim {
                let mut gi = 0.0;
                for j in 0..dim {
                    gi += gamma[i * dim + j] * p[j];
                }
                num += p[i] * gi;
            }
            num / zz
        } else {
            0.0
        };
        tr * (0.5 * sigma * sigma - 1.0) + curvature
    });
    NonlinearOperator {
        dim,
        label: format!("mcf(sigma={sigma})"),
        eval,
        step_sign: -1.0,
        cap: Some(cap),
        bounds: OperatorBounds {
            zero_level: cap,
            fr_sup: 0.0,
        },
        partials: None,
    }
}

/// Supremum of `a2 theta^2 / 2 + a1 theta` over `theta` in `[lo, hi]`.
///
/// Closed form: both endpoints and the clamped stationary point are
/// candidates; when the quadratic is convex the stationary point is a
/// minimum and loses the comparison anyway.
pub fn interval_quadratic_sup(a2: f64, a1: f64, lo: f64, hi: f64) -> f64 {
    let f = |t: f64| 0.5 * a2 * t * t + a1 * t;
    let mut best = f(lo).max(f(hi));
    if a2 != 0.0 {
        let stat = (-a1 / a2).clamp(lo, hi);
        best = best.max(f(stat));
    }
    best
}

/// Portfolio optimization remainder for the stochastic volatility model:
/// `F = sigma^2 gamma11 / 2 - sup over theta in [eps, theta_max] of
/// (theta^2 (y or eps) gamma11 / 2 + theta (mu z1 + rho c (y or eps) gamma12))`,
/// where `y = x[1]` is the variance state.
pub fn heston_f(
    eps: f64,
    theta_max: f64,
    sigma: f64,
    mu: f64,
    rho: f64,
    c: f64,
) -> NonlinearOperator {
    let eval: OperatorEval = Arc::new(move |_t, x, _r, p, gamma| {
        let a = x[1].max(eps);
        let quad = a * gamma[0];
        let lin = mu * p[0] + rho * c * a * gamma[1];
        0.5 * sigma * sigma * gamma[0] - interval_quadratic_sup(quad, lin, eps, theta_max)
    });
    NonlinearOperator {
        dim: 2,
        label: format!("heston(sigma={sigma})"),
        eval,
        step_sign: -1.0,
        cap: None,
        bounds: OperatorBounds {
            zero_level: 0.0,
            fr_sup: 0.0,
        },
        partials: None,
    }
}

/// Supremum of `c . theta + (d1 theta1^2 + d2 theta2^2) / 2` over the annulus
/// `lo <= |theta| <= hi` in the plane.
///
/// The maximum is either the interior stationary point (when the quadratic is
/// strictly concave and the point lands inside the annulus) or sits on one of
/// the two circles. Circle maxima come from the stationarity system
/// `theta_i = c_i / (lambda - d_i)` with `|theta| = rho`, whose multiplier
/// `lambda` is the unique root of a decreasing rational function on
/// `(max(d1, d2), max(d1, d2) + |c| / rho]`; a bisection pins it to machine
/// precision, and the aligned and degenerate cases have explicit forms.
pub fn annulus_quadratic_sup(c1: f64, c2: f64, d1: f64, d2: f64, lo: f64, hi: f64) -> f64 {
    let obj = |t1: f64, t2: f64| c1 * t1 + c2 * t2 + 0.5 * (d1 * t1 * t1 + d2 * t2 * t2);
    let mut best = f64::NEG_INFINITY;
    if d1 < 0.0 && d2 < 0.0 {
        let t1 = -c1 / d1;
        let t2 = -c2 / d2;
        let n = (t1 * t1 + t2 * t2).sqrt();
        if n >= lo && n <= hi {
            best = obj(t1, t2);
        }
    }
    for &rho in &[lo, hi] {
        best = best.max(circle_quadratic_max(c1, c2, d1, d2, rho, &obj));
    }
    best
}

fn circle_quadratic_max(
    c1: f64,
    c2: f64,
    d1: f64,
    d2: f64,
    rho: f64,
    obj: &dyn Fn(f64, f64) -> f64,
) -> f64 {
    let c_norm = (c1 * c1 + c2 * c2).sqrt();
    if c_norm == 0.0 {
        return 0.5 * rho * rho * d1.max(d2);
    }
    if d1 == d2 {
        return rho * c_norm + 0.5 * rho * rho * d1;
    }
    let (dm, cm, dq, cq) = if d1 > d2 {
        (d1, c1, d2, c2)
    } else {
        (d2, c2, d1, c1)
    };
    let assemble = |lambda: f64| -> f64 {
        let tm = cm / (lambda - dm);
        let tq = cq / (lambda - dq);
        if d1 > d2 {
            obj(tm, tq)
        } else {
            obj(tq, tm)
        }
    };
    if cm == 0.0 {
        let tq = cq / (dm - dq);
        if tq.abs() <= rho {
            let tm = (rho * rho - tq * tq).max(0.0).sqrt();
            return if d1 > d2 { obj(tm, tq) } else { obj(tq, tm) };
        }
        let mut a = dm;
        let mut b = dm + c_norm / rho;
        for _ in 0..128 {
            let mid = 0.5 * (a + b);
            let s = cq / (mid - dq);
            if s * s > rho * rho {
                a = mid;
            } else {
                b = mid;
            }
        }
        return assemble(0.5 * (a + b));
    }
    let mut a = dm + cm.abs() / (2.0 * rho);
    let mut b = dm + c_norm / rho;
    let s_of = |lambda: f64| {
        let tm = cm / (lambda - dm);
        let tq = cq / (lambda - dq);
        tm * tm + tq * tq
    };
    for _ in 0..128 {
        let mid = 0.5 * (a + b);
        if s_of(mid) > rho * rho {
            a = mid;
        } else {
            b = mid;
        }
    }
    assemble(0.5 * (a + b))
}

/// Market parameters of the five dimensional portfolio problem: a CEV asset
/// with stochastic variance and a second asset with its own variance factor.
#[derive(Clone, Copy, Debug)]
pub struct Hjb5dMarket {
    pub mu1: f64,
    pub sigma1: f64,
    pub beta1: f64,
    pub mu2: f64,
    pub sigma2: f64,
}

/// Five dimensional portfolio remainder. State ordering: `x1` wealth, `x2`
/// interest rate, `x3` first asset price, `x4` first asset variance, `x5`
/// second asset variance.
///
/// `F = sigma^2 gamma11 / 2 - x1 x2 z1 - sup over the annulus
/// eps <= |theta| <= theta_max of (c . theta + theta' D theta / 2)` with
/// `c1 = (mu1 - x2) z1 + sigma1^2 (x4 or eps)(x3 or eps)^(2 beta1 - 1) gamma13`,
/// `c2 = (mu2 - x2) z1`,
/// `D = diag(sigma1^2 (x4 or eps)(x3 or eps)^(2 beta1 - 2) gamma11,
///           sigma2^2 (x5 or eps) gamma11)`.
pub fn hjb5d_f(eps: f64, theta_max: f64, sigma: f64, market: Hjb5dMarket) -> NonlinearOperator {
    let Hjb5dMarket {
        mu1,
        sigma1,
        beta1,
        mu2,
        sigma2,
    } = market;
    let eval: OperatorEval = Arc::new(move |_t, x, _r, p, gamma| {
        let z1 = p[0];
        let g11 = gamma[0];
        let g13 = gamma[2];
        let s1 = x[2].max(eps);
        let y1 = x[3].max(eps);
        let y2 = x[4].max(eps);
        let s_pow = s1.powf(2.0 * beta1 - 2.0);
        let c1 = (mu1 - x[1]) * z1 + sigma1 * sigma1 * y1 * s_pow * s1 * g13;
        let c2 = (mu2 - x[1]) * z1;
        let d1 = sigma1 * sigma1 * y1 * s_pow * g11;
        let d2 = sigma2 * sigma2 * y2 * g11;
        0.5 * sigma * sigma * g11
            - x[0] * x[1] * z1
            - annulus_quadratic_sup(c1, c2, d1, d2, eps, theta_max)
    });
    NonlinearOperator {
        dim: 5,
        label: format!("hjb5d(sigma={sigma})"),
        eval,
        step_sign: -1.0,
        cap: None,
        bounds: OperatorBounds {
            zero_level: 0.0,
            fr_sup: 0.0,
        },
        partials: None,
    }
}

/// Exponential change of variables restoring strict monotonicity in `r`.
///
/// With `tau = t_end - t` and the operator's own step sign `s`, the
/// transformed body is
/// `e^(theta tau) F(t, x, e^(-theta tau) r, e^(-theta tau) p, e^(-theta tau) gamma)
///  + s theta r`,
/// so that solving with the transformed operator produces the rescaled field
/// `u(t, x) = e^(theta tau) v(t, x)`. The declared `|F_r|` bound grows by
/// `theta`; an inner clamp keeps acting through the composed evaluation.
pub fn monotonicity_transform(
    op: &NonlinearOperator,
    theta: f64,
    t_end: f64,
) -> NonlinearOperator {
    if theta == 0.0 {
        return op.clone();
    }
    let inner = op.clone();
    let sign = op.step_sign;
    let dim = op.dim;
    let eval: OperatorEval = Arc::new(move |t, x, r, p, gamma| {
        let scale = (theta * (t_end - t)).exp();
        let inv = 1.0 / scale;
        let mut ps = vec![0.0; dim];
        for (k, v) in p.iter().enumerate() {
            ps[k] = v * inv;
        }
        let mut gs = vec![0.0; dim * dim];
        for (k, v) in gamma.iter().enumerate() {
            gs[k] = v * inv;
        }
        scale * inner.apply(t, x, r * inv, &ps, &gs) + sign * theta * r
    });
    NonlinearOperator {
        dim: op.dim,
        label: format!("{}+shift(theta={theta})", op.label),
        eval,
        step_sign: op.step_sign,
        cap: None,
        bounds: OperatorBounds {
            zero_level: op.bounds.zero_level * (theta * t_end).exp(),
            fr_sup: op.bounds.fr_sup + theta,
        },
        partials: None,
    }
}

/// One evaluation point for the domination diagnostic.
#[derive(Clone, Debug)]
pub struct ProbePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
    pub p: Vec<f64>,
    /// Row-major symmetric d x d.
    pub gamma: Vec<f64>,
}

/// Outcome of the domination diagnostic at one probe.
#[derive(Clone, Copy, Debug)]
pub struct ProbeOutcome {
    /// Smallest eigenvalue of the estimated `dF/dgamma`.
    pub ellipticity: f64,
    /// Smallest eigenvalue of `a - dF/dgamma`.
    pub domination: f64,
    /// Estimated `min over w of (F_p . w + w' F_gamma w)`.
    pub m_f: f64,
}

/// Aggregate report of [`check_domination`].
#[derive(Clone, Debug)]
pub struct DominationReport {
    /// True when every probe satisfies `0 <= dF/dgamma <= a` up to a small
    /// eigenvalue tolerance.
    pub passed: bool,
    /// Worst (most negative) ellipticity eigenvalue over all probes.
    pub worst_ellipticity: f64,
    /// Worst (most negative) domination eigenvalue over all probes.
    pub worst_domination: f64,
    /// Worst lower quadratic bound over all probes; negative infinity means
    /// the drift term escapes along some flat direction of `F_gamma`.
    pub m_f: f64,
    pub outcomes: Vec<ProbeOutcome>,
}

fn sym_eig_min(mat: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, mat);
    let eig = SymmetricEigen::new(m);
    eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Checks the ellipticity and domination conditions `0 <= dF/dgamma <= a`
/// by central finite differences of the operator body at the supplied
/// probes, and estimates the lower quadratic bound on the drift remainder.
/// Diagnostic only: never errors, reports worst violations.
pub fn check_domination(
    op: &NonlinearOperator,
    spec: &DiffusionSpec,
    probes: &[ProbePoint],
) -> DominationReport {
    let d = op.dim;
    let mut outcomes = Vec::with_capacity(probes.len());
    let mut worst_ell = f64::INFINITY;
    let mut worst_dom = f64::INFINITY;
    let mut worst_mf = f64::INFINITY;
    let mut passed = true;
    for probe in probes {
        let gamma_scale = probe
            .gamma
            .iter()
            .fold(1.0f64, |a, &b| a.max(b.abs()));
        let dg = 1e-5 * gamma_scale;
        let mut fgamma = vec![0.0; d * d];
        let mut work = probe.gamma.clone();
        for i in 0..d {
            for j in i..d {
                let (step, denom) = if i == j {
                    (dg, 2.0 * dg)
                } else {
                    (dg, 4.0 * dg)
                };
                work.copy_from_slice(&probe.gamma);
                work[i * d + j] += step;
                work[j * d + i] = work[i * d + j];
                if i == j {
                    work[i * d + i] = probe.gamma[i * d + i] + step;
                }
                let up = op.apply(probe.t, &probe.x, probe.r, &probe.p, &work);
                work.copy_from_slice(&probe.gamma);
                work[i * d + j] -= step;
                work[j * d + i] = work[i * d + j];
                if i == j {
                    work[i * d + i] = probe.gamma[i * d + i] - step;
                }
                let dn = op.apply(probe.t, &probe.x, probe.r, &probe.p, &work);
                let der = (up - dn) / denom;
                fgamma[i * d + j] = der;
                fgamma[j * d + i] = der;
            }
        }
        let sigma = spec.diffusion_at(probe.t, &probe.x);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += sigma[i * d + k] * sigma[j * d + k];
                }
                a[i * d + j] = s;
            }
        }
        let ell = sym_eig_min(&fgamma, d);
        let mut diff = vec![0.0; d * d];
        for k in 0..d * d {
            diff[k] = a[k] - fgamma[k];
        }
        let dom = sym_eig_min(&diff, d);

        let p_scale = probe.p.iter().fold(1.0f64, |acc, &b| acc.max(b.abs()));
        let dp = 1e-5 * p_scale;
        let mut fp = vec![0.0; d];
        let mut pwork = probe.p.clone();
        for k in 0..d {
            pwork.copy_from_slice(&probe.p);
            pwork[k] += dp;
            let up = op.apply(probe.t, &probe.x, probe.r, &pwork, &probe.gamma);
            pwork[k] = probe.p[k] - dp;
            let dn = op.apply(probe.t, &probe.x, probe.r, &pwork, &probe.gamma);
            fp[k] = (up - dn) / (2.0 * dp);
        }
        let m_f = quadratic_lower_bound(&fp, &fgamma, d);

        let tol = 1e-6 * (1.0 + a.iter().fold(0.0f64, |acc, &b| acc.max(b.abs())));
        if ell < -tol || dom < -tol {
            passed = false;
        }
        worst_ell = worst_ell.min(ell);
        worst_dom = worst_dom.min(dom);
        worst_mf = worst_mf.min(m_f);
        outcomes.push(ProbeOutcome {
            ellipticity: ell,
            domination: dom,
            m_f,
        });
    }
    DominationReport {
        passed,
        worst_ellipticity: worst_ell,
        worst_domination: worst_dom,
        m_f: worst_mf,
        outcomes,
    }
}

fn quadratic_lower_bound(fp: &[f64], fgamma: &[f64], d: usize) -> f64 {
    let g_scale = fgamma.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let p_scale = fp.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let flat_tol = 1e-10 * (1.0 + g_scale);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        dirs.push(e.clone());
        e[k] = -1.0;
        dirs.push(e);
    }
    if d > 1 {
        let mut rng = ChaCha12Rng::seed_from_u64(0x5eed);
        for _ in 0..64 * d {
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in u.iter_mut() {
                    *v /= n;
                }
                dirs.push(u);
            }
        }
    }
    let mut m_f = 0.0f64;
    for u in &dirs {
        let mut qa = 0.0;
        for i in 0..d {
            for j in 0..d {
                qa += u[i] * fgamma[i * d + j] * u[j];
            }
        }
        let qb: f64 = u.iter().zip(fp).map(|(a, b)| a * b).sum();
        let along = if qa > flat_tol {
            -qb * qb / (4.0 * qa)
        } else if qb.abs() <= 1e-10 * (1.0 + p_scale) {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        m_f = m_f.min(along);
    }
    m_f
}
