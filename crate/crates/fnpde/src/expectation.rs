//! Exact expectation backends: Gauss-Hermite quadrature against the standard
//! normal, tensor rules for a few dimensions, and closed-form Gaussian
//! interval moments for the spline-kernel integrals.
//!
//! The quadrature here is the probabilists' flavour, so a rule of order `n`
//! satisfies `sum_i w_i p(z_i) = E[p(Z)]` exactly for polynomials `p` of
//! degree up to `2n - 1`, with `Z` standard normal.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::sde::DiffusionSpec;
use crate::weights::SigmaInverse;
use crate::{Error, Result};

/// Nodes and weights of a probabilists' Gauss-Hermite rule of the given
/// order, computed from the symmetric tridiagonal recurrence matrix
/// (diagonal zero, off-diagonal `sqrt(k)`). Nodes come back sorted.
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::Config("quadrature order must be positive".into()));
    }
    if order == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let beta = (k as f64).sqrt();
        jacobi[(k - 1, k)] = beta;
        jacobi[(k, k - 1)] = beta;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let first = eig.eigenvectors[(0, i)];
            (node, first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1 / total).collect();
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let node = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -node;
        nodes[j] = node;
        let weight = 0.5 * (weights[i] + weights[j]);
        weights[i] = weight;
        weights[j] = weight;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// Tensor-product quadrature rule over independent standard normals.
pub struct QuadratureRule {
    pub dim: usize,
    pub order: usize,
    /// Flattened nodes, `len = weights.len() * dim`.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Builds the `order^dim` tensor rule. Restricted to `dim <= 3`; beyond
    /// that the node count makes quadrature the wrong tool.
    pub fn tensor(order: usize, dim: usize) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::Config(format!(
                "tensor quadrature supports dimensions 1 to 3, got {dim}"
            )));
        }
        let (n1, w1) = gauss_hermite(order)?;
        let count = n1.len().pow(dim as u32);
        let mut nodes = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        loop {
            let mut w = 1.0;
            for k in 0..dim {
                nodes.push(n1[idx[k]]);
                w *= w1[idx[k]];
            }
            weights.push(w);
            let mut k = dim;
            loop {
                if k == 0 {
                    return Ok(Self {
                        dim,
                        order,
                        nodes,
                        weights,
                    });
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < n1.len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// True when the rule has no nodes (never happens for valid orders).
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Node `i` as a slice.
    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Quadrature expectation of a plain function of the normal vector.
    pub fn expect<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.len() {
            acc += self.weights[i] * f(self.node(i));
        }
        acc
    }
}

/// Which derivative weight to apply under the expectation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    /// Plain expectation, scalar result.
    Value,
    /// Gradient weight, d-vector result.
    Gradient,
    /// Hessian weight, row-major d x d result.
    Hessian,
}

/// One-step weighted expectation
/// `E[psi(t + h, x + mu h + sigma sqrt(h) Z) * H_kind]`
/// by tensor Gauss-Hermite quadrature.
///
/// Returns 1, d, or d*d values depending on the weight kind.
pub fn gh_expectation(
    psi: &dyn Fn(f64, &[f64]) -> f64,
    kind: WeightKind,
    spec: &DiffusionSpec,
    t: f64,
    x: &[f64],
    h: f64,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    let d = spec.dim;
    if rule.dim != d {
        return Err(Error::Config(format!(
            "quadrature rule has dimension {}, spec expects {d}",
            rule.dim
        )));
    }
    let mu = spec.drift_at(t, x);
    let sigma = spec.diffusion_at(t, x);
    let inv = SigmaInverse::new_at(&sigma, d, t, x)?;
    let sqrt_h = h.sqrt();
    let out_len = match kind {
        WeightKind::Value => 1,
        WeightKind::Gradient => d,
        WeightKind::Hessian => d * d,
    };
    let mut acc = vec![0.0; out_len];
    let mut y = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut wbuf = vec![0.0; out_len.max(1)];
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
        let val = psi(t + h, &y);
        let w = rule.weights[i];
        match kind {
            WeightKind::Value => acc[0] += w * val,
            WeightKind::Gradient => {
                inv.h1(&dw, h, &mut wbuf[..d]);
                for k in 0..d {
                    acc[k] += w * val * wbuf[k];
                }
            }
            WeightKind::Hessian => {
                inv.h2(&dw, h, &mut wbuf);
                for k in 0..out_len {
                    acc[k] += w * val * wbuf[k];
                }
            }
        }
    }
    Ok(acc)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function, via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Moments `M_k = integral over [a, b] of z^k phi(z) dz` for `k = 0..=k_max`.
///
/// Uses `M_0 = Phi(b) - Phi(a)`, `M_1 = phi(a) - phi(b)`, and the recursion
/// `M_k = (k - 1) M_{k-2} + a^{k-1} phi(a) - b^{k-1} phi(b)`. Infinite bounds
/// are allowed; their density terms vanish.
pub fn gaussian_interval_moments(a: f64, b: f64, k_max: usize) -> Vec<f64> {
    let pa = if a.is_finite() { normal_pdf(a) } else { 0.0 };
    let pb = if b.is_finite() { normal_pdf(b) } else { 0.0 };
    let ca = if a == f64::NEG_INFINITY {
        0.0
    } else if a == f64::INFINITY {
        1.0
    } else {
        normal_cdf(a)
    };
    let cb = if b == f64::NEG_INFINITY {
        0.0
    } else if b == f64::INFINITY {
        1.0
    } else {
        normal_cdf(b)
    };
    let mut m = vec![0.0; k_max + 1];
    m[0] = cb - ca;
    if k_max >= 1 {
        m[1] = pa - pb;
    }
    let mut a_pow = 1.0;
    let mut b_pow = 1.0;
    for k in 2..=k_max {
        a_pow = if a.is_finite() { a_pow * a } else { 0.0 };
        b_pow = if b.is_finite() { b_pow * b } else { 0.0 };
        m[k] = (k - 1) as f64 * m[k - 2] + a_pow * pa - b_pow * pb;
    }
    m
}
