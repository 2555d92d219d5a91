//! Derivative weights built from the Brownian increment of one step.
//!
//! Weighting a value sample against these polynomials in the increment turns
//! plain expectations into derivative estimates: with `u = (sigma^T)^{-1} W_h`,
//!
//! - `H0 = 1` recovers the value itself,
//! - `H1 = u / h` recovers the gradient,
//! - `H2 = (u u^T - h a^{-1}) / h^2` recovers the Hessian,
//!
//! where `a = sigma sigma^T`. The two-step gradient-chain variant reuses `H1`
//! against a gradient field instead of applying `H2` directly.

use crate::{Error, Result};

/// Inverse-transpose of a diffusion matrix, with the products needed by the
/// derivative weights precomputed.
#[derive(Debug, Clone)]
pub struct SigmaInverse {
    pub dim: usize,
    /// `(sigma^T)^{-1}`, row-major.
    pub inv_t: Vec<f64>,
    /// `a^{-1} = (sigma sigma^T)^{-1}`, row-major.
    pub a_inv: Vec<f64>,
    /// One-norm condition estimate `||sigma||_1 ||sigma^{-1}||_1`.
    pub cond: f64,
}

fn one_norm(mat: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..d {
        let mut col = 0.0;
        for i in 0..d {
            col += mat[i * d + j].abs();
        }
        worst = worst.max(col);
    }
    worst
}

fn invert(mat: &[f64], d: usize) -> Option<Vec<f64>> {
    match d {
        1 => {
            if mat[0] == 0.0 {
                None
            } else {
                Some(vec![1.0 / mat[0]])
            }
        }
        2 => {
            let det = mat[0] * mat[3] - mat[1] * mat[2];
            if det == 0.0 || !det.is_finite() {
                None
            } else {
                Some(vec![mat[3] / det, -mat[1] / det, -mat[2] / det, mat[0] / det])
            }
        }
        _ => {
            let m = nalgebra::DMatrix::from_row_slice(d, d, mat);
            m.try_inverse()
                .map(|inv| inv.transpose().as_slice().to_vec())
        }
    }
}

impl SigmaInverse {
    /// Inverts `sigma` (row-major d x d), rejecting singular or severely ill
    /// conditioned matrices (one-norm condition estimate above 1e12).
    pub fn new(sigma: &[f64], d: usize) -> Result<Self> {
        if sigma.len() != d * d {
            return Err(Error::Config(format!(
                "diffusion matrix has {} entries, expected {}",
                sigma.len(),
                d * d
            )));
        }
        let inv = invert(sigma, d).ok_or_else(|| {
            Error::Numerical("diffusion matrix is singular".into())
        })?;
        let cond = one_norm(sigma, d) * one_norm(&inv, d);
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::Numerical(format!(
                "diffusion matrix ill conditioned (condition estimate {cond:.3e})"
            )));
        }
        let mut inv_t = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                inv_t[i * d + j] = inv[j * d + i];
            }
        }
        let mut a_inv = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += inv_t[i * d + k] * inv_t[j * d + k];
                }
                a_inv[i * d + j] = s;
            }
        }
        Ok(Self {
            dim: d,
            inv_t,
            a_inv,
            cond,
        })
    }

    /// Same as [`SigmaInverse::new`] but names the state where the matrix came
    /// from in the error.
    pub fn new_at(sigma: &[f64], d: usize, t: f64, x: &[f64]) -> Result<Self> {
        Self::new(sigma, d).map_err(|e| match e {
            Error::Numerical(_) => {
                let cond = invert(sigma, d)
                    .map(|inv| one_norm(sigma, d) * one_norm(&inv, d))
                    .unwrap_or(f64::INFINITY);
                Error::SingularDiffusion {
                    t,
                    x: x.to_vec(),
                    cond,
                }
            }
            other => other,
        })
    }

    /// Writes `(sigma^T)^{-1} v` into `out`.
    pub fn apply_inv_t(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.inv_t[i * d + j] * v[j];
            }
            out[i] = s;
        }
    }

    /// Writes the gradient weight `H1 = (sigma^T)^{-1} dW / h` into `out`.
    pub fn h1(&self, dw: &[f64], h: f64, out: &mut [f64]) {
        self.apply_inv_t(dw, out);
        for v in out.iter_mut() {
            *v /= h;
        }
    }

    /// Writes the Hessian weight
    /// `H2 = ((sigma^T)^{-1} dW ((sigma^T)^{-1} dW)^T - h a^{-1}) / h^2`
    /// into `out`, row-major.
    pub fn h2(&self, dw: &[f64], h: f64, out: &mut [f64]) {
        let d = self.dim;
        let mut u = vec![0.0; d];
        self.apply_inv_t(dw, &mut u);
        let h2 = h * h;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (u[i] * u[j] - h * self.a_inv[i * d + j]) / h2;
            }
        }
    }
}

/// The three derivative weights of one increment.
pub struct WeightTriple {
    pub h0: f64,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

/// Computes all three weights for one increment against the diffusion matrix
/// `sigma` (row-major d x d).
pub fn weights(sigma: &[f64], d: usize, dw: &[f64], h: f64) -> Result<WeightTriple> {
    let inv = SigmaInverse::new(sigma, d)?;
    let mut h1 = vec![0.0; d];
    let mut h2 = vec![0.0; d * d];
    inv.h1(dw, h, &mut h1);
    inv.h2(dw, h, &mut h2);
    Ok(WeightTriple { h0: 1.0, h1, h2 })
}

/// Gradient weight used by the two-step Hessian chain: identical to `H1`,
/// applied to a gradient-field sample rather than a value sample.
pub fn gradient_chain_weight(sigma: &[f64], d: usize, dw: &[f64], h: f64) -> Result<Vec<f64>> {
    let inv = SigmaInverse::new(sigma, d)?;
    let mut h1 = vec![0.0; d];
    inv.h1(dw, h, &mut h1);
    Ok(h1)
}
