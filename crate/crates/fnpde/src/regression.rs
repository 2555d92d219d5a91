//! Empirical conditional-expectation estimators: adaptive local-basis least
//! squares on an equal-count hypercube partition, and a Malliavin
//! integration-by-parts ratio estimator with exponential localization.
//!
//! The local-basis partition cuts each axis at empirical quantiles of the
//! sample cloud, fits an affine function per cell by ordinary least squares,
//! and merges cells that retain fewer than `d + 2` samples into a neighbor.
//! The partition and per-cell Gram factorizations depend only on the sample
//! positions, so one [`LocalBasisGeometry`] is shared by every response
//! fitted at the same time step.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::{Error, Result};

/// Partition configuration for the local-basis estimator.
#[derive(Clone, Debug)]
pub struct LocalBasisConfig {
    /// Number of equal-count cells along each axis.
    pub cells_per_axis: Vec<usize>,
}

/// Sample partition plus the response-independent pieces of the per-cell
/// least squares problems: cell cuts, merged groups, group centers, and
/// Cholesky factors of the centered Gram matrices.
#[derive(Debug)]
pub struct LocalBasisGeometry {
    dim: usize,
    n_samples: usize,
    cuts: Vec<Vec<f64>>,
    strides: Vec<usize>,
    cells_per_axis: Vec<usize>,
    group_of_cell: Vec<usize>,
    members: Vec<Vec<usize>>,
    centers: Vec<f64>,
    chol: Vec<Option<Vec<f64>>>,
    cond: Vec<f64>,
    bbox_lo: Vec<f64>,
    bbox_hi: Vec<f64>,
    points: Vec<f64>,
    merges: usize,
}

/// One fitted response surface over a shared geometry.
pub struct LocalBasisFit {
    geom: Arc<LocalBasisGeometry>,
    /// Per group: intercept followed by d slopes.
    coeffs: Vec<f64>,
    rss_per_group: Vec<f64>,
    /// Groups whose Gram matrix was rank deficient and fell back to the
    /// cell mean.
    pub fallback_groups: usize,
    /// Total residual sum of squares over the training samples.
    pub rss: f64,
}

fn lower_cholesky(gram: &[f64], d: usize) -> Option<Vec<f64>> {
    let scale = (0..d).map(|i| gram[i * d + i]).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return None;
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = gram[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= scale * 1e-24 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

impl LocalBasisGeometry {
    /// Builds the partition and Gram factorizations from a flat
    /// particle-major sample array.
    pub fn build(points: &[f64], dim: usize, cfg: &LocalBasisConfig) -> Result<Arc<Self>> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::Config(format!(
                "sample array of length {} does not split into dimension {dim} rows",
                points.len()
            )));
        }
        let n = points.len() / dim;
        if cfg.cells_per_axis.len() != dim || cfg.cells_per_axis.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "cells_per_axis must list {dim} positive counts, got {:?}",
                cfg.cells_per_axis
            )));
        }
        let min_count = dim + 2;
        if n < min_count {
            return Err(Error::Config(format!(
                "local basis fit needs at least {min_count} samples, got {n}"
            )));
        }

        let mut cuts = Vec::with_capacity(dim);
        let mut bbox_lo = vec![f64::INFINITY; dim];
        let mut bbox_hi = vec![f64::NEG_INFINITY; dim];
        for k in 0..dim {
            let mut coords: Vec<f64> = (0..n).map(|p| points[p * dim + k]).collect();
            coords.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample coordinate"));
            bbox_lo[k] = coords[0];
            bbox_hi[k] = coords[n - 1];
            let c = cfg.cells_per_axis[k];
            let axis_cuts: Vec<f64> = (1..c).map(|j| coords[j * n / c]).collect();
            cuts.push(axis_cuts);
        }
        let mut strides = vec![1usize; dim];
        for k in 1..dim {
            strides[k] = strides[k - 1] * cfg.cells_per_axis[k - 1];
        }
        let total_cells: usize = cfg.cells_per_axis.iter().product();

        let mut cell_particles: Vec<Vec<usize>> = vec![Vec::new(); total_cells];
        for p in 0..n {
            let mut cell = 0usize;
            for k in 0..dim {
                let x = points[p * dim + k];
                let bin = cuts[k].partition_point(|&c| c <= x);
                cell += bin * strides[k];
            }
            cell_particles[cell].push(p);
        }

        let mut parent: Vec<usize> = (0..total_cells).collect();
        fn find(parent: &mut [usize], mut c: usize) -> usize {
            while parent[c] != c {
                parent[c] = parent[parent[c]];
                c = parent[c];
            }
            c
        }
        let mut root_cells: Vec<Vec<usize>> = (0..total_cells).map(|c| vec![c]).collect();
        let mut root_counts: Vec<usize> =
            cell_particles.iter().map(|v| v.len()).collect();
        let mut live = total_cells;
        let mut merges = 0usize;
        while live > 1 {
            let mut deficient = None;
            for c in 0..total_cells {
                if parent[c] == c && root_counts[c] < min_count {
                    deficient = Some(c);
                    break;
                }
            }
            let Some(r) = deficient else { break };
            let mut target = None;
            'search: for &cell in &root_cells[r] {
                for k in 0..dim {
                    let digit = (cell / strides[k]) % cfg.cells_per_axis[k];
                    for delta in [-1isize, 1] {
                        let nd = digit as isize + delta;
                        if nd < 0 || nd as usize >= cfg.cells_per_axis[k] {
                            continue;
                        }
                        let neighbor =
                            (cell as isize + delta * strides[k] as isize) as usize;
                        let rn = find(&mut parent, neighbor);
                        if rn != r {
                            target = Some(rn);
                            break 'search;
                        }
                    }
                }
            }
            let Some(t) = target else { break };
            let (keep, drop) = if r < t { (r, t) } else { (t, r) };
            parent[drop] = keep;
            let moved = std::mem::take(&mut root_cells[drop]);
            root_cells[keep].extend(moved);
            root_cells[keep].sort_unstable();
            root_counts[keep] += root_counts[drop];
            root_counts[drop] = 0;
            live -= 1;
            merges += 1;
        }
        for c in 0..total_cells {
            if parent[c] == c && root_counts[c] < min_count {
                return Err(Error::Config(format!(
                    "local basis fit needs at least {min_count} samples per cell; \
                     {n} samples cannot fill the requested partition"
                )));
            }
        }

        let mut group_id = vec![usize::MAX; total_cells];
        let mut n_groups = 0usize;
        for c in 0..total_cells {
            if parent[c] == c {
                group_id[c] = n_groups;
                n_groups += 1;
            }
        }
        let mut group_of_cell = vec![0usize; total_cells];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for c in 0..total_cells {
            let g = group_id[find(&mut parent, c)];
            group_of_cell[c] = g;
        }
        for c in 0..total_cells {
            let g = group_of_cell[c];
            members[g].extend(cell_particles[c].iter().copied());
        }
        for m in members.iter_mut() {
            m.sort_unstable();
        }

        let mut centers = vec![0.0; n_groups * dim];
        let mut chol = Vec::with_capacity(n_groups);
        let mut cond = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let pts = &members[g];
            let inv = 1.0 / pts.len() as f64;
            for &p in pts {
                for k in 0..dim {
                    centers[g * dim + k] += points[p * dim + k] * inv;
                }
            }
            let mut gram = vec![0.0; dim * dim];
            for &p in pts {
                for i in 0..dim {
                    let di = points[p * dim + i] - centers[g * dim + i];
                    for j in 0..=i {
                        let dj = points[p * dim + j] - centers[g * dim + j];
                        gram[i * dim + j] += di * dj;
                    }
                }
            }
            for i in 0..dim {
                for j in i + 1..dim {
                    gram[i * dim + j] = gram[j * dim + i];
                }
            }
            match lower_cholesky(&gram, dim) {
                Some(l) => {
                    let dmax = (0..dim).map(|i| l[i * dim + i]).fold(0.0f64, f64::max);
                    let dmin = (0..dim)
                        .map(|i| l[i * dim + i])
                        .fold(f64::INFINITY, f64::min);
                    cond.push((dmax / dmin) * (dmax / dmin));
                    chol.push(Some(l));
                }
                None => {
                    cond.push(f64::INFINITY);
                    chol.push(None);
                }
            }
        }

        Ok(Arc::new(LocalBasisGeometry {
            dim,
            n_samples: n,
            cuts,
            strides,
            cells_per_axis: cfg.cells_per_axis.clone(),
            group_of_cell,
            members,
            centers,
            chol,
            cond,
            bbox_lo,
            bbox_hi,
            points: points.to_vec(),
            merges,
        }))
    }

    /// Group containing the query point; queries outside the sampled range
    /// land in the corresponding edge cell.
    pub fn locate(&self, x: &[f64]) -> usize {
        let mut cell = 0usize;
        for k in 0..self.dim {
            let bin = self.cuts[k].partition_point(|&c| c <= x[k]);
            cell += bin * self.strides[k];
        }
        self.group_of_cell[cell]
    }

    pub fn group_count(&self) -> usize {
        self.members.len()
    }

    /// Cell counts the partition was requested with, per axis.
    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells_per_axis
    }

    /// Number of cell merges performed to reach the minimum occupancy.
    /// Flat particle-major copy of the training points.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn merge_count(&self) -> usize {
        self.merges
    }

    pub fn sample_count(&self) -> usize {
        self.n_samples
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.len()).collect()
    }

    /// Fits one response vector by per-group ordinary least squares on the
    /// centered affine basis.
    pub fn fit(self: &Arc<Self>, y: &[f64]) -> Result<LocalBasisFit> {
        let d = self.dim;
        if y.len() != self.n_samples {
            return Err(Error::Config(format!(
                "response length {} does not match the {} samples",
                y.len(),
                self.n_samples
            )));
        }
        let n_groups = self.members.len();
        let mut coeffs = vec![0.0; n_groups * (d + 1)];
        let mut rss_per_group = vec![0.0; n_groups];
        let mut fallback_groups = 0usize;
        for g in 0..n_groups {
            let pts = &self.members[g];
            let inv = 1.0 / pts.len() as f64;
            let ybar: f64 = pts.iter().map(|&p| y[p]).sum::<f64>() * inv;
            let base = g * (d + 1);
            coeffs[base] = ybar;
            match &self.chol[g] {
                Some(l) => {
                    let mut rhs = vec![0.0; d];
                    for &p in pts {
                        let dy = y[p] - ybar;
                        for k in 0..d {
                            rhs[k] +=
                                (self.points[p * d + k] - self.centers[g * d + k]) * dy;
                        }
                    }
                    cholesky_solve(l, d, &mut rhs);
                    coeffs[base + 1..base + 1 + d].copy_from_slice(&rhs);
                }
                None => {
                    fallback_groups += 1;
                }
            }
            let mut rss = 0.0;
            for &p in pts {
                let mut fitted = coeffs[base];
                for k in 0..d {
                    fitted += coeffs[base + 1 + k]
                        * (self.points[p * d + k] - self.centers[g * d + k]);
                }
                let r = y[p] - fitted;
                rss += r * r;
            }
            rss_per_group[g] = rss;
        }
        let rss = rss_per_group.iter().sum();
        Ok(LocalBasisFit {
            geom: Arc::clone(self),
            coeffs,
            rss_per_group,
            fallback_groups,
            rss,
        })
    }
}

impl LocalBasisFit {
    /// Evaluates the fitted surface; queries outside the sampled bounding
    /// box are clamped onto it first.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let g = self.geom.locate(x);
        self.eval_in_group(g, x)
    }

    /// Evaluates within an already located group, so several fits sharing
    /// one geometry can reuse a single lookup per query.
    pub fn eval_in_group(&self, g: usize, x: &[f64]) -> f64 {
        let d = self.geom.dim;
        let base = g * (d + 1);
        let mut v = self.coeffs[base];
        for k in 0..d {
            let xc = x[k].clamp(self.geom.bbox_lo[k], self.geom.bbox_hi[k]);
            v += self.coeffs[base + 1 + k] * (xc - self.geom.centers[g * d + k]);
        }
        v
    }

    /// Slope vector of the affine piece covering `x`: the fitted gradient,
    /// constant within each group.
    pub fn gradient_at(&self, x: &[f64]) -> Vec<f64> {
        let g = self.geom.locate(x);
        let d = self.geom.dim;
        let base = g * (d + 1);
        self.coeffs[base + 1..base + 1 + d].to_vec()
    }

    pub fn geometry(&self) -> &Arc<LocalBasisGeometry> {
        &self.geom
    }

    /// Per-group diagnostics as CSV: sample count, Gram condition estimate,
    /// residual sum of squares, and whether the group fell back to its mean.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("group,samples,cond,rss,mean_only\n");
        for g in 0..self.geom.members.len() {
            let mean_only = self.geom.chol[g].is_none() as u8;
            out.push_str(&format!(
                "{g},{},{},{},{mean_only}\n",
                self.geom.members[g].len(),
                self.geom.cond[g],
                self.rss_per_group[g],
            ));
        }
        out
    }
}

/// Fits one response with a throwaway geometry.
pub fn fit_local_basis(
    points: &[f64],
    dim: usize,
    y: &[f64],
    cfg: &LocalBasisConfig,
) -> Result<LocalBasisFit> {
    LocalBasisGeometry::build(points, dim, cfg)?.fit(y)
}

/// Clamps an estimated value into `[-k, k]`.
pub fn truncate_estimate(value: f64, k: f64) -> f64 {
    debug_assert!(k >= 0.0);
    value.clamp(-k, k)
}

/// Malliavin integration-by-parts ratio estimator of `E[Y | X = q]` for one
/// Euler slice with constant diagonal diffusion.
///
/// Each sample contributes
/// `prod_k 1(X_k > q_k) exp(-eta_k (X_k - q_k)) * (dW_k / (sigma_k h) + eta_k)`
/// where `dW` is the Gaussian increment that positioned the slice; the
/// estimate is the ratio of the Y-weighted sum to the plain sum. The
/// exponential localization keeps the weights concentrated near the query at
/// the price of an O(1/eta) smoothing bias, which the default
/// `eta = 5 / sqrt(h)` turns into an O(sqrt(h)) term.
#[derive(Debug)]
pub struct MalliavinEstimator {
    dim: usize,
    n: usize,
    points: Vec<f64>,
    eta: Vec<f64>,
    weights: Vec<f64>,
    fallbacks: AtomicUsize,
}

impl MalliavinEstimator {
    /// The localization rate the solver uses when none is configured.
    pub fn default_eta(h: f64) -> f64 {
        5.0 / h.sqrt()
    }

    /// `points` are the slice positions, `increments` the Gaussian steps
    /// that produced them, both flat particle-major; `sigma_diag` holds the
    /// constant per-axis volatilities of that step.
    pub fn new(
        dim: usize,
        points: Vec<f64>,
        increments: &[f64],
        sigma_diag: &[f64],
        h: f64,
        eta: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::Config(format!(
                "the Malliavin estimator supports one and two dimensional slices, got {dim}"
            )));
        }
        if points.len() % dim != 0 || increments.len() != points.len() {
            return Err(Error::Config(
                "slice positions and increments must have matching particle counts".into(),
            ));
        }
        if sigma_diag.len() != dim || sigma_diag.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(
                "Malliavin estimator needs positive per-axis volatilities".into(),
            ));
        }
        if !(h > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        let eta = match eta {
            Some(e) => {
                if e.len() != dim || e.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Config(
                        "localization rates must be positive, one per axis".into(),
                    ));
                }
                e
            }
            None => vec![Self::default_eta(h); dim],
        };
        let n = points.len() / dim;
        let mut weights = vec![0.0; n];
        for p in 0..n {
            let mut w = 1.0;
            for k in 0..dim {
                w *= increments[p * dim + k] / (sigma_diag[k] * h) + eta[k];
            }
            weights[p] = w;
        }
        Ok(MalliavinEstimator {
            dim,
            n,
            points,
            eta,
            weights,
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    /// Queries where the localized denominator underflowed and the global
    /// mean was returned instead.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Estimates several responses at one query point, sharing the weight
    /// pass over the samples.
    pub fn estimate_many(&self, responses: &[&[f64]], q: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut den = 0.0;
        let mut num = vec![0.0; responses.len()];
        'particles: for p in 0..self.n {
            let mut theta = self.weights[p];
            for k in 0..d {
                let x = self.points[p * d + k];
                if x <= q[k] {
                    continue 'particles;
                }
                theta *= (-self.eta[k] * (x - q[k])).exp();
            }
            den += theta;
            for (r, y) in responses.iter().enumerate() {
                num[r] += y[p] * theta;
            }
        }
        if den.abs() < 1e-12 * self.n as f64 {
            self.fallbacks.fetch_add(1, Ordering::Relaxed);
            return responses
                .iter()
                .map(|y| y.iter().sum::<f64>() / self.n as f64)
                .collect();
        }
        num.into_iter().map(|v| v / den).collect()
    }

    pub fn estimate(&self, y: &[f64], q: &[f64]) -> f64 {
        self.estimate_many(&[y], q)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn gaussian_cloud(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn constant_response_recovered_exactly() {
        let pts = gaussian_cloud(500, 2, 1);
        let y = vec![3.7; 500];
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![3, 3],
        };
        let fit = fit_local_basis(&pts, 2, &y, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = [
                3.0 * rng.sample::<f64, _>(StandardNormal),
                3.0 * rng.sample::<f64, _>(StandardNormal),
            ];
            assert_abs_diff_eq!(fit.eval(&q), 3.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn affine_response_single_cell_recovered() {
        let pts = gaussian_cloud(200, 1, 3);
        let y: Vec<f64> = pts.iter().map(|x| 3.0 * x).collect();
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![1],
        };
        let fit = fit_local_basis(&pts, 1, &y, &cfg).unwrap();
        for &x in pts.iter().take(50) {
            assert_abs_diff_eq!(fit.eval(&[x]), 3.0 * x, epsilon = 1e-10);
        }
        assert!(fit.rss < 1e-18);
    }

    #[test]
    fn training_average_reproduces_global_mean() {
        let n = 2000;
        let pts = gaussian_cloud(n, 2, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..n)
            .map(|p| {
                (pts[2 * p].sin() + pts[2 * p + 1].powi(2)) * 0.5
                    + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![4, 4],
        };
        let fit = fit_local_basis(&pts, 2, &y, &cfg).unwrap();
        let mean_y: f64 = y.iter().sum::<f64>() / n as f64;
        let mean_fit: f64 = (0..n)
            .map(|p| fit.eval(&[pts[2 * p], pts[2 * p + 1]]))
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(mean_fit, mean_y, epsilon = 1e-10);
    }

    #[test]
    fn estimators_are_linear_in_the_response() {
        let n = 1000;
        let pts = gaussian_cloud(n, 1, 6);
        let incs: Vec<f64> = pts.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let y1: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y2: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let combo: Vec<f64> = y1
            .iter()
            .zip(&y2)
            .map(|(a, b)| 2.5 * a - 1.25 * b)
            .collect();
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![8],
        };
        let geom = LocalBasisGeometry::build(&pts, 1, &cfg).unwrap();
        let f1 = geom.fit(&y1).unwrap();
        let f2 = geom.fit(&y2).unwrap();
        let fc = geom.fit(&combo).unwrap();
        let mall = MalliavinEstimator::new(1, pts.clone(), &incs, &[1.0], 1.0, None).unwrap();
        for i in 0..21 {
            let q = [-2.0 + 0.2 * i as f64];
            assert_abs_diff_eq!(
                fc.eval(&q),
                2.5 * f1.eval(&q) - 1.25 * f2.eval(&q),
                epsilon = 1e-10
            );
            let got = mall.estimate_many(&[&y1, &y2, &combo], &q);
            assert_abs_diff_eq!(got[2], 2.5 * got[0] - 1.25 * got[1], epsilon = 1e-10);
        }
    }

    #[test]
    fn adding_a_constant_shifts_the_fit_by_that_constant() {
        let n = 1500;
        let pts = gaussian_cloud(n, 2, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let shifted: Vec<f64> = y.iter().map(|v| v + 4.25).collect();
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![4, 3],
        };
        let geom = LocalBasisGeometry::build(&pts, 2, &cfg).unwrap();
        let f = geom.fit(&y).unwrap();
        let fs = geom.fit(&shifted).unwrap();
        for i in 0..20 {
            let q = [-2.0 + 0.2 * i as f64, 1.8 - 0.2 * i as f64];
            assert_abs_diff_eq!(fs.eval(&q), f.eval(&q) + 4.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn deficient_cells_merge_into_neighbors() {
        let n = 40;
        let mut pts = Vec::with_capacity(2 * n);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..n {
            let t: f64 = rng.sample(StandardNormal);
            pts.push(t);
            pts.push(t + 0.01 * rng.sample::<f64, _>(StandardNormal));
        }
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![4, 4],
        };
        let geom = LocalBasisGeometry::build(&pts, 2, &cfg).unwrap();
        assert!(geom.merge_count() > 0);
        assert!(geom.group_count() < 16);
        let sizes = geom.group_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes.iter().all(|&s| s >= 4), "sizes: {sizes:?}");
        let y: Vec<f64> = (0..n).map(|p| pts[2 * p].cos()).collect();
        let fit = geom.fit(&y).unwrap();
        let mean_y: f64 = y.iter().sum::<f64>() / n as f64;
        let mean_fit: f64 = (0..n)
            .map(|p| fit.eval(&[pts[2 * p], pts[2 * p + 1]]))
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(mean_fit, mean_y, epsilon = 1e-10);
    }

    #[test]
    fn too_few_samples_for_the_partition_is_rejected() {
        let pts = gaussian_cloud(3, 2, 11);
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![1, 1],
        };
        let err = LocalBasisGeometry::build(&pts, 2, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn queries_outside_the_sampled_box_clamp_to_its_edge() {
        let pts = gaussian_cloud(300, 1, 12);
        let y: Vec<f64> = pts.iter().map(|x| x * x).collect();
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![5],
        };
        let fit = fit_local_basis(&pts, 1, &y, &cfg).unwrap();
        let hi = pts.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lo = pts.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        assert_eq!(fit.eval(&[hi + 10.0]), fit.eval(&[hi]));
        assert_eq!(fit.eval(&[lo - 25.0]), fit.eval(&[lo]));
    }

    fn sine_testbed(n: usize, noise: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| x.sin() + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (xs, ys)
    }

    #[test]
    fn sine_testbed_error_is_bias_plus_noise_sized() {
        let (xs, ys) = sine_testbed(100_000, 0.1, 13);
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![40],
        };
        let fit = fit_local_basis(&xs, 1, &ys, &cfg).unwrap();
        let mut interior = 0.0f64;
        let mut full = 0.0f64;
        for i in 0..=400 {
            let q = -2.0 + 4.0 * i as f64 / 400.0;
            let err = (fit.eval(&[q]) - q.sin()).abs();
            full = full.max(err);
            if q.abs() <= 1.9 {
                interior = interior.max(err);
            }
        }
        assert!(interior < 0.02, "interior max error {interior}");
        assert!(full < 0.09, "full range max error {full}");
    }

    #[test]
    fn sine_testbed_error_shrinks_like_root_n() {
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![40],
        };
        let mut log_errs = Vec::new();
        let mut log_ns = Vec::new();
        for (i, &n) in [1000usize, 10_000, 100_000].iter().enumerate() {
            let (xs, ys) = sine_testbed(n, 0.5, 14 + i as u64);
            let fit = fit_local_basis(&xs, 1, &ys, &cfg).unwrap();
            let mut sq = 0.0;
            let m = 191;
            for j in 0..m {
                let q = -1.9 + 3.8 * j as f64 / (m - 1) as f64;
                let e = fit.eval(&[q]) - q.sin();
                sq += e * e;
            }
            log_errs.push((sq / m as f64).sqrt().ln());
            log_ns.push((n as f64).ln());
        }
        let mean_x: f64 = log_ns.iter().sum::<f64>() / 3.0;
        let mean_y: f64 = log_errs.iter().sum::<f64>() / 3.0;
        let slope: f64 = log_ns
            .iter()
            .zip(&log_errs)
            .map(|(x, y)| (x - mean_x) * (y - mean_y))
            .sum::<f64>()
            / log_ns.iter().map(|x| (x - mean_x) * (x - mean_x)).sum::<f64>();
        let rate = -slope;
        assert!(
            (0.35..=0.65).contains(&rate),
            "sample-size convergence rate {rate}"
        );
    }

    #[test]
    fn default_localization_rate_value() {
        assert_abs_diff_eq!(
            MalliavinEstimator::default_eta(0.05),
            22.360679774997898,
            epsilon = 1e-12
        );
    }

    #[test]
    fn malliavin_constant_recovery_including_fallback() {
        let n = 2000;
        let h = 0.25f64;
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let incs: Vec<f64> = (0..n)
            .map(|_| h.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pts: Vec<f64> = incs.iter().map(|w| 2.0 * w).collect();
        let y = vec![-1.25; n];
        let est = MalliavinEstimator::new(1, pts, &incs, &[2.0], h, None).unwrap();
        for q in [-1.5, -0.3, 0.0, 0.8, 1.9] {
            assert_abs_diff_eq!(est.estimate(&y, &[q]), -1.25, epsilon = 1e-10);
        }
        assert_eq!(est.fallback_count(), 0);
        assert_abs_diff_eq!(est.estimate(&y, &[50.0]), -1.25, epsilon = 1e-12);
        assert_eq!(est.fallback_count(), 1);
    }

    #[test]
    fn malliavin_rejects_unsupported_dimension() {
        let err = MalliavinEstimator::new(
            3,
            vec![0.0; 30],
            &vec![0.0; 30],
            &[1.0, 1.0, 1.0],
            0.1,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn malliavin_matches_local_basis_on_the_sine_testbed() {
        let n = 300_000;
        let h = 0.01f64;
        let sigma = 1.0f64;
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let mut slice = Vec::with_capacity(n);
        let mut incs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x0: f64 = rng.sample(StandardNormal);
            let dw: f64 = h.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let x1 = x0 + sigma * dw;
            let dw_next: f64 = h.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let x2 = x1 + sigma * dw_next;
            let noise: f64 = 0.1 * rng.sample::<f64, _>(StandardNormal);
            slice.push(x1);
            incs.push(dw);
            ys.push(x2.sin() + noise);
        }
        let damp = (-0.5 * sigma * sigma * h).exp();
        let oracle = |q: f64| q.sin() * damp;
        let mall =
            MalliavinEstimator::new(1, slice.clone(), &incs, &[sigma], h, None).unwrap();
        let cfg = LocalBasisConfig {
            cells_per_axis: vec![40],
        };
        let lb = fit_local_basis(&slice, 1, &ys, &cfg).unwrap();
        let mut mall_err = 0.0f64;
        let mut cross = 0.0f64;
        let mut lb_err = 0.0f64;
        for i in 0..=100 {
            let q = -2.0 + 4.0 * i as f64 / 100.0;
            let m = mall.estimate(&ys, &[q]);
            mall_err = mall_err.max((m - oracle(q)).abs());
            if q.abs() <= 1.9 {
                let l = lb.eval(&[q]);
                lb_err = lb_err.max((l - oracle(q)).abs());
                cross = cross.max((m - l).abs());
            }
        }
        assert!(lb_err < 0.02, "local basis max error {lb_err}");
        assert!(mall_err < 0.04, "Malliavin max error {mall_err}");
        assert!(cross < 0.04, "between-estimator gap {cross}");
    }

    #[test]
    fn truncate_estimate_clamps_symmetrically() {
        assert_eq!(truncate_estimate(5.0, 2.0), 2.0);
        assert_eq!(truncate_estimate(-5.0, 2.0), -2.0);
        assert_eq!(truncate_estimate(1.3, 2.0), 1.3);
        assert_eq!(truncate_estimate(-2.0, 2.0), -2.0);
    }
}
