//! Zero level set extraction from a signed value field: seeded rays walk
//! the gradient toward the interface and bisect the first sign change.
//! Used to read moving fronts out of solved value surfaces.

use crate::{Error, Result};

/// A signed field with a gradient, evaluated at one point. Solutions with
/// kept layers and plain closures both fit this shape.
pub type SignedField<'a> = &'a dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>;

/// Interface points recovered from a field, plus the rays that never found
/// a sign change. Unresolved rays are counted, never replaced by a guess.
#[derive(Clone, Debug)]
pub struct FrontExtraction {
    pub points: Vec<Vec<f64>>,
    pub unresolved: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn trace_ray(
    field: SignedField,
    seed: &[f64],
    tol: f64,
    step: f64,
    max_evals: usize,
) -> Result<Option<Vec<f64>>> {
    let mut budget = max_evals;
    let mut take = |x: &[f64]| -> Result<Option<(f64, Vec<f64>)>> {
        if budget == 0 {
            return Ok(None);
        }
        budget -= 1;
        field(x).map(Some)
    };
    let Some((mut v0, mut g0)) = take(seed)? else {
        return Ok(None);
    };
    if v0 == 0.0 {
        return Ok(Some(seed.to_vec()));
    }
    let mut x0 = seed.to_vec();
    loop {
        let gn = norm(&g0);
        if gn < 1e-12 {
            return Ok(None);
        }
        let scale = -v0.signum() / gn;
        let x1: Vec<f64> = x0
            .iter()
            .zip(&g0)
            .map(|(x, g)| x + step * scale * g)
            .collect();
        let Some((v1, g1)) = take(&x1)? else {
            return Ok(None);
        };
        if v1 == 0.0 {
            return Ok(Some(x1));
        }
        if v1.signum() != v0.signum() {
            let mut a = x0;
            let mut b = x1;
            let mut va = v0;
            loop {
                let gap: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
                if gap <= tol {
                    return Ok(Some(mid));
                }
                let Some((vm, _)) = take(&mid)? else {
                    return Ok(None);
                };
                if vm == 0.0 {
                    return Ok(Some(mid));
                }
                if vm.signum() == va.signum() {
                    a = mid;
                    va = vm;
                } else {
                    b = mid;
                }
            }
        }
        x0 = x1;
        v0 = v1;
        g0 = g1;
    }
}

/// Walks one ray per seed: downhill in `|field|` along the gradient until
/// the sign flips, then bisects that segment to within `tol`. Rays that
/// exhaust `max_evals` field evaluations, or stall on a vanishing
/// gradient, are reported as unresolved.
pub fn extract_zero_level(
    field: SignedField,
    seeds: &[Vec<f64>],
    tol: f64,
    step: f64,
    max_evals: usize,
) -> Result<FrontExtraction> {
    if !(tol > 0.0) || !(step > 0.0) {
        return Err(Error::Config(format!(
            "tolerance and march step must be positive, got {tol} and {step}"
        )));
    }
    if max_evals < 4 {
        return Err(Error::Config(format!(
            "at least 4 field evaluations per ray are needed, got {max_evals}"
        )));
    }
    let mut points = Vec::new();
    let mut unresolved = 0usize;
    for seed in seeds {
        match trace_ray(field, seed, tol, step, max_evals)? {
            Some(p) => points.push(p),
            None => unresolved += 1,
        }
    }
    Ok(FrontExtraction { points, unresolved })
}

/// Mean and standard deviation of the point distances to `center`.
pub fn radius_stats(points: &[Vec<f64>], center: &[f64]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::Numerical(
            "no interface points to take radius statistics over".into(),
        ));
    }
    let radii: Vec<f64> = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let n = radii.len() as f64;
    let mean = radii.iter().sum::<f64>() / n;
    let var = radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `count` seeds at uniform angles on a circle around a planar center.
pub fn circle_seeds(center: &[f64], radius: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    if center.len() != 2 {
        return Err(Error::Config(format!(
            "circle seeds need a planar center, got dimension {}",
            center.len()
        )));
    }
    if count == 0 || !(radius > 0.0) {
        return Err(Error::Config(
            "circle seeds need a positive radius and count".into(),
        ));
    }
    Ok((0..count)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / count as f64;
            vec![
                center[0] + radius * phi.cos(),
                center[1] + radius * phi.sin(),
            ]
        })
        .collect())
}

/// `count` seeds in a Fibonacci lattice on a sphere around a 3D center.
pub fn sphere_seeds(center: &[f64], radius: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    if center.len() != 3 {
        return Err(Error::Config(format!(
            "sphere seeds need a 3D center, got dimension {}",
            center.len()
        )));
    }
    if count == 0 || !(radius > 0.0) {
        return Err(Error::Config(
            "sphere seeds need a positive radius and count".into(),
        ));
    }
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    Ok((0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            vec![
                center[0] + radius * r * phi.cos(),
                center[1] + radius * r * phi.sin(),
                center[2] + radius * z,
            ]
        })
        .collect())
}

/// Planar initial profile of two unit disks centered at `(x, y) = (+-1.5, 0)`
/// joined by a slab `|y| <= 0.5`, signed positive inside.
pub fn two_disks_initial(x: &[f64]) -> f64 {
    let d_right = ((x[0] - 1.5) * (x[0] - 1.5) + x[1] * x[1]).sqrt();
    let d_left = ((x[0] + 1.5) * (x[0] + 1.5) + x[1] * x[1]).sqrt();
    let slab = (0.5 - x[1].abs()).min(1.5 - x[0].abs());
    (1.0 - d_right).max(1.0 - d_left).max(slab)
}

/// Gradient of [`two_disks_initial`], following the active branch of the
/// max. Zero on the sets where a distance degenerates.
pub fn two_disks_gradient(x: &[f64]) -> Vec<f64> {
    let d_right = ((x[0] - 1.5) * (x[0] - 1.5) + x[1] * x[1]).sqrt();
    let d_left = ((x[0] + 1.5) * (x[0] + 1.5) + x[1] * x[1]).sqrt();
    let slab_y = 0.5 - x[1].abs();
    let slab_x = 1.5 - x[0].abs();
    let candidates = [1.0 - d_right, 1.0 - d_left, slab_y.min(slab_x)];
    let best = candidates
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    match best {
        0 => {
            if d_right < 1e-12 {
                vec![0.0, 0.0]
            } else {
                vec![-(x[0] - 1.5) / d_right, -x[1] / d_right]
            }
        }
        1 => {
            if d_left < 1e-12 {
                vec![0.0, 0.0]
            } else {
                vec![-(x[0] + 1.5) / d_left, -x[1] / d_left]
            }
        }
        _ => {
            if slab_y <= slab_x {
                vec![0.0, -x[1].signum()]
            } else {
                vec![-x[0].signum(), 0.0]
            }
        }
    }
}
