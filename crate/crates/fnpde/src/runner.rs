//! Turns a parsed configuration into concrete run artifacts.
//!
//! [`run_config`] resolves the preset, verifies that every key was
//! understood, executes the experiment, and returns the artifacts as
//! strings; [`write_report`] materializes them in an output directory.
//! Nothing time dependent is written into any artifact, so running the
//! recorded `metadata.kv` again reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ConfigMap;
use crate::frontprop::{circle_seeds, extract_zero_level, radius_stats, sphere_seeds};
use crate::nonlinearity::{check_domination, DominationReport, ProbePoint};
use crate::oracles::{linear_exact, sphere_radius, zariphopoulou_value};
use crate::presets::{
    resolve_preset, Heston2dPreset, Hjb5dPreset, LinearRatePreset, McfSpherePreset,
    McfTwoDisksPreset, Preset,
};
use crate::sde::{simulate_cloud, simulate_cloud_from, DiffusionSpec};
use crate::solver::{
    backward_solve_grid, backward_solve_particles, estimate_rate, ParticleSolution,
};
use crate::Result;

/// Everything a run produces, keyed for [`write_report`].
#[derive(Clone, Debug)]
pub struct RunReport {
    /// Resolved preset name.
    pub preset: String,
    /// Full configuration record, written as `metadata.kv`.
    pub metadata: String,
    /// Main result table, written as `results.csv`.
    pub results_csv: String,
    /// Per-step solver diagnostics, written as `diagnostics.csv`.
    pub diagnostics_csv: String,
    /// Additional named files (extracted surfaces, domination report).
    pub extras: Vec<(String, String)>,
    /// Headline numbers for the caller to echo.
    pub scalars: BTreeMap<String, f64>,
}

struct Artifacts {
    results: String,
    diagnostics: String,
    extras: Vec<(String, String)>,
    scalars: BTreeMap<String, f64>,
}

/// Resolves and executes the preset named by `cfg`.
///
/// Fails before any computation when a key is malformed, missing, or
/// unknown, so a failed run leaves nothing to write.
pub fn run_config(cfg: &mut ConfigMap) -> Result<RunReport> {
    let preset = resolve_preset(cfg)?;
    cfg.ensure_fully_used()?;
    let metadata = metadata_doc(preset.name(), cfg);
    let art = match &preset {
        Preset::LinearRate(p) => run_linear(p)?,
        Preset::McfSphere(p) => run_mcf_sphere(p)?,
        Preset::McfTwoDisks(p) => run_two_disks(p)?,
        Preset::Heston2d(p) => run_heston(p)?,
        Preset::Hjb5d(p) => run_hjb5d(p)?,
    };
    Ok(RunReport {
        preset: preset.name().to_string(),
        metadata,
        results_csv: art.results,
        diagnostics_csv: art.diagnostics,
        extras: art.extras,
        scalars: art.scalars,
    })
}

/// Writes the report's files under `out_dir`, creating it if needed, and
/// returns the paths written.
pub fn write_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut files: Vec<(&str, &str)> = vec![
        ("metadata.kv", report.metadata.as_str()),
        ("results.csv", report.results_csv.as_str()),
        ("diagnostics.csv", report.diagnostics_csv.as_str()),
    ];
    for (name, content) in &report.extras {
        files.push((name.as_str(), content.as_str()));
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, content) in files {
        let path = out_dir.join(name);
        fs::write(&path, content)?;
        written.push(path);
    }
    Ok(written)
}

fn metadata_doc(preset: &str, cfg: &ConfigMap) -> String {
    let body = cfg.serialize();
    let mut hasher = Sha256::new();
    hasher.update(body.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(hex, "{byte:02x}");
    }
    format!("# run record, preset {preset}\n# config sha256 {hex}\n{body}")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn domination_extra(
    op: &crate::nonlinearity::NonlinearOperator,
    spec: &DiffusionSpec,
    probes: &[ProbePoint],
    scalars: &mut BTreeMap<String, f64>,
) -> (String, String) {
    let report = check_domination(op, spec, probes);
    scalars.insert(
        "domination_passed".into(),
        if report.passed { 1.0 } else { 0.0 },
    );
    scalars.insert("worst_ellipticity".into(), report.worst_ellipticity);
    scalars.insert("worst_domination".into(), report.worst_domination);
    ("domination.csv".to_string(), domination_csv(&report))
}

fn domination_csv(report: &DominationReport) -> String {
    let mut out = String::from("probe,ellipticity,domination,m_f\n");
    for (i, o) in report.outcomes.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", o.ellipticity, o.domination, o.m_f);
    }
    let _ = writeln!(
        out,
        "worst,{},{},{}",
        report.worst_ellipticity, report.worst_domination, report.m_f
    );
    out
}

/// Smallest slack `K_i - sup |layer i|` over the clamped layers; negative
/// means some layer escaped its truncation bound.
fn k_slack(sol: &ParticleSolution) -> Option<f64> {
    if sol.k_bounds.is_empty() {
        return None;
    }
    let interior = sol.layer_sup.len().saturating_sub(1);
    sol.k_bounds
        .iter()
        .zip(&sol.layer_sup)
        .take(interior)
        .map(|(k, s)| k - s)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
}

fn run_linear(p: &LinearRatePreset) -> Result<Artifacts> {
    let spec = p.diffusion()?;
    let op = p.operator();
    let g = p.terminal();
    let gs = p.terminal_scalar();
    let grid = p.grid_config();
    let mut results = String::from("h,v_hat,v_exact,abs_err\n");
    let mut diagnostics =
        String::from("h,n_steps,clipped,queries_clamped,k_bound_root,layer_sup_root\n");
    let mut errs = Vec::with_capacity(p.hs.len());
    let exact = linear_exact(&gs, p.c, 0.0, p.x_probe, p.t_end)?;
    for &h in &p.hs {
        let cfg = p.solver_config(h);
        let sol = backward_solve_grid(&spec, &op, &g, &cfg, &grid)?;
        let v = sol.value_at(0, &[p.x_probe])?;
        let err = (v - exact).abs();
        let _ = writeln!(results, "{h},{v},{exact},{err}");
        let _ = writeln!(
            diagnostics,
            "{h},{},{},{},{},{}",
            cfg.n_steps()?,
            sol.clipped,
            sol.queries_clamped(),
            sol.k_bounds.first().copied().unwrap_or(f64::NAN),
            sol.layer_sup.first().copied().unwrap_or(f64::NAN),
        );
        errs.push(err);
    }
    let mut scalars = BTreeMap::new();
    let finest = p
        .hs
        .iter()
        .zip(&errs)
        .min_by(|a, b| a.0.total_cmp(b.0))
        .map(|(_, &e)| e)
        .unwrap_or(f64::NAN);
    scalars.insert("abs_err_finest".into(), finest);
    scalars.insert("v_exact".into(), exact);
    if p.hs.len() >= 3 {
        if let Ok(rate) = estimate_rate(&p.hs, &errs) {
            let _ = writeln!(results, "slope,{},,", rate.slope);
            scalars.insert("slope".into(), rate.slope);
        }
    }
    let probes = vec![ProbePoint {
        t: 0.0,
        x: vec![p.x_probe],
        r: 0.0,
        p: vec![1.0],
        gamma: vec![0.5],
    }];
    let mut extras = Vec::new();
    extras.push(domination_extra(&op, &spec, &probes, &mut scalars));
    Ok(Artifacts {
        results,
        diagnostics,
        extras,
        scalars,
    })
}

fn surface_csv(points: &[Vec<f64>], dim: usize) -> String {
    let mut out = String::new();
    for k in 0..dim {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "x{k}");
    }
    out.push('\n');
    for pt in points {
        for (k, v) in pt.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn layers_extra(sol: &ParticleSolution, h: f64) -> (String, String) {
    let mut out = String::from("layer,t,k_bound,layer_sup\n");
    for (i, s) in sol.layer_sup.iter().enumerate() {
        let k = sol.k_bounds.get(i).copied().unwrap_or(f64::NAN);
        let _ = writeln!(out, "{i},{},{k},{s}", i as f64 * h);
    }
    ("layers.csv".to_string(), out)
}

fn run_mcf_sphere(p: &McfSpherePreset) -> Result<Artifacts> {
    let spec = p.diffusion()?;
    let op = p.operator();
    let g = p.terminal();
    let gg = p.terminal_gradient();
    let cfg = p.solver_config();
    let n = cfg.n_steps()?;
    let cloud = simulate_cloud(&spec, &p.x0(), n, p.h, p.particles, p.seed)?;
    let sol = backward_solve_particles(
        &spec,
        &cloud,
        &op,
        &g,
        Some(&gg),
        &cfg,
        &p.backend_config()?,
    )?;

    let mut results = String::from(
        "flow_time,t,layer,radius_mean,radius_std,radius_ref,rel_err,points,unresolved\n",
    );
    let mut scalars = BTreeMap::new();
    let mut extras = Vec::new();
    let center = [0.0; 3];
    let steps = p.flow_steps()?;
    let mut unresolved_total = 0usize;
    for (&s, &layer) in p.flow_times.iter().zip(&steps) {
        let field = |x: &[f64]| sol.value_and_gradient_at(layer, x);
        let seeds = sphere_seeds(&center, p.seed_radius, p.rays)?;
        let ext = extract_zero_level(&field, &seeds, p.ray_tol, p.ray_step, p.max_evals)?;
        let (mean, std) = radius_stats(&ext.points, &center)?;
        let reference = sphere_radius(s, p.radius)?;
        let rel = (mean - reference).abs() / reference;
        let t = sol.time(layer);
        let _ = writeln!(
            results,
            "{s},{t},{layer},{mean},{std},{reference},{rel},{},{}",
            ext.points.len(),
            ext.unresolved
        );
        scalars.insert(format!("radius_mean_{s}"), mean);
        scalars.insert(format!("radius_ref_{s}"), reference);
        scalars.insert(format!("rel_err_{s}"), rel);
        unresolved_total += ext.unresolved;
        extras.push((format!("surface_{s}.csv"), surface_csv(&ext.points, 3)));
    }
    scalars.insert("unresolved_total".into(), unresolved_total as f64);
    if let Some(slack) = k_slack(&sol) {
        scalars.insert("k_slack_min".into(), slack);
    }
    extras.push(layers_extra(&sol, p.h));
    extras.push(domination_extra(
        &op,
        &spec,
        &sphere_probes(p),
        &mut scalars,
    ));
    Ok(Artifacts {
        results,
        diagnostics: sol.diagnostics_csv(),
        extras,
        scalars,
    })
}

fn sphere_probes(p: &McfSpherePreset) -> Vec<ProbePoint> {
    let g = p.terminal();
    [0.5, 1.0, 1.5]
        .iter()
        .map(|rho| {
            let u = rho * p.radius;
            let x = vec![0.8 * u, -0.5 * u, 0.6 * u];
            let grad: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
            let mut gamma = vec![0.0; 9];
            for k in 0..3 {
                gamma[k * 3 + k] = -2.0;
            }
            ProbePoint {
                t: 0.0,
                x: x.clone(),
                r: g(&x),
                p: grad,
                gamma,
            }
        })
        .collect()
}

fn run_two_disks(p: &McfTwoDisksPreset) -> Result<Artifacts> {
    let spec = p.diffusion()?;
    let op = p.operator();
    let g = p.terminal();
    let gg = p.terminal_gradient();
    let cfg = p.solver_config();
    let n = cfg.n_steps()?;
    let cloud = simulate_cloud_from(&spec, &p.cloud_start(), n, p.h, p.particles, p.seed)?;
    let sol = backward_solve_particles(
        &spec,
        &cloud,
        &op,
        &g,
        Some(&gg),
        &cfg,
        &p.backend_config()?,
    )?;

    let mut results = String::from(
        "flow_time,t,layer,points,unresolved,x_extent,neck_halfwidth\n",
    );
    let mut scalars = BTreeMap::new();
    let mut extras = Vec::new();
    let center = [0.0; 2];
    let steps = p.flow_steps()?;
    let mut unresolved_total = 0usize;
    for (&s, &layer) in p.flow_times.iter().zip(&steps) {
        let field = |x: &[f64]| sol.value_and_gradient_at(layer, x);
        let seeds = circle_seeds(&center, p.seed_radius, p.rays)?;
        let ext = extract_zero_level(&field, &seeds, p.ray_tol, p.ray_step, p.max_evals)?;
        let x_extent = ext
            .points
            .iter()
            .map(|pt| pt[0].abs())
            .fold(f64::NAN, f64::max);
        let neck = ext
            .points
            .iter()
            .filter(|pt| pt[0].abs() <= 0.3)
            .map(|pt| pt[1].abs())
            .fold(f64::NAN, f64::min);
        let t = sol.time(layer);
        let _ = writeln!(
            results,
            "{s},{t},{layer},{},{},{x_extent},{neck}",
            ext.points.len(),
            ext.unresolved
        );
        scalars.insert(format!("x_extent_{s}"), x_extent);
        scalars.insert(format!("neck_halfwidth_{s}"), neck);
        unresolved_total += ext.unresolved;
        extras.push((format!("surface_{s}.csv"), surface_csv(&ext.points, 2)));
    }
    scalars.insert("unresolved_total".into(), unresolved_total as f64);
    if let Some(slack) = k_slack(&sol) {
        scalars.insert("k_slack_min".into(), slack);
    }
    extras.push(layers_extra(&sol, p.h));
    extras.push(domination_extra(
        &op,
        &spec,
        &two_disks_probes(p),
        &mut scalars,
    ));
    Ok(Artifacts {
        results,
        diagnostics: sol.diagnostics_csv(),
        extras,
        scalars,
    })
}

fn two_disks_probes(p: &McfTwoDisksPreset) -> Vec<ProbePoint> {
    let g = p.terminal();
    let gg = p.terminal_gradient();
    [[0.8, 0.2], [0.0, 0.3], [2.0, 0.0], [1.5, 0.7]]
        .iter()
        .map(|x| {
            let x = x.to_vec();
            ProbePoint {
                t: 0.0,
                r: g(&x),
                p: gg(&x),
                gamma: vec![-1.0, 0.0, 0.0, -1.0],
                x,
            }
        })
        .collect()
}

fn run_heston(p: &Heston2dPreset) -> Result<Artifacts> {
    let spec = p.diffusion()?;
    let op = p.operator();
    let g = p.terminal();
    let gg = p.terminal_gradient();
    let x0 = p.x0();
    let backend = p.backend_config();
    let mut results = String::from("label,value\n");
    let mut diagnostics = String::from(
        "seed_index,step,t,groups,merged_cells,mean_fallbacks,value_rss,clipped,k_bound,layer_sup\n",
    );
    let mut scalars = BTreeMap::new();
    let mut values = Vec::with_capacity(p.n_seeds);
    let mut slack: Option<f64> = None;
    for (i, seed) in p.seeds().into_iter().enumerate() {
        let cfg = p.solver_config(seed);
        let n = cfg.n_steps()?;
        let cloud = simulate_cloud(&spec, &x0, n, p.h, p.particles, seed)?;
        let sol = backward_solve_particles(&spec, &cloud, &op, &g, Some(&gg), &cfg, &backend)?;
        let _ = writeln!(results, "seed_{i},{}", sol.root_value);
        values.push(sol.root_value);
        append_step_diagnostics(&mut diagnostics, i, &sol);
        if let Some(v) = k_slack(&sol) {
            slack = Some(slack.map_or(v, |a: f64| a.min(v)));
        }
    }
    let (mean, std) = mean_std(&values);
    let _ = writeln!(results, "mean,{mean}");
    let _ = writeln!(results, "std,{std}");
    scalars.insert("mean".into(), mean);
    scalars.insert("std".into(), std);
    if let Some(v) = slack {
        scalars.insert("k_slack_min".into(), v);
    }
    let reference = zariphopoulou_value(&p.reference_inputs())?;
    let _ = writeln!(results, "reference,{}", reference.value);
    scalars.insert("reference_value".into(), reference.value);
    scalars.insert(
        "reference_guarded_steps".into(),
        reference.guarded_steps as f64,
    );
    let mut extras = Vec::new();
    extras.push(domination_extra(
        &op,
        &spec,
        &heston_probes(p),
        &mut scalars,
    ));
    Ok(Artifacts {
        results,
        diagnostics,
        extras,
        scalars,
    })
}

fn append_step_diagnostics(out: &mut String, seed_index: usize, sol: &ParticleSolution) {
    for s in &sol.steps {
        let k = sol.k_bounds.get(s.step).copied().unwrap_or(f64::NAN);
        let sup = sol.layer_sup.get(s.step).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{seed_index},{},{},{},{},{},{},{},{k},{sup}",
            s.step, s.t, s.groups, s.merged_cells, s.mean_fallbacks, s.value_rss, s.clipped
        );
    }
}

fn heston_probes(p: &Heston2dPreset) -> Vec<ProbePoint> {
    let scale = (-p.eta * p.x0).exp();
    [0.0, 0.5 * p.t_end]
        .iter()
        .map(|&t| ProbePoint {
            t,
            x: vec![p.x0, p.y0],
            r: -scale,
            p: vec![p.eta * scale, 0.02 * scale],
            gamma: vec![-p.eta * p.eta * scale, 0.0, 0.0, 0.01 * scale],
        })
        .collect()
}

fn run_hjb5d(p: &Hjb5dPreset) -> Result<Artifacts> {
    let spec = p.diffusion()?;
    let op = p.operator();
    let g = p.terminal();
    let gg = p.terminal_gradient();
    let x0 = p.x0();
    let backend = p.backend_config();
    let mut results = String::from("label,value\n");
    let mut diagnostics = String::from(
        "seed_index,step,t,groups,merged_cells,mean_fallbacks,value_rss,clipped,k_bound,layer_sup\n",
    );
    let mut scalars = BTreeMap::new();
    let mut values = Vec::with_capacity(p.n_seeds);
    let mut slack: Option<f64> = None;
    for (i, seed) in p.seeds().into_iter().enumerate() {
        let cfg = p.solver_config(seed);
        let n = cfg.n_steps()?;
        let cloud = simulate_cloud(&spec, &x0, n, p.h, p.particles, seed)?;
        let sol = backward_solve_particles(&spec, &cloud, &op, &g, Some(&gg), &cfg, &backend)?;
        let _ = writeln!(results, "seed_{i},{}", sol.root_value);
        values.push(sol.root_value);
        append_step_diagnostics(&mut diagnostics, i, &sol);
        if let Some(v) = k_slack(&sol) {
            slack = Some(slack.map_or(v, |a: f64| a.min(v)));
        }
    }
    let (mean, std) = mean_std(&values);
    let _ = writeln!(results, "mean,{mean}");
    let _ = writeln!(results, "std,{std}");
    scalars.insert("mean".into(), mean);
    scalars.insert("std".into(), std);
    if let Some(v) = slack {
        scalars.insert("k_slack_min".into(), v);
    }
    let mut extras = Vec::new();
    extras.push(domination_extra(
        &op,
        &spec,
        &hjb5d_probes(p),
        &mut scalars,
    ));
    Ok(Artifacts {
        results,
        diagnostics,
        extras,
        scalars,
    })
}

fn hjb5d_probes(p: &Hjb5dPreset) -> Vec<ProbePoint> {
    let scale = (-p.eta * p.w0).exp();
    let mut gamma = vec![0.0; 25];
    gamma[0] = -p.eta * p.eta * scale;
    gamma[2] = 0.05 * scale;
    gamma[10] = 0.05 * scale;
    let mut grad = vec![0.0; 5];
    grad[0] = p.eta * scale;
    vec![ProbePoint {
        t: 0.5 * p.t_end,
        x: p.x0(),
        r: -scale,
        p: grad,
        gamma,
    }]
}
