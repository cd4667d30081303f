//! Named experiment recipes. Each one regenerates the data behind one figure
//! and returns its files in memory; the caller decides where they go.

use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{crlb_velocity, label_distribution, sample_estimates, NoiseModel};
use crate::baselines::MleCost;
use crate::config::{RunConfig, SimulationConfig};
use crate::congruence::{symmetric_moments_from_vencs, wrapped_diff, EncodingScheme};
use crate::container::{encode_container, encode_map, MapMeta, Sidecar};
use crate::covariance::SnrMatrix;
use crate::design::{base_venc, design_three_point};
use crate::error::{PromError, Result};
use crate::postprocess::{inject_swaps, prom_plus, VelocityField};
use crate::rng::{derive_seed, stream, tag};
use crate::simulation::{
    covariance_similarity, monte_carlo_rmse, rotation_phantom, velocity_grid, vessel_phantom, vessel_scores, Region,
    VoxelGroundTruth, VoxelSimulator,
};
use crate::voxel::{EstimatorId, EstimatorOptions, VoxelEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipeKind {
    Analyze,
    Simulate,
}

pub const RECIPES: [(&str, RecipeKind); 7] = [
    ("fig1", RecipeKind::Analyze),
    ("fig2", RecipeKind::Analyze),
    ("fig5", RecipeKind::Analyze),
    ("fig6", RecipeKind::Simulate),
    ("fig7", RecipeKind::Simulate),
    ("fig8", RecipeKind::Simulate),
    ("fig9", RecipeKind::Simulate),
];

pub fn recipe_kind(name: &str) -> Result<RecipeKind> {
    RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| *k)
        .ok_or_else(|| {
            let known: Vec<&str> = RECIPES.iter().map(|(n, _)| *n).collect();
            PromError::Validation(format!("unknown recipe '{name}' (known: {})", known.join(", ")))
        })
}

/// A file produced by a recipe, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOutput {
    pub artifacts: Vec<Artifact>,
    pub summary: Value,
}

/// Default vencs for the PRoM arm of the fig8 recipe: base `(6, 5)` scaled by 5.1242.
pub const FIG8_PROM_SCALE: f64 = 5.1242;

pub fn run_recipe(name: &str, cfg: &RunConfig, seed: u64) -> Result<RecipeOutput> {
    recipe_kind(name)?;
    let sim = cfg.simulation.clone().unwrap_or_default();
    let opts = EstimatorOptions {
        offset: cfg.offset,
        cov: cfg.covariance.cov_mode()?,
        grid_step: sim.grid_step,
        ..EstimatorOptions::default()
    };
    let seed = derive_seed(seed, tag(name));
    match name {
        "fig1" => fig1(&sim, &opts, seed),
        "fig2" => fig2(&sim, seed),
        "fig5" => fig5(&sim, seed),
        "fig6" => fig6(&sim, &opts, seed),
        "fig7" => fig7(&sim, &opts, seed),
        "fig8" => fig8(cfg, &sim, &opts, seed),
        "fig9" => fig9(cfg, &sim, &opts, seed),
        _ => unreachable!("checked by recipe_kind"),
    }
}

/// Three-point scheme from `[venc21, venc31, venc32]` with symmetric moments.
/// `venc21` must agree with the other two.
pub fn scheme_from_vencs(venc: &[f64]) -> Result<EncodingScheme> {
    let [v21, v31, v32] = venc else {
        return Err(PromError::Validation(format!(
            "venc needs [venc21, venc31, venc32], got {} values",
            venc.len()
        )));
    };
    let scheme = symmetric_moments_from_vencs(*v31, *v32)?;
    let got = scheme.vencs().values()[0];
    if (got - v21).abs() > 1e-6 * v21.abs() {
        return Err(PromError::Validation(format!(
            "venc21 = {v21} is inconsistent with venc31 and venc32 (which give {got})"
        )));
    }
    Ok(scheme)
}

fn scheme_or(sim: &SimulationConfig, default: &[f64]) -> Result<EncodingScheme> {
    match (&sim.gamma_m1, &sim.venc) {
        (Some(_), Some(_)) => Err(PromError::Validation("give venc or gamma_m1, not both".into())),
        (Some(m), None) => EncodingScheme::new(m.clone()),
        (None, Some(v)) => scheme_from_vencs(v),
        (None, None) => scheme_from_vencs(default),
    }
}

fn snr_or(sim: &SimulationConfig, default: &[f64]) -> Result<SnrMatrix> {
    match &sim.snr {
        Some(s) => Ok(s.clone()),
        None => SnrMatrix::per_encoding(default, 1),
    }
}

/// `[s21/2, s21, s21/2]`, one coil.
pub fn snr_for_s21(s21: f64) -> Result<SnrMatrix> {
    SnrMatrix::per_encoding(&[s21 / 2.0, s21, s21 / 2.0], 1)
}

fn velocities(sim: &SimulationConfig, lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    let [lo, hi] = sim.v_range.unwrap_or([lo, hi]);
    velocity_grid(lo, hi, sim.v_step.unwrap_or(step))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| PromError::io(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| PromError::io(format!("csv: {e}")))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(value).map_err(|e| PromError::io(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn artifact(name: &str, bytes: Vec<u8>) -> Artifact {
    Artifact {
        name: name.into(),
        bytes,
    }
}

/// MLE cost over one range for a single noisy voxel.
fn fig1(sim: &SimulationConfig, opts: &EstimatorOptions, seed: u64) -> Result<RecipeOutput> {
    let scheme = match (&sim.gamma_m1, &sim.venc) {
        (None, None) => EncodingScheme::new(vec![-PI / 20.0, PI / 70.0, PI / 20.0])?,
        _ => scheme_or(sim, &[])?,
    };
    let s = snr_or(sim, &[2.5, 5.0, 2.5])?;
    let v = sim.v.unwrap_or(0.0);
    let step = sim.grid_step.unwrap_or(0.01);
    let omega = scheme.vencs().unambiguous_range()?;
    let offset = opts.offset.unwrap_or(-omega / 2.0);

    let vs = VoxelSimulator::new(&scheme, &s)?;
    let mut rng = stream(seed, tag("recipe/fig1"), 0);
    let phi0 = rng.gen::<f64>() * 2.0 * PI;
    let mut y = vs.zeros();
    vs.fill(v, phi0, &mut rng, &mut y);
    let cost = MleCost::new(&y, &scheme, opts.mle_amplitudes)?;

    let n = (omega / step).round() as usize;
    if n < 3 {
        return Err(PromError::Validation(format!(
            "grid step {step} is too coarse for range {omega}"
        )));
    }
    let first = (offset / step).round();
    let grid: Vec<f64> = (0..n).map(|i| (first + i as f64) * step).collect();
    let c: Vec<f64> = grid.iter().map(|&x| cost.eval(x)).collect();
    // the cost is periodic in omega, so the ends are neighbours
    let is_min: Vec<bool> = (0..n)
        .map(|i| c[i] < c[(i + n - 1) % n] && c[i] < c[(i + 1) % n])
        .collect();
    let best = (0..n).min_by(|&a, &b| c[a].total_cmp(&c[b])).expect("n >= 3");
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| vec![num(grid[i]), num(c[i]), (is_min[i] as u8).to_string()])
        .collect();
    let minima: Vec<f64> = (0..n).filter(|&i| is_min[i]).map(|i| grid[i]).collect();
    Ok(RecipeOutput {
        artifacts: vec![artifact("fig1.csv", csv(&["v", "cost", "is_local_min"], &rows)?)],
        summary: json!({
            "v_true": v,
            "phi0": phi0,
            "omega": omega,
            "cost_at_truth": cost.eval(v),
            "global_min_v": grid[best],
            "global_min_cost": c[best],
            "local_minima": minima,
        }),
    })
}

/// Cosine similarity of the covariance models against the sample covariance.
fn fig2(sim: &SimulationConfig, seed: u64) -> Result<RecipeOutput> {
    let scheme = scheme_or(sim, &[15.0, 6.0, 10.0])?;
    let sweep = sim
        .s21
        .clone()
        .unwrap_or_else(|| (2..=20).map(|i| i as f64 * 0.5).collect());
    let draws = sim.trials.unwrap_or(100_000);
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &s21 in &sweep {
        let p = covariance_similarity(&scheme, &snr_for_s21(s21)?, draws, seed)?;
        rows.push(vec![num(s21), num(p.data_model), num(p.known_model), num(p.identity)]);
        points.push(json!({"s21": s21, "known_model": p.known_model}));
    }
    Ok(RecipeOutput {
        artifacts: vec![artifact(
            "fig2.csv",
            csv(&["s21", "sim_data_model", "sim_known_model", "sim_identity"], &rows)?,
        )],
        summary: json!({"draws": draws, "points": points}),
    })
}

/// Predicted mixture components and the histogram of PRoM estimates.
fn fig5(sim: &SimulationConfig, seed: u64) -> Result<RecipeOutput> {
    let scheme = scheme_or(sim, &[99.0, 18.0, 22.0])?;
    let omega = scheme.vencs().unambiguous_range()?;
    let sweep = sim.s21.clone().unwrap_or_else(|| vec![5.0, 10.0]);
    let trials = sim.trials.unwrap_or(100_000);
    let v = sim.v.unwrap_or(0.0);
    let width = sim.bin_width.unwrap_or(0.5);
    if !(width > 0.0 && width < omega) {
        return Err(PromError::Validation(format!("bad bin width {width}")));
    }
    let noise = sim.noise.unwrap_or(NoiseModel::Gaussian);
    let bins = (omega / width - 1e-9).ceil() as usize;
    let lo = -omega / 2.0;

    let (mut comp_rows, mut hist_rows, mut summary) = (Vec::new(), Vec::new(), Vec::new());
    for &s21 in &sweep {
        let s = snr_for_s21(s21)?;
        let dist = label_distribution(v, &s, &scheme, trials, derive_seed(seed, 1), noise)?;
        for c in &dist.components {
            let label: Vec<String> = c.x.iter().map(|x| x.to_string()).collect();
            comp_rows.push(vec![
                num(s21),
                label.join(" "),
                num(c.weight),
                num(c.center),
                num(c.variance.sqrt()),
            ]);
        }
        let est = sample_estimates(v, &s, &scheme, trials, derive_seed(seed, 2), noise)?;
        let mut counts = vec![0u64; bins];
        for x in est {
            let i = (((x - lo).rem_euclid(omega)) / width).floor() as usize;
            counts[i.min(bins - 1)] += 1;
        }
        for (i, &n) in counts.iter().enumerate() {
            hist_rows.push(vec![
                num(s21),
                num(lo + (i as f64 + 0.5) * width),
                n.to_string(),
                num(n as f64 / (trials as f64 * width)),
            ]);
        }
        summary.push(json!({"s21": s21, "components": dist.top(5)}));
    }
    Ok(RecipeOutput {
        artifacts: vec![
            artifact(
                "fig5_components.csv",
                csv(&["s21", "label", "weight", "center", "sd"], &comp_rows)?,
            ),
            artifact(
                "fig5_histogram.csv",
                csv(&["s21", "bin_center", "count", "density"], &hist_rows)?,
            ),
        ],
        summary: json!({"trials": trials, "omega": omega, "bin_width": width, "s21": summary}),
    })
}

fn rmse_curves(
    ids: &[EstimatorId],
    schemes: &[(EncodingScheme, SnrMatrix)],
    vs: &[f64],
    trials: u64,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .zip(schemes)
        .map(|(&id, (scheme, s))| {
            Ok(monte_carlo_rmse(id, scheme, s, vs, trials, seed, opts)?
                .into_iter()
                .map(|p| p.rmse)
                .collect())
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn curve_table(vs: &[f64], curves: &[Vec<f64>]) -> Vec<Vec<String>> {
    (0..vs.len())
        .map(|i| {
            std::iter::once(num(vs[i]))
                .chain(curves.iter().map(|c| num(c[i])))
                .collect()
        })
        .collect()
}

/// RMSE against true velocity for every estimator on one scheme.
fn fig6(sim: &SimulationConfig, opts: &EstimatorOptions, seed: u64) -> Result<RecipeOutput> {
    let scheme = scheme_or(sim, &[15.0, 6.0, 10.0])?;
    let s = snr_or(sim, &[10.0, 20.0, 10.0])?;
    let vs = velocities(sim, -30.0, 30.0, 0.5)?;
    let trials = sim.trials.unwrap_or(10_000);
    let ids = sim
        .estimators
        .clone()
        .unwrap_or_else(|| vec![EstimatorId::Prom, EstimatorId::Sdv, EstimatorId::Odv, EstimatorId::Nco]);
    let pairs = vec![(scheme, s); ids.len()];
    let curves = rmse_curves(&ids, &pairs, &vs, trials, seed, opts)?;
    let names: Vec<String> = ids.iter().map(|id| format!("rmse_{id}")).collect();
    let header: Vec<&str> = std::iter::once("v").chain(names.iter().map(|s| s.as_str())).collect();
    let means: serde_json::Map<String, Value> = ids
        .iter()
        .zip(&curves)
        .map(|(id, c)| (id.to_string(), json!(mean(c))))
        .collect();
    Ok(RecipeOutput {
        artifacts: vec![artifact("fig6.csv", csv(&header, &curve_table(&vs, &curves))?)],
        summary: json!({"trials": trials, "mean_rmse": means}),
    })
}

/// PRoM and grid MLE against the CRLB over SNR.
fn fig7(sim: &SimulationConfig, opts: &EstimatorOptions, seed: u64) -> Result<RecipeOutput> {
    let scheme = scheme_or(sim, &[15.0, 6.0, 10.0])?;
    let sweep = sim
        .s21
        .clone()
        .unwrap_or_else(|| vec![2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 15.0, 20.0]);
    let trials = sim.trials.unwrap_or(10_000);
    let v = sim.v.unwrap_or(0.0);
    let mle = VoxelEstimator::new(EstimatorId::Mle, &scheme, opts)?;
    let prom = VoxelEstimator::new(EstimatorId::Prom, &scheme, opts)?;
    let mut rows = Vec::new();
    for &s21 in &sweep {
        let s = snr_for_s21(s21)?;
        let crlb = crlb_velocity(&VoxelGroundTruth::from_snr(&s, v, 0.0)?, &scheme)?.sqrt();
        let r_mle = crate::simulation::monte_carlo_rmse_with(&mle, &scheme, &s, &[v], trials, seed)?[0].rmse;
        let r_prom = if matches!(opts.cov, crate::estimator::CovMode::Model(_)) {
            // the fixed covariance has to follow the sweep
            let o = EstimatorOptions {
                cov: crate::estimator::CovMode::Model(s.clone()),
                ..opts.clone()
            };
            monte_carlo_rmse(EstimatorId::Prom, &scheme, &s, &[v], trials, seed, &o)?[0].rmse
        } else {
            crate::simulation::monte_carlo_rmse_with(&prom, &scheme, &s, &[v], trials, seed)?[0].rmse
        };
        rows.push(vec![num(s21), num(crlb), num(r_mle), num(r_prom)]);
    }
    Ok(RecipeOutput {
        artifacts: vec![artifact(
            "fig7.csv",
            csv(&["s21", "crlb_sqrt", "rmse_mle", "rmse_prom"], &rows)?,
        )],
        summary: json!({"trials": trials, "v": v}),
    })
}

/// Designed PRoM acquisition against the ODV and SDV acquisitions.
fn fig8(cfg: &RunConfig, sim: &SimulationConfig, opts: &EstimatorOptions, seed: u64) -> Result<RecipeOutput> {
    let (prom_scheme, source) = if let Some(d) = &cfg.design {
        (design_three_point(d)?.scheme()?, "design")
    } else if sim.venc.is_some() || sim.gamma_m1.is_some() {
        (scheme_or(sim, &[])?, "config")
    } else {
        let b = base_venc(6, 5)?;
        let v: Vec<f64> = b.iter().map(|&x| x as f64 * FIG8_PROM_SCALE).collect();
        (scheme_from_vencs(&v)?, "default")
    };
    let prom_s = snr_or(sim, &[10.0, 20.0, 10.0])?;
    let flat = SnrMatrix::per_encoding(&[20.0, 20.0, 20.0], 1)?;
    let odv = scheme_from_vencs(&[150.0, 50.0, 75.0])?;
    let sdv = scheme_from_vencs(&[150.0, 60.0, 100.0])?;
    let vs = velocities(sim, -150.0, 150.0, 0.5)?;
    let trials = sim.trials.unwrap_or(10_000);
    let ids = [EstimatorId::Prom, EstimatorId::Odv, EstimatorId::Sdv];
    let pairs = [(prom_scheme.clone(), prom_s), (odv, flat.clone()), (sdv, flat)];
    let curves = rmse_curves(&ids, &pairs, &vs, trials, seed, opts)?;
    let m: Vec<f64> = curves.iter().map(|c| mean(c)).collect();
    Ok(RecipeOutput {
        artifacts: vec![artifact(
            "fig8.csv",
            csv(&["v", "rmse_prom", "rmse_odv", "rmse_sdv"], &curve_table(&vs, &curves))?,
        )],
        summary: json!({
            "trials": trials,
            "prom_venc": prom_scheme.vencs().values(),
            "prom_venc_source": source,
            "mean_rmse": {"prom": m[0], "odv": m[1], "sdv": m[2]},
            "reduction_vs_odv_percent": 100.0 * (1.0 - m[0] / m[1]),
            "reduction_vs_sdv_percent": 100.0 * (1.0 - m[0] / m[2]),
        }),
    })
}

/// Vessel phantom scores, one phantom container, and the PRoM+ sweep count
/// on a rotating disk with planted unwrapping errors.
fn fig9(cfg: &RunConfig, sim: &SimulationConfig, opts: &EstimatorOptions, seed: u64) -> Result<RecipeOutput> {
    let scheme = scheme_or(sim, &[60.0, 20.0, 30.0])?;
    let spec = sim.phantom.clone().unwrap_or_default();
    let realizations = sim.realizations.unwrap_or(16);
    let ids = sim
        .estimators
        .clone()
        .unwrap_or_else(|| vec![EstimatorId::Sdv, EstimatorId::Odv, EstimatorId::Prom]);
    let scores = vessel_scores(&spec, &scheme, &ids, opts, realizations, seed)?;
    let rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| {
            vec![
                s.estimator.to_string(),
                s.aliased.to_string(),
                s.failures.to_string(),
                num(s.rss_error),
                s.flow_voxels.to_string(),
                s.realizations.to_string(),
            ]
        })
        .collect();

    let ph = vessel_phantom(&spec, &scheme, derive_seed(seed, 0))?;
    let (ny, nx) = (ph.field.ny, ph.field.nx);
    let truth: Vec<Option<f64>> = ph
        .truth
        .iter()
        .zip(&ph.region)
        .map(|(&v, r)| (*r == Region::Flow).then_some(v))
        .collect();
    let voxel_rows: Vec<Vec<String>> = (0..ny * nx)
        .map(|p| {
            let region = match ph.region[p] {
                Region::Background => "background",
                Region::Static => "static",
                Region::Flow => "flow",
            };
            vec![
                (p / nx).to_string(),
                (p % nx).to_string(),
                region.into(),
                num(ph.truth[p]),
            ]
        })
        .collect();
    let sidecar = Sidecar::for_scheme(&scheme, cfg.offset, Some(derive_seed(seed, 0)), "fig9 vessel phantom");

    let pp = cfg.postprocess.unwrap_or_default();
    pp.validate()?;
    let rot_spec = sim.rotation.clone().unwrap_or_default();
    let rot_scheme = symmetric_moments_from_vencs(100.0, 500.0 / 3.0)?;
    let rot = rotation_phantom(&rot_spec, &rot_scheme, derive_seed(seed, 1))?;
    let est = VoxelEstimator::new(EstimatorId::Prom, &rot_scheme, &EstimatorOptions::default())?;
    let mut field = VelocityField::estimate(&est, &rot.field, pp.top_m, pp.mask_fraction)?;
    let planted = inject_swaps(&mut field, 0.01, derive_seed(seed, 2))?;
    let report = prom_plus(&field, pp.span, pp.lambda, pp.max_iter)?;
    let limit = rot_scheme
        .vencs()
        .values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let wrong = |f: &VelocityField| {
        f.velocities()
            .iter()
            .zip(&rot.truth)
            .zip(&rot.inside)
            .filter(|((v, t), &inside)| inside && v.is_some_and(|v| wrapped_diff(v, **t, f.omega).abs() > limit))
            .count()
    };

    let mut meta = MapMeta::new(ny, nx);
    meta.estimator = Some("truth".into());
    Ok(RecipeOutput {
        artifacts: vec![
            artifact(
                "fig9_summary.csv",
                csv(
                    &[
                        "estimator",
                        "aliased",
                        "failures",
                        "rss_error",
                        "flow_voxels",
                        "realizations",
                    ],
                    &rows,
                )?,
            ),
            artifact("vessel.cimg", encode_container(&ph.field)?),
            artifact("vessel.json", json_bytes(&sidecar)?),
            artifact("vessel_truth.f32", encode_map(&truth)),
            artifact("vessel_truth.json", json_bytes(&meta)?),
            artifact("vessel_voxels.csv", csv(&["y", "x", "region", "truth"], &voxel_rows)?),
        ],
        summary: json!({
            "scores": scores,
            "prom_plus": {
                "planted_errors": planted.len(),
                "aliased_before": wrong(&field),
                "aliased_after": wrong(&report.field),
                "iterations": report.iterations,
                "changes": report.changes,
                "converged": report.converged,
            },
        }),
    })
}
