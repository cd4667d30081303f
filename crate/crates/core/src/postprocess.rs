//! PRoM+: spatial clean-up of a PRoM velocity map.
//!
//! Each voxel keeps its few most likely candidates. A local quadratic
//! (loess) surface is fitted to the currently selected velocities, then every
//! voxel re-selects the candidate minimizing `nll + lambda (v_k - u)^2`. The
//! two steps alternate until no selection changes. Candidate values are never
//! modified, only which one is picked.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PromError, Result};
use crate::estimator::{CandidateSolution, PromResult};
use crate::measurement::MeasurementField;
use crate::rng::{stream, tag};
use crate::voxel::VoxelEstimator;

/// Candidate list and current pick of one voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelCandidates {
    /// Sorted by `nll`; empty for masked voxels.
    pub candidates: Vec<CandidateSolution>,
    pub selected: usize,
}

impl VoxelCandidates {
    pub fn velocity(&self) -> Option<f64> {
        self.candidates.get(self.selected).map(|c| c.v_hat)
    }
}

/// A 2D PRoM map, x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub ny: usize,
    pub nx: usize,
    /// Voxel spacing `(dy, dx)`; only ratios matter for the fit.
    pub spacing: (f64, f64),
    pub voxels: Vec<VoxelCandidates>,
    pub magnitude: Vec<f64>,
    /// `true` where the voxel takes part.
    pub mask: Vec<bool>,
    pub omega: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromPlusOptions {
    /// Fraction of the unmasked voxels in each local fit.
    pub span: f64,
    pub lambda: f64,
    pub max_iter: usize,
    /// Candidates kept per voxel.
    pub top_m: usize,
    /// Voxels below this fraction of the largest magnitude are masked.
    pub mask_fraction: f64,
}

impl Default for PromPlusOptions {
    fn default() -> Self {
        Self {
            span: 0.25,
            lambda: 1.0,
            max_iter: 10,
            top_m: 2,
            mask_fraction: 0.3,
        }
    }
}

impl PromPlusOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(PromError::Validation(format!(
                "span must lie in (0, 1], got {}",
                self.span
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PromError::Validation(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.max_iter == 0 || self.top_m == 0 {
            return Err(PromError::Validation("max_iter and top_m must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(PromError::Validation(format!(
                "mask_fraction must lie in [0, 1], got {}",
                self.mask_fraction
            )));
        }
        Ok(())
    }
}

impl VelocityField {
    /// Builds a field from per-voxel PRoM results. Voxels with no result or
    /// below `mask_fraction` of the largest magnitude are masked.
    pub fn from_results(
        ny: usize,
        nx: usize,
        results: Vec<Option<PromResult>>,
        magnitude: Vec<f64>,
        top_m: usize,
        mask_fraction: f64,
        omega: f64,
        offset: f64,
    ) -> Result<Self> {
        if results.len() != ny * nx || magnitude.len() != ny * nx {
            return Err(PromError::Dimension(format!(
                "{} results and {} magnitudes for a {ny}x{nx} map",
                results.len(),
                magnitude.len()
            )));
        }
        let peak = magnitude.iter().copied().fold(0.0, f64::max);
        let mut mask = Vec::with_capacity(ny * nx);
        let voxels = results
            .into_iter()
            .zip(&magnitude)
            .map(|(r, &m)| {
                let keep = r.is_some() && m >= mask_fraction * peak && m > 0.0;
                mask.push(keep);
                VoxelCandidates {
                    candidates: match r {
                        Some(r) if keep => r.candidates.into_iter().take(top_m).collect(),
                        _ => Vec::new(),
                    },
                    selected: 0,
                }
            })
            .collect();
        Ok(Self {
            ny,
            nx,
            spacing: (1.0, 1.0),
            voxels,
            magnitude,
            mask,
            omega,
            offset,
        })
    }

    /// Runs PRoM on every voxel of `data`.
    pub fn estimate(est: &VoxelEstimator, data: &MeasurementField, top_m: usize, mask_fraction: f64) -> Result<Self> {
        let results: Vec<Option<PromResult>> = (0..data.num_voxels())
            .into_par_iter()
            .map(|p| est.prom_full(&data.voxel(p)).ok())
            .collect();
        Self::from_results(
            data.ny,
            data.nx,
            results,
            data.combined_magnitudes(),
            top_m,
            mask_fraction,
            est.omega(),
            est.offset(),
        )
    }

    pub fn len(&self) -> usize {
        self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Selected velocity per voxel, `None` where masked.
    pub fn velocities(&self) -> Vec<Option<f64>> {
        self.voxels
            .iter()
            .zip(&self.mask)
            .map(|(v, &m)| if m { v.velocity() } else { None })
            .collect()
    }

    fn coords(&self, p: usize) -> (f64, f64) {
        (
            (p / self.nx) as f64 * self.spacing.0,
            (p % self.nx) as f64 * self.spacing.1,
        )
    }
}

/// Loess surface at every voxel from the selected velocities, degree 2 with
/// tricube weights over the `ceil(span N)` nearest unmasked voxels. `None`
/// where the voxel is masked or the local fit is underdetermined.
pub fn loess_quadratic_fit(field: &VelocityField, span: f64) -> Result<Vec<Option<f64>>> {
    if !(span > 0.0 && span <= 1.0) {
        return Err(PromError::InvalidArgument(format!(
            "span must lie in (0, 1], got {span}"
        )));
    }
    let values = field.velocities();
    let active: Vec<(f64, f64, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(p, v)| {
            v.map(|v| {
                let (y, x) = field.coords(p);
                (y, x, v)
            })
        })
        .collect();
    let k = ((span * active.len() as f64).ceil() as usize).min(active.len());
    Ok((0..field.len())
        .into_par_iter()
        .map(|p| {
            values[p]?;
            let (y0, x0) = field.coords(p);
            local_quadratic(&active, k, y0, x0)
        })
        .collect())
}

fn local_quadratic(points: &[(f64, f64, f64)], k: usize, y0: f64, x0: f64) -> Option<f64> {
    if k < 6 {
        return None;
    }
    let mut near: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, &(y, x, _))| ((y - y0).powi(2) + (x - x0).powi(2), i))
        .collect();
    if k < near.len() {
        near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        near.truncate(k);
    }
    let dmax = near.iter().map(|n| n.0).fold(0.0, f64::max).sqrt();
    if dmax == 0.0 {
        return None;
    }
    let radius = dmax;
    let mut a = DMatrix::<f64>::zeros(6, 6);
    let mut b = DVector::<f64>::zeros(6);
    let mut used = 0;
    for &(d2, i) in &near {
        let r = d2.sqrt() / radius;
        let w = (1.0 - r * r * r).powi(3);
        if w <= 0.0 {
            continue;
        }
        used += 1;
        let (y, x, v) = points[i];
        let (dy, dx) = ((y - y0) / radius, (x - x0) / radius);
        let basis = [1.0, dx, dy, dx * dx, dx * dy, dy * dy];
        for r in 0..6 {
            b[r] += w * basis[r] * v;
            for c in 0..6 {
                a[(r, c)] += w * basis[r] * basis[c];
            }
        }
    }
    if used < 6 {
        return None;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        // points on a line or conic: the quadratic is not identified
        return None;
    }
    svd.solve(&b, 0.0).ok().map(|c| c[0])
}

/// Outcome of [`prom_plus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromPlusReport {
    pub field: VelocityField,
    /// Sweeps run, counting the last one that changed nothing.
    pub iterations: usize,
    pub converged: bool,
    /// Selections changed in each sweep.
    pub changes: Vec<usize>,
    /// Objective after each fit and after each re-selection.
    pub cost_trace: Vec<f64>,
}

/// `sum nll + lambda (v - u)^2` over voxels with a surface value.
pub fn objective(field: &VelocityField, surface: &[Option<f64>], lambda: f64) -> f64 {
    field
        .voxels
        .iter()
        .zip(&field.mask)
        .zip(surface)
        .filter(|((_, &m), _)| m)
        .filter_map(|((v, _), u)| {
            let c = v.candidates.get(v.selected)?;
            Some(c.nll + u.map_or(0.0, |u| lambda * (c.v_hat - u).powi(2)))
        })
        .sum()
}

/// Re-selects every unmasked voxel against a fixed surface. Returns the
/// number of changed selections. Ties keep the current pick.
pub fn reselect(field: &mut VelocityField, surface: &[Option<f64>], lambda: f64) -> usize {
    field
        .voxels
        .par_iter_mut()
        .zip(field.mask.par_iter())
        .zip(surface.par_iter())
        .map(|((v, &m), u)| {
            if !m || v.candidates.is_empty() {
                return 0;
            }
            let lam = if u.is_some() { lambda } else { 0.0 };
            let u = u.unwrap_or(0.0);
            let cost = |c: &CandidateSolution| c.nll + lam * (c.v_hat - u).powi(2);
            let mut best = v.selected;
            let mut best_cost = cost(&v.candidates[best]);
            for (i, c) in v.candidates.iter().enumerate() {
                let ci = cost(c);
                if ci < best_cost {
                    best = i;
                    best_cost = ci;
                }
            }
            let changed = (best != v.selected) as usize;
            v.selected = best;
            changed
        })
        .sum()
}

pub fn prom_plus(field: &VelocityField, span: f64, lambda: f64, max_iter: usize) -> Result<PromPlusReport> {
    if max_iter == 0 {
        return Err(PromError::InvalidArgument("max_iter must be positive".into()));
    }
    let mut field = field.clone();
    let mut changes = Vec::new();
    let mut cost_trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let u = loess_quadratic_fit(&field, span)?;
        cost_trace.push(objective(&field, &u, lambda));
        let n = reselect(&mut field, &u, lambda);
        cost_trace.push(objective(&field, &u, lambda));
        changes.push(n);
        if n == 0 {
            converged = true;
            break;
        }
    }
    Ok(PromPlusReport {
        iterations: changes.len(),
        field,
        converged,
        changes,
        cost_trace,
    })
}

/// Plants unwrapping errors: in `ceil(fraction * n)` of the `n` unmasked
/// voxels with at least two candidates, the first two candidates trade
/// velocities and wrap vectors while the nll values stay in place, so the
/// wrong velocity becomes the most likely one. Returns the voxels touched.
pub fn inject_swaps(field: &mut VelocityField, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PromError::InvalidArgument(format!(
            "fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let eligible: Vec<usize> = (0..field.len())
        .filter(|&p| field.mask[p] && field.voxels[p].candidates.len() >= 2)
        .collect();
    let n = ((fraction * eligible.len() as f64).ceil() as usize).min(eligible.len());
    let mut rng = stream(seed, tag("postprocess/inject"), 0);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    for &p in &picked {
        let c = &mut field.voxels[p].candidates;
        let (a, b) = c.split_at_mut(1);
        std::mem::swap(&mut a[0].v_hat, &mut b[0].v_hat);
        std::mem::swap(&mut a[0].k, &mut b[0].k);
        field.voxels[p].selected = 0;
    }
    Ok(picked)
}
