//! Comparison estimators: standard dual-venc (SDV), optimal dual-venc (ODV),
//! magnitude-weighted dual-venc cost (NCO) and the grid MLE on complex data.
//!
//! The grid estimators return the first grid point attaining the minimum.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::congruence::{wrap_to_range, EncodingScheme, VencSet};
use crate::error::{PromError, Result};
use crate::measurement::MeasurementMatrix;

/// Grid `lo, lo + step, ...` strictly below `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(PromError::InvalidArgument(format!(
                "grid needs lo < hi, got [{lo}, {hi})"
            )));
        }
        if !(step > 0.0 && step <= hi - lo) {
            return Err(PromError::InvalidArgument(format!(
                "grid step {step} outside (0, {}]",
                hi - lo
            )));
        }
        Ok(Self { lo, hi, step })
    }

    /// One unambiguous range from `offset`, step `min(venc) / 1000`.
    pub fn for_range(vencs: &VencSet, offset: f64) -> Result<Self> {
        let omega = vencs.unambiguous_range()?;
        let vmin = vencs.values().iter().copied().fold(f64::INFINITY, f64::min);
        Self::new(offset, offset + omega, vmin / 1000.0)
    }

    pub fn len(&self) -> usize {
        let n = ((self.hi - self.lo) / self.step - 1e-9).ceil();
        n.max(1.0) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// First index of the minimum; NaNs never win.
pub fn grid_argmin(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.map_or(!v.is_nan(), |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best
}

fn three_point(vencs: &VencSet) -> Result<(f64, f64, f64)> {
    vencs.three_point().map_err(|_| {
        PromError::UnsupportedGeometry(format!(
            "dual-venc baselines need three encodings, got {} pairs",
            vencs.len()
        ))
    })
}

/// Which reading of the SDV unwrapping rule to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdvMode {
    /// Unwrap the low-venc measurement by the rounded ratio.
    #[default]
    Corrected,
    /// The four-window rule taken literally, returning the high-venc value.
    AsPrinted,
}

/// SDV on three-point data; `v_tilde` in canonical order, each in `[0, 2 venc)`.
/// The pair measurements are first moved to the symmetric intervals
/// `[-venc, venc)`, so the estimate lives around `[-venc21, venc21)`.
pub fn sdv_estimate(v_tilde: &[f64], vencs: &VencSet, mode: SdvMode) -> Result<f64> {
    let (venc21, venc31, _) = three_point(vencs)?;
    if v_tilde.len() != 3 {
        return Err(PromError::Dimension(format!(
            "{} wrapped velocities for three pairs",
            v_tilde.len()
        )));
    }
    let v21 = wrap_to_range(v_tilde[0], 2.0 * venc21, -venc21);
    let v31 = wrap_to_range(v_tilde[1], 2.0 * venc31, -venc31);
    let r = (v21 - v31) / (2.0 * venc31);
    Ok(match mode {
        SdvMode::Corrected => {
            let cap = (venc21 / venc31).floor();
            let j = r.round().clamp(-cap, cap);
            v31 + 2.0 * j * venc31
        }
        SdvMode::AsPrinted => {
            let inside = |lo: f64, hi: f64| r > lo && r < hi;
            if inside(-2.4, -1.6) {
                v21 - 4.0 * venc31
            } else if inside(-1.2, -0.8) {
                v21 - 2.0 * venc31
            } else if inside(0.8, 1.2) {
                v21 + 2.0 * venc31
            } else if inside(1.6, 2.4) {
                v21 + 4.0 * venc31
            } else {
                v21
            }
        }
    })
}

/// `sum_l (1 - cos(pi v / venc_l - theta_l))` over pairs 31 and 32.
pub fn odv_cost(v: f64, theta: [f64; 2], venc: [f64; 2]) -> f64 {
    (0..2).map(|l| 1.0 - (PI * v / venc[l] - theta[l]).cos()).sum()
}

/// ODV by plain grid search.
pub fn odv_estimate(v_tilde: &[f64], vencs: &VencSet, grid: &GridSpec) -> Result<f64> {
    let (_, venc31, venc32) = three_point(vencs)?;
    let theta = [PI * v_tilde[1] / venc31, PI * v_tilde[2] / venc32];
    let (i, _) = grid_argmin((0..grid.len()).map(|i| odv_cost(grid.point(i), theta, [venc31, venc32])))
        .expect("grid is nonempty");
    Ok(grid.point(i))
}

/// `|r31|^2 |e^{i pi v/venc31} - e^{i theta31}|^2 + (same for 32)`.
pub fn nco_cost(v: f64, r31: Complex64, r32: Complex64, venc31: f64, venc32: f64) -> f64 {
    let term = |r: Complex64, venc: f64| {
        r.norm_sqr() * (Complex64::from_polar(1.0, PI * v / venc) - Complex64::from_polar(1.0, r.arg())).norm_sqr()
    };
    term(r31, venc31) + term(r32, venc32)
}

/// NCO cost minimized on the grid (no spatial term).
pub fn nco_estimate(r31: Complex64, r32: Complex64, vencs: &VencSet, grid: &GridSpec) -> Result<f64> {
    let (_, venc31, venc32) = three_point(vencs)?;
    let (i, _) = grid_argmin((0..grid.len()).map(|i| nco_cost(grid.point(i), r31, r32, venc31, venc32)))
        .expect("grid is nonempty");
    Ok(grid.point(i))
}

/// `cos(a v)` and `sin(a v)` tabulated on a grid for a few frequencies.
#[derive(Debug, Clone)]
struct TrigTable {
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl TrigTable {
    fn new(grid: &GridSpec, freqs: &[f64]) -> Self {
        let pts = grid.points();
        let cos = freqs
            .iter()
            .map(|a| pts.iter().map(|v| (a * v).cos()).collect())
            .collect();
        let sin = freqs
            .iter()
            .map(|a| pts.iter().map(|v| (a * v).sin()).collect())
            .collect();
        Self { cos, sin }
    }
}

/// ODV and NCO share the cost `sum_l c_l (1 - cos(pi v / venc_l - theta_l))`;
/// the tables turn each grid evaluation into a few multiply-adds.
#[derive(Debug, Clone)]
pub struct DualVencSolver {
    grid: GridSpec,
    venc: [f64; 2],
    table: TrigTable,
}

impl DualVencSolver {
    pub fn new(vencs: &VencSet, grid: GridSpec) -> Result<Self> {
        let (_, venc31, venc32) = three_point(vencs)?;
        let table = TrigTable::new(&grid, &[PI / venc31, PI / venc32]);
        Ok(Self {
            grid,
            venc: [venc31, venc32],
            table,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn argmin_weighted(&self, theta: [f64; 2], c: [f64; 2]) -> f64 {
        let (c0, s0) = (c[0] * theta[0].cos(), c[0] * theta[0].sin());
        let (c1, s1) = (c[1] * theta[1].cos(), c[1] * theta[1].sin());
        let (ca, sa, cb, sb) = (
            &self.table.cos[0],
            &self.table.sin[0],
            &self.table.cos[1],
            &self.table.sin[1],
        );
        // maximizing the cosine sum minimizes the cost
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for i in 0..ca.len() {
            let g = ca[i] * c0 + sa[i] * s0 + cb[i] * c1 + sb[i] * s1;
            if g > best {
                best = g;
                arg = i;
            }
        }
        self.grid.point(arg)
    }

    /// ODV from canonical-order wrapped velocities.
    pub fn odv(&self, v_tilde: &[f64]) -> f64 {
        let theta = [PI * v_tilde[1] / self.venc[0], PI * v_tilde[2] / self.venc[1]];
        self.argmin_weighted(theta, [1.0, 1.0])
    }

    /// NCO from the conjugate products of pairs 31 and 32.
    pub fn nco(&self, r31: Complex64, r32: Complex64) -> f64 {
        self.argmin_weighted([r31.arg(), r32.arg()], [r31.norm_sqr(), r32.norm_sqr()])
    }
}

/// Largest eigenvalue of a real symmetric 3x3 matrix (trigonometric form).
pub fn lambda_max_sym3(m: &[[f64; 3]; 3]) -> f64 {
    sym3_eigenvalues(m)[0]
}

/// Eigenvalues of a real symmetric 3x3 matrix, descending.
fn sym3_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    if p2 <= 0.0 {
        return [q; 3];
    }
    let p = (p2 / 6.0).sqrt();
    let b = |i: usize, j: usize| (m[i][j] - if i == j { q } else { 0.0 }) / p;
    let det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let l0 = q + 2.0 * p * phi.cos();
    let l2 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    [l0, 3.0 * q - l0 - l2, l2]
}

/// Eigenvector of a symmetric 3x3 matrix for eigenvalue `l`, if well separated.
fn sym3_eigenvector(m: &[[f64; 3]; 3], l: f64) -> Option<[f64; 3]> {
    let r = |i: usize| {
        [
            m[i][0] - if i == 0 { l } else { 0.0 },
            m[i][1] - if i == 1 { l } else { 0.0 },
            m[i][2] - if i == 2 { l } else { 0.0 },
        ]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (r0, r1, r2) = (r(0), r(1), r(2));
    let cands = [cross(r0, r1), cross(r0, r2), cross(r1, r2)];
    let best = cands.into_iter().max_by(|a, b| norm(*a).total_cmp(&norm(*b)))?;
    let n = norm(best);
    let scale = m
        .iter()
        .flatten()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    if n <= 1e-9 * scale * scale {
        return None;
    }
    Some([best[0] / n, best[1] / n, best[2] / n])
}

fn sign_consistent(v: &[f64]) -> bool {
    let tol = 1e-12;
    v.iter().all(|x| *x >= -tol) || v.iter().all(|x| *x <= tol)
}

/// Sign convention for the per-encoding amplitudes in the complex-data MLE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MleAmplitudes {
    /// Amplitudes are magnitudes, `A >= 0`.
    #[default]
    NonNegative,
    /// Any real amplitude; the profile is the plain largest eigenvalue. For
    /// symmetric three-point schemes this ties `v` with `v + Omega / 2`.
    Signed,
}

/// Largest `s^T M s` over unit `s`, optionally restricted to `s >= 0`.
/// The constrained maximum sits at a KKT point: an eigenvector of a
/// principal submatrix that is positive on its support.
fn profile_max(m: &DMatrix<f64>, amps: MleAmplitudes) -> f64 {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let imax = eig.eigenvalues.imax();
    if amps == MleAmplitudes::Signed || sign_consistent(eig.eigenvectors.column(imax).as_slice()) {
        return eig.eigenvalues[imax];
    }
    let mut best = (0..n).map(|i| m[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() < 2 {
            continue;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])]);
        let e = SymmetricEigen::new(sub);
        for (k, l) in e.eigenvalues.iter().enumerate() {
            let v = e.eigenvectors.column(k);
            if *l > best && sign_consistent(v.as_slice()) {
                best = *l;
            }
        }
    }
    best
}

fn profile_max3(m: &[[f64; 3]; 3], amps: MleAmplitudes) -> f64 {
    let ls = sym3_eigenvalues(m);
    if amps == MleAmplitudes::Signed {
        return ls[0];
    }
    if let Some(v) = sym3_eigenvector(m, ls[0]) {
        if sign_consistent(&v) {
            return ls[0];
        }
    }
    // remaining KKT points: other full eigenvectors, positive pairs, singles
    let mut best = m[0][0].max(m[1][1]).max(m[2][2]);
    for &l in &ls[1..] {
        if l > best {
            match sym3_eigenvector(m, l) {
                Some(v) if sign_consistent(&v) => best = l,
                Some(_) => {}
                None => return profile_max(&DMatrix::from_fn(3, 3, |i, j| m[i][j]), amps),
            }
        }
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let (a, b, d) = (m[i][i], m[i][j], m[j][j]);
        if b >= 0.0 {
            let top = 0.5 * (a + d) + (0.25 * (a - d).powi(2) + b * b).sqrt();
            best = best.max(top);
        }
    }
    best
}

/// Concentrated complex-data likelihood: with amplitudes, sensitivities and
/// the common phase profiled out, the residual at `v` is
/// `Trace(R) - max_s s^T Re(D(v)^H R D(v)) s` with `R = Y Y^H`.
#[derive(Debug, Clone)]
pub struct MleCost {
    diag: Vec<f64>,
    /// `(a, b, |R_ab|, arg R_ab, omega_a - omega_b)` for `a > b`.
    off: Vec<(usize, usize, f64, f64, f64)>,
    trace: f64,
    amps: MleAmplitudes,
}

impl MleCost {
    pub fn new(y: &MeasurementMatrix, scheme: &EncodingScheme, amps: MleAmplitudes) -> Result<Self> {
        let ne = y.num_encodings();
        if ne != scheme.num_encodings() {
            return Err(PromError::Dimension(format!(
                "data has {ne} encodings, scheme has {}",
                scheme.num_encodings()
            )));
        }
        let m = scheme.gamma_m1();
        let diag: Vec<f64> = (0..ne).map(|a| y.row(a).iter().map(|z| z.norm_sqr()).sum()).collect();
        let mut off = Vec::new();
        for a in 1..ne {
            for b in 0..a {
                let r: Complex64 = y.row(a).iter().zip(y.row(b)).map(|(p, q)| p * q.conj()).sum();
                off.push((a, b, r.norm(), r.arg(), m[a] - m[b]));
            }
        }
        let trace = diag.iter().sum();
        Ok(Self { diag, off, trace, amps })
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.trace - self.profile(|_, mag, ph, w| mag * (ph - w * v).cos())
    }

    fn profile(&self, entry: impl Fn(usize, f64, f64, f64) -> f64) -> f64 {
        let ne = self.diag.len();
        if ne == 3 {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                m[i][i] = self.diag[i];
            }
            for (idx, &(a, b, mag, ph, w)) in self.off.iter().enumerate() {
                let x = entry(idx, mag, ph, w);
                m[a][b] = x;
                m[b][a] = x;
            }
            profile_max3(&m, self.amps)
        } else {
            let mut m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.diag.clone()));
            for (idx, &(a, b, mag, ph, w)) in self.off.iter().enumerate() {
                let x = entry(idx, mag, ph, w);
                m[(a, b)] = x;
                m[(b, a)] = x;
            }
            profile_max(&m, self.amps)
        }
    }

    /// Bound on `|d cost / dv|`.
    pub fn lipschitz(&self) -> f64 {
        (2.0 * self.off.iter().map(|&(_, _, mag, _, w)| (mag * w).powi(2)).sum::<f64>()).sqrt()
    }
}

/// Grid MLE on complex data; returns the estimate and the cost on every grid point.
pub fn complex_mle_grid(
    y: &MeasurementMatrix,
    scheme: &EncodingScheme,
    grid: &GridSpec,
    amps: MleAmplitudes,
) -> Result<(f64, Vec<f64>)> {
    let cost = MleCost::new(y, scheme, amps)?;
    let curve: Vec<f64> = (0..grid.len()).map(|i| cost.eval(grid.point(i))).collect();
    let (i, _) = grid_argmin(curve.iter().copied()).expect("grid is nonempty");
    Ok((grid.point(i), curve))
}

/// Grid MLE without the curve: the same grid minimizer, found by evaluating a
/// coarse subgrid and refining only blocks whose Lipschitz lower bound can
/// still beat the incumbent.
#[derive(Debug, Clone)]
pub struct MleSolver {
    scheme: EncodingScheme,
    grid: GridSpec,
    amps: MleAmplitudes,
    block: usize,
    /// `cos`/`sin` of `omega_ab v` on the grid, per pair.
    table: TrigTable,
}

impl MleSolver {
    pub fn new(scheme: &EncodingScheme, grid: GridSpec, amps: MleAmplitudes) -> Result<Self> {
        let m = scheme.gamma_m1();
        let freqs: Vec<f64> = (1..m.len())
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .map(|(a, b)| m[a] - m[b])
            .collect();
        let table = TrigTable::new(&grid, &freqs);
        let block = ((grid.len() as f64).sqrt() / 2.0).clamp(1.0, 64.0) as usize;
        Ok(Self {
            scheme: scheme.clone(),
            grid,
            amps,
            block,
            table,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn eval_at(&self, cost: &MleCost, i: usize, cs: &[(f64, f64)]) -> f64 {
        // cos(ph - w v) = cos(ph) cos(w v) + sin(ph) sin(w v)
        cost.trace
            - cost.profile(|idx, _, _, _| cs[idx].0 * self.table.cos[idx][i] + cs[idx].1 * self.table.sin[idx][i])
    }

    pub fn solve(&self, y: &MeasurementMatrix) -> Result<f64> {
        let cost = MleCost::new(y, &self.scheme, self.amps)?;
        let cs: Vec<(f64, f64)> = cost
            .off
            .iter()
            .map(|&(_, _, mag, ph, _)| (mag * ph.cos(), mag * ph.sin()))
            .collect();
        let n = self.grid.len();
        let b = self.block;
        let coarse: Vec<usize> = (0..n).step_by(b).collect();
        let vals: Vec<f64> = coarse.iter().map(|&i| self.eval_at(&cost, i, &cs)).collect();
        let mut best = (f64::INFINITY, usize::MAX);
        for (&i, &v) in coarse.iter().zip(&vals) {
            if v < best.0 {
                best = (v, i);
            }
        }
        // every interior point is within b/2 steps of an evaluated endpoint
        let slack = cost.lipschitz() * self.grid.step * (b as f64 / 2.0) + 1e-9 * cost.trace.max(1.0);
        let mut blocks: Vec<(f64, usize)> = (0..coarse.len())
            .map(|j| {
                let right = if j + 1 < vals.len() { vals[j + 1] } else { vals[j] };
                (vals[j].min(right) - slack, j)
            })
            .collect();
        blocks.sort_by(|x, y| x.0.total_cmp(&y.0));
        for (lb, j) in blocks {
            if lb > best.0 {
                break;
            }
            let start = coarse[j] + 1;
            let end = (coarse[j] + b).min(n);
            for i in start..end {
                let v = self.eval_at(&cost, i, &cs);
                if v < best.0 || (v == best.0 && i < best.1) {
                    best = (v, i);
                }
            }
        }
        Ok(self.grid.point(best.1))
    }
}
