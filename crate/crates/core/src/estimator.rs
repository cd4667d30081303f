//! PRoM: joint unwrapping of all pairwise phase differences.
//!
//! Each wrapping vector `k` gives an unwrapped set `v_tilde + 2 venc * k` whose
//! BLUE combination is a velocity candidate. Only the wrapping vectors reachable
//! by some `v` in the unambiguous range are enumerated: as `v` sweeps the range,
//! `k(v)` changes at most once per wrap of each pair, so there are at most
//! `sum(h)` of them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::congruence::{wrap_to_range, wrapped_diff, EncodingScheme, VencSet};
use crate::covariance::{data_phase_cov, model_phase_cov, velocity_cov, SnrMatrix};
use crate::error::{PromError, Result};
use crate::measurement::MeasurementMatrix;

/// Eigenvalues below this fraction of the largest are floored to it.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// One wrapping hypothesis and its likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub k: Vec<i64>,
    pub v_hat: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromResult {
    pub v_hat: f64,
    /// Sorted by `nll`, ties by `k`.
    pub candidates: Vec<CandidateSolution>,
    pub weights: Vec<f64>,
    pub h: Vec<i64>,
    /// `w^T Sigma(n) w`. Only relative when the covariance came from data.
    pub predicted_variance: f64,
    pub predicted_rmse: f64,
}

/// Where the noise covariance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CovMode {
    /// Scaled covariance from the measured magnitudes of each voxel.
    Data,
    /// Known SNRs.
    Model(SnrMatrix),
}

/// Regularized inverse of a velocity covariance and its BLUE weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Precision {
    pub sigma: DMatrix<f64>,
    /// Eigenvectors of `sigma`, one per row.
    basis: Vec<f64>,
    /// Inverse eigenvalues, floored eigenvalues for near-null directions.
    inv_eig: Vec<f64>,
    pub weights: DVector<f64>,
    pub variance: f64,
}

impl Precision {
    /// The weights use the pseudo-inverse (directions below
    /// `RANK_TOLERANCE * max` dropped). The likelihood instead floors those
    /// eigenvalues, so the near-null directions are heavily penalized rather
    /// than ignored: with one coil the three-point phases obey
    /// `theta32 = theta31 - theta21` exactly, the data covariance is singular
    /// along that closure, and a pure pseudo-inverse would let wrapping
    /// vectors that break the closure score zero. The all-ones vector is
    /// orthogonal to the closure direction, so both choices give the same
    /// minimizer.
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows();
        if d == 0 || sigma.ncols() != d {
            return Err(PromError::Dimension(format!(
                "covariance must be square, got {:?}",
                sigma.shape()
            )));
        }
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(PromError::DegenerateCovariance("non-finite covariance entry".into()));
        }
        let sym = (sigma + sigma.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let lmax = eig.eigenvalues.max();
        if !(lmax > 0.0) {
            return Err(PromError::DegenerateCovariance(
                "covariance has no positive eigenvalue".into(),
            ));
        }
        let floor = RANK_TOLERANCE * lmax;
        let q = eig.eigenvectors;
        let mut inv_eig = Vec::with_capacity(d);
        let mut p1 = DVector::zeros(d);
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            inv_eig.push(1.0 / l.max(floor));
            if l > floor {
                let col = q.column(i);
                p1 += col * (col.sum() / l);
            }
        }
        let denom = p1.sum();
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(PromError::DegenerateCovariance("1^T Sigma^+ 1 is not positive".into()));
        }
        let weights = p1 / denom;
        let variance = weights.dot(&(&sym * &weights)).max(0.0);
        let basis = (0..d)
            .flat_map(|i| q.column(i).iter().copied().collect::<Vec<_>>())
            .collect();
        Ok(Self {
            sigma: sym,
            basis,
            inv_eig,
            weights,
            variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `d^T P d`, accumulated in the eigenbasis to avoid cancellation
    /// against the large floored entries.
    #[inline]
    pub fn quad(&self, d: &[f64]) -> f64 {
        let n = d.len();
        let mut acc = 0.0;
        for (row, inv) in self.basis.chunks_exact(n).zip(&self.inv_eig) {
            let proj: f64 = row.iter().zip(d).map(|(q, x)| q * x).sum();
            acc += inv * proj * proj;
        }
        acc
    }
}

/// BLUE weights `Sigma^+ 1 / (1^T Sigma^+ 1)`.
pub fn blue_weights(sigma_n: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(Precision::new(sigma_n)?.weights)
}

/// `0.5 d^T Sigma^+ d` with `d` the wrapped displacement of `v_tilde` from `v`.
pub fn neg_log_likelihood(v_tilde: &[f64], v: f64, vencs: &VencSet, sigma_n: &DMatrix<f64>) -> Result<f64> {
    check_len(v_tilde, vencs)?;
    let prec = Precision::new(sigma_n)?;
    Ok(nll_with(&prec, v_tilde, v, vencs.values()))
}

/// Pair counts up to this size stay on the stack in the hot loops.
const STACK: usize = 16;

fn nll_with(prec: &Precision, v_tilde: &[f64], v: f64, venc: &[f64]) -> f64 {
    let fill = |d: &mut [f64]| {
        for ((di, &x), &vc) in d.iter_mut().zip(v_tilde).zip(venc) {
            *di = wrapped_diff(x, v, 2.0 * vc);
        }
    };
    if v_tilde.len() <= STACK {
        let mut buf = [0.0; STACK];
        let d = &mut buf[..v_tilde.len()];
        fill(d);
        0.5 * prec.quad(d)
    } else {
        let mut d = vec![0.0; v_tilde.len()];
        fill(&mut d);
        0.5 * prec.quad(&d)
    }
}

thread_local! {
    static BREAKPOINTS: std::cell::RefCell<Vec<(f64, usize)>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn check_len(v_tilde: &[f64], vencs: &VencSet) -> Result<()> {
    if v_tilde.len() != vencs.len() {
        return Err(PromError::Dimension(format!(
            "{} wrapped velocities for {} vencs",
            v_tilde.len(),
            vencs.len()
        )));
    }
    Ok(())
}

/// Wrapping vectors reachable from `v_tilde` over one unambiguous range.
pub fn candidate_wrap_set(v_tilde: &[f64], vencs: &VencSet) -> Result<Vec<Vec<i64>>> {
    check_len(v_tilde, vencs)?;
    let solver = PromSolver::new(vencs, 0.0)?;
    let mut ks = Vec::new();
    solver.for_each_candidate(v_tilde, |k| ks.push(k.to_vec()));
    ks.sort();
    ks.dedup();
    Ok(ks)
}

/// Size of the unpruned search set `prod(h + 2)`.
pub fn full_search_size(vencs: &VencSet) -> Result<u128> {
    Ok(vencs.wraps_per_range()?.iter().map(|&h| h as u128 + 2).product())
}

/// Reusable per-scheme state of the estimator.
#[derive(Debug, Clone)]
pub struct PromSolver {
    venc: Vec<f64>,
    periods: Vec<f64>,
    h: Vec<i64>,
    omega: f64,
    offset: f64,
}

impl PromSolver {
    pub fn new(vencs: &VencSet, offset: f64) -> Result<Self> {
        if !offset.is_finite() {
            return Err(PromError::InvalidArgument(format!(
                "offset must be finite, got {offset}"
            )));
        }
        Ok(Self {
            venc: vencs.values().to_vec(),
            periods: vencs.periods(),
            h: vencs.wraps_per_range()?,
            omega: vencs.unambiguous_range()?,
            offset,
        })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn h(&self) -> &[i64] {
        &self.h
    }

    pub fn vencs(&self) -> &[f64] {
        &self.venc
    }

    /// Calls `f` with the wrapping vector of every arc between consecutive
    /// breakpoints on the circle `[0, Omega)`. Crossing a breakpoint of pair
    /// `i` bumps `k_i` by one, so only the first and last arcs need `ceil`.
    pub fn for_each_candidate(&self, v_tilde: &[f64], mut f: impl FnMut(&[i64])) {
        // reuse the buffer, but leave the cell empty while `f` runs
        let mut bps = BREAKPOINTS.with(|cell| cell.take());
        bps.clear();
        for (i, ((&x, &vc), &h)) in v_tilde.iter().zip(&self.venc).zip(&self.h).enumerate() {
            let x0 = wrap_to_range(x, 2.0 * vc, 0.0);
            for j in 0..h {
                let mut b = x0 + (2 * j + 1) as f64 * vc;
                if b >= self.omega {
                    b -= self.omega;
                }
                bps.push((b, i));
            }
        }
        bps.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let d = v_tilde.len();
        let mut heap;
        let mut stack = [0i64; STACK];
        let k: &mut [i64] = if d <= STACK {
            &mut stack[..d]
        } else {
            heap = vec![0i64; d];
            &mut heap
        };
        let n = bps.len();
        let tiny = 1e-12 * self.omega;
        let mut emitted = false;
        if n > 0 {
            self.wrap_vector(
                v_tilde,
                0.5 * (bps[0].0 + bps.get(1).map_or(bps[0].0 + self.omega, |b| b.0)),
                k,
            );
        }
        for i in 0..n {
            if i > 0 {
                k[bps[i].1] += 1;
            }
            let last = i + 1 == n;
            let (lo, hi) = if last {
                (bps[i].0, bps[0].0 + self.omega)
            } else {
                (bps[i].0, bps[i + 1].0)
            };
            if hi - lo <= tiny && n > 1 {
                continue;
            }
            if last && i > 0 {
                // the midpoint may sit past Omega; recompute in [0, Omega)
                let mid = wrap_to_range(0.5 * (lo + hi), self.omega, 0.0);
                self.wrap_vector(v_tilde, mid, k);
            }
            f(k);
            emitted = true;
        }
        if !emitted {
            // every breakpoint coincides: one arc
            let mid = wrap_to_range(bps.first().map_or(0.0, |b| b.0) + 0.5 * self.omega, self.omega, 0.0);
            self.wrap_vector(v_tilde, mid, k);
            f(k);
        }
        BREAKPOINTS.with(|cell| cell.replace(bps));
    }

    /// `k = ceil(-1/2 - (v_tilde - v) / (2 venc))`.
    #[inline]
    pub fn wrap_vector(&self, v_tilde: &[f64], v: f64, k: &mut [i64]) {
        for ((ki, &x), &p) in k.iter_mut().zip(v_tilde).zip(&self.periods) {
            *ki = (-0.5 - (x - v) / p).ceil() as i64;
        }
    }

    /// `<w^T (v_tilde + k * 2 venc)>_Omega`.
    #[inline]
    pub fn candidate_velocity(&self, prec: &Precision, v_tilde: &[f64], k: &[i64]) -> f64 {
        wrap_to_range(self.unwrapped_candidate(prec, v_tilde, k), self.omega, self.offset)
    }

    #[inline]
    fn unwrapped_candidate(&self, prec: &Precision, v_tilde: &[f64], k: &[i64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..k.len() {
            acc += prec.weights[i] * (v_tilde[i] + k[i] as f64 * self.periods[i]);
        }
        acc
    }

    #[inline]
    pub fn nll(&self, prec: &Precision, v_tilde: &[f64], v: f64) -> f64 {
        nll_with(prec, v_tilde, v, &self.venc)
    }

    /// Every candidate, sorted.
    pub fn solve(&self, v_tilde: &[f64], prec: &Precision) -> Result<PromResult> {
        self.check(v_tilde, prec)?;
        let mut candidates = Vec::new();
        self.for_each_candidate(v_tilde, |k| {
            let v_hat = self.candidate_velocity(prec, v_tilde, k);
            let nll = self.nll(prec, v_tilde, v_hat);
            candidates.push(CandidateSolution {
                k: k.to_vec(),
                v_hat,
                nll,
            });
        });
        candidates.sort_by(|a, b| a.nll.total_cmp(&b.nll).then_with(|| a.k.cmp(&b.k)));
        candidates.dedup_by(|a, b| a.k == b.k);
        let v_hat = candidates[0].v_hat;
        Ok(PromResult {
            v_hat,
            candidates,
            weights: prec.weights.iter().copied().collect(),
            h: self.h.clone(),
            predicted_variance: prec.variance,
            predicted_rmse: prec.variance.sqrt(),
        })
    }

    /// Best candidate only, without building the list.
    pub fn solve_best(&self, v_tilde: &[f64], prec: &Precision) -> (f64, Vec<i64>) {
        let d = v_tilde.len();
        let mut best_nll = f64::INFINITY;
        let mut best_v = f64::NAN;
        let mut best_k = vec![0i64; d];
        let mut have = false;
        self.for_each_candidate(v_tilde, |k| {
            // the likelihood is Omega-periodic, so wrap only the winner
            let v_hat = self.unwrapped_candidate(prec, v_tilde, k);
            let nll = self.nll(prec, v_tilde, v_hat);
            if !have || nll < best_nll || (nll == best_nll && k < best_k.as_slice()) {
                best_nll = nll;
                best_v = v_hat;
                best_k.copy_from_slice(k);
                have = true;
            }
        });
        (wrap_to_range(best_v, self.omega, self.offset), best_k)
    }

    fn check(&self, v_tilde: &[f64], prec: &Precision) -> Result<()> {
        if v_tilde.len() != self.venc.len() || prec.dim() != self.venc.len() {
            return Err(PromError::Dimension(format!(
                "{} wrapped velocities, {} vencs, {}x{} covariance",
                v_tilde.len(),
                self.venc.len(),
                prec.dim(),
                prec.dim()
            )));
        }
        Ok(())
    }
}

/// Velocity covariance for one voxel under the chosen covariance mode.
pub fn voxel_velocity_cov(y: &MeasurementMatrix, vencs: &VencSet, cov_mode: &CovMode) -> Result<DMatrix<f64>> {
    let theta = match cov_mode {
        CovMode::Data => data_phase_cov(y)?,
        CovMode::Model(s) => {
            if s.num_encodings() != y.num_encodings() {
                return Err(PromError::Dimension(format!(
                    "SNR matrix has {} encodings, data has {}",
                    s.num_encodings(),
                    y.num_encodings()
                )));
            }
            model_phase_cov(s)?
        }
    };
    velocity_cov(&theta, vencs)
}

/// Full PRoM on one voxel.
pub fn prom_estimate(
    y: &MeasurementMatrix,
    scheme: &EncodingScheme,
    cov_mode: &CovMode,
    offset: f64,
) -> Result<PromResult> {
    let vencs = scheme.vencs();
    let solver = PromSolver::new(&vencs, offset)?;
    prom_with_solver(&solver, y, &vencs, cov_mode)
}

pub(crate) fn prom_with_solver(
    solver: &PromSolver,
    y: &MeasurementMatrix,
    vencs: &VencSet,
    cov_mode: &CovMode,
) -> Result<PromResult> {
    let (v_tilde, prec) = voxel_inputs(y, vencs, cov_mode)?;
    solver.solve(&v_tilde, &prec)
}

/// Wrapped velocities and precision of one voxel.
pub(crate) fn voxel_inputs(
    y: &MeasurementMatrix,
    vencs: &VencSet,
    cov_mode: &CovMode,
) -> Result<(Vec<f64>, Precision)> {
    if y.num_encodings() != vencs.num_encodings() {
        return Err(PromError::Dimension(format!(
            "data has {} encodings, scheme has {}",
            y.num_encodings(),
            vencs.num_encodings()
        )));
    }
    let v_tilde = y.wrapped_velocities(vencs)?;
    let sigma = voxel_velocity_cov(y, vencs, cov_mode)?;
    Ok((v_tilde, Precision::new(&sigma)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::congruence::wrapped_displacement;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;
    use std::f64::consts::PI;

    fn fig4() -> VencSet {
        VencSet::new(vec![35.0, 10.0, 14.0]).unwrap()
    }

    fn model_sigma(s: &[f64], vencs: &VencSet) -> DMatrix<f64> {
        let snr = SnrMatrix::new(s.len(), 1, s.to_vec()).unwrap();
        velocity_cov(&model_phase_cov(&snr).unwrap(), vencs).unwrap()
    }

    fn wrap_vec(v: &[f64], vencs: &VencSet) -> Vec<f64> {
        v.iter()
            .zip(vencs.values())
            .map(|(x, vc)| wrap_to_range(*x, 2.0 * vc, 0.0))
            .collect()
    }

    #[test]
    fn weight_examples() {
        let w = blue_weights(&DMatrix::identity(3, 3)).unwrap();
        for x in w.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-14);
        }
        let w = blue_weights(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0]))).unwrap();
        for (x, want) in w.iter().zip([1.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0]) {
            assert!((x - want).abs() < 1e-14);
        }
        let sigma = model_sigma(&[2.5, 5.0, 2.5], &fig4());
        let prec = Precision::new(&sigma).unwrap();
        assert!((prec.weights.sum() - 1.0).abs() < 1e-10);
        let min_diag = (0..3).map(|i| sigma[(i, i)]).fold(f64::INFINITY, f64::min);
        assert!(prec.variance <= min_diag);
    }

    #[test]
    fn zero_covariance_is_degenerate() {
        assert!(matches!(
            blue_weights(&DMatrix::zeros(3, 3)),
            Err(PromError::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn nll_examples() {
        let vencs = fig4();
        let id = DMatrix::identity(3, 3);
        assert!((neg_log_likelihood(&[3.0, 1.0, 2.0], 0.0, &vencs, &id).unwrap() - 7.0).abs() < 1e-12);
        let vt = wrap_vec(&[41.3; 3], &vencs);
        assert!(neg_log_likelihood(&vt, 41.3, &vencs, &id).unwrap() < 1e-20);
    }

    #[test]
    fn pruning_sizes() {
        let vencs = fig4();
        assert_eq!(full_search_size(&vencs).unwrap(), 252);
        let k = candidate_wrap_set(&[3.0, 1.0, 2.0], &vencs).unwrap();
        assert!(k.len() <= 14);
        let two = VencSet::new(vec![10.0]).unwrap();
        assert_eq!(candidate_wrap_set(&[7.0], &two).unwrap().len(), 1);
    }

    /// Brute force over a fine grid of `v`, reduced modulo `h`.
    fn grid_oracle(v_tilde: &[f64], vencs: &VencSet, step: f64) -> BTreeSet<Vec<i64>> {
        let omega = vencs.unambiguous_range().unwrap();
        let n = (omega / step).round() as usize;
        let mut out = BTreeSet::new();
        for i in 0..n {
            let v = i as f64 * step;
            let k: Vec<i64> = v_tilde
                .iter()
                .zip(vencs.values())
                .map(|(x, vc)| (-0.5 - (x - v) / (2.0 * vc)).ceil() as i64)
                .collect();
            out.insert(k);
        }
        out
    }

    fn reduce(k: &[i64], h: &[i64]) -> Vec<i64> {
        let j = k[0].div_euclid(h[0]);
        k.iter().zip(h).map(|(a, b)| a - j * b).collect()
    }

    #[test]
    fn candidate_set_matches_grid_oracle() {
        let vencs = fig4();
        let h = vencs.wraps_per_range().unwrap();
        let vt = [3.0, 1.0, 2.0];
        let grid = grid_oracle(&vt, &vencs, 1e-3);
        let mine = candidate_wrap_set(&vt, &vencs).unwrap();
        for k in &mine {
            assert!(grid.contains(k), "{k:?} not reachable");
        }
        let g: BTreeSet<_> = grid.iter().map(|k| reduce(k, &h)).collect();
        let m: BTreeSet<_> = mine.iter().map(|k| reduce(k, &h)).collect();
        assert_eq!(g, m);
    }

    #[test]
    fn noiseless_recovers_velocity() {
        let scheme = EncodingScheme::new(vec![-PI / 20.0, -3.0 * PI / 140.0, PI / 20.0]).unwrap();
        let mut y = MeasurementMatrix::zeros(3, 1);
        for (a, m) in scheme.gamma_m1().iter().enumerate() {
            y.set(a, 0, Complex64::from_polar([2.5, 5.0, 2.5][a], 0.9 + m * 77.0));
        }
        for mode in [
            CovMode::Data,
            CovMode::Model(SnrMatrix::new(3, 1, vec![2.5, 5.0, 2.5]).unwrap()),
        ] {
            let r = prom_estimate(&y, &scheme, &mode, 0.0).unwrap();
            assert!((r.v_hat - 77.0).abs() < 1e-6, "{}", r.v_hat);
            assert_eq!(r.v_hat, r.candidates[0].v_hat);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_dense_grid_minimizer() {
        let scheme = EncodingScheme::new(vec![-PI / 12.0, -PI / 60.0, PI / 12.0]).unwrap();
        let vencs = scheme.vencs();
        assert!((vencs.values()[0] - 15.0).abs() < 1e-12);
        let omega = vencs.unambiguous_range().unwrap();
        let solver = PromSolver::new(&vencs, 0.0).unwrap();
        let snr = [10.0, 20.0, 10.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(0.0, 0.5f64.sqrt()).unwrap();
        let trials = 10_000;
        let step = omega / 1e6;
        let mut agree = 0;
        for _ in 0..trials {
            let v = rng.gen_range(0.0..omega);
            let mut y = MeasurementMatrix::zeros(3, 1);
            for (a, m) in scheme.gamma_m1().iter().enumerate() {
                let z = Complex64::from_polar(snr[a], m * v) + Complex64::new(rng.sample(normal), rng.sample(normal));
                y.set(a, 0, z);
            }
            let vt = y.wrapped_velocities(&vencs).unwrap();
            let prec = Precision::new(&voxel_velocity_cov(&y, &vencs, &CovMode::Data).unwrap()).unwrap();
            let (v_hat, _) = solver.solve_best(&vt, &prec);
            // the likelihood is piecewise quadratic; refine the grid minimum
            // only near the coarse winners to keep the oracle cheap
            let coarse = 20_000;
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..coarse {
                let g = i as f64 * omega / coarse as f64;
                let l = solver.nll(&prec, &vt, g);
                if l < best.0 {
                    best = (l, g);
                }
            }
            let mut fine = best;
            let span = 2.0 * omega / coarse as f64;
            let m = (2.0 * span / step) as i64;
            for i in -m..=m {
                let g = best.1 + i as f64 * step;
                let l = solver.nll(&prec, &vt, g);
                if l < fine.0 {
                    fine = (l, g);
                }
            }
            let d = wrapped_diff(v_hat, fine.1, omega).abs();
            if d <= step * 1.0001 {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.999 * trials as f64, "{agree}/{trials}");
    }

    #[test]
    fn lemma2_orthogonality() {
        let vencs = fig4();
        let snr = SnrMatrix::new(3, 2, vec![3.0, 1.0, 6.0, 2.0, 3.0, 1.5]).unwrap();
        let sigma = velocity_cov(&model_phase_cov(&snr).unwrap(), &vencs).unwrap();
        let prec = Precision::new(&sigma).unwrap();
        let sw = &sigma * &prec.weights;
        for i in 0..3 {
            for j in 0..3 {
                assert!((sw[i] - sw[j]).abs() < 1e-8 * sw.amax(), "{sw}");
            }
        }
    }

    proptest! {
        #[test]
        fn pruned_set_bounded(vt in proptest::collection::vec(0.0f64..1.0, 3)) {
            let vencs = fig4();
            let x: Vec<f64> = vt.iter().zip(vencs.values()).map(|(u, v)| u * 2.0 * v).collect();
            let k = candidate_wrap_set(&x, &vencs).unwrap();
            prop_assert!(k.len() <= 14 && !k.is_empty());
        }

        #[test]
        fn lemma1_shift_equivariance(v in 0.0f64..140.0, n in proptest::collection::vec(-3.0f64..3.0, 3),
                                     eta in -200.0f64..200.0) {
            let vencs = fig4();
            let solver = PromSolver::new(&vencs, 0.0).unwrap();
            let prec = Precision::new(&model_sigma(&[2.5, 5.0, 2.5], &vencs)).unwrap();
            let h = vencs.wraps_per_range().unwrap();
            let raw: Vec<f64> = n.iter().map(|e| v + e).collect();
            let vt = wrap_vec(&raw, &vencs);
            let shifted: Vec<f64> = raw.iter().map(|x| x + eta).collect();
            let vt2 = wrap_vec(&shifted, &vencs);
            let (v1, k1) = solver.solve_best(&vt, &prec);
            let (v2, k2) = solver.solve_best(&vt2, &prec);
            prop_assert!(wrapped_diff(v2, v1 + eta, 140.0).abs() < 1e-9);
            // k* - k_true agree modulo h
            let kt = |x: &[f64]| -> Vec<i64> {
                x.iter().zip(vencs.values()).map(|(u, vc)| (u / (2.0 * vc)).floor() as i64).collect()
            };
            let x1: Vec<i64> = k1.iter().zip(kt(&raw)).map(|(a, b)| a - b).collect();
            let x2: Vec<i64> = k2.iter().zip(kt(&shifted)).map(|(a, b)| a - b).collect();
            let diff: Vec<i64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
            let j = diff[0] / h[0];
            prop_assert!(diff.iter().zip(&h).all(|(d, hh)| *d == j * hh), "{x1:?} {x2:?}");
        }

        #[test]
        fn weights_sum_to_one(s in proptest::collection::vec(0.5f64..30.0, 6)) {
            let vencs = fig4();
            let snr = SnrMatrix::new(3, 2, s).unwrap();
            let sigma = velocity_cov(&model_phase_cov(&snr).unwrap(), &vencs).unwrap();
            let w = blue_weights(&sigma).unwrap();
            prop_assert!((w.sum() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn nll_shift_identity(vt in proptest::collection::vec(0.0f64..1.0, 3), v in -100.0f64..100.0,
                              eta in -100.0f64..100.0) {
            let vencs = fig4();
            let x: Vec<f64> = vt.iter().zip(vencs.values()).map(|(u, vc)| u * 2.0 * vc).collect();
            let sigma = model_sigma(&[2.5, 5.0, 2.5], &vencs);
            let shifted: Vec<f64> = x.iter().map(|a| a + eta).collect();
            let l0 = neg_log_likelihood(&x, v, &vencs, &sigma).unwrap();
            let l1 = neg_log_likelihood(&wrap_vec(&shifted, &vencs), v + eta, &vencs, &sigma).unwrap();
            prop_assert!((l0 - l1).abs() <= 1e-7 * l0.max(1.0));
            let d = wrapped_displacement(&x, &[v; 3], &vencs.periods());
            prop_assert!(d.iter().zip(vencs.values()).all(|(d, vc)| d.abs() <= *vc + 1e-9));
        }
    }
}
