//! Error analysis of PRoM: tube labels, the mixture law of the estimate,
//! unwrapping-error rates and the Cramér-Rao bound of the complex model.
//!
//! A noise vector `n` lands in tube `x` when PRoM picks `k* = k_true + x`,
//! up to adding whole multiples of `h` (which shifts the estimate by exactly
//! `Omega`). Inside tube `x` the estimate is `v + w^T (x * 2 venc) + w^T n`
//! modulo `Omega`, so the law of `v_hat` is a mixture of wrapped normals with
//! one shared variance.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::congruence::{wrap_to_range, wrapped_diff, EncodingScheme, VencSet};
use crate::covariance::{model_phase_cov, velocity_cov, SnrMatrix};
use crate::error::{PromError, Result};
use crate::estimator::{Precision, PromSolver};
use crate::rng::{stream, tag};
use crate::simulation::{VoxelGroundTruth, VoxelSimulator};

const CHUNK: u64 = 4096;

/// How noise is drawn in the Monte Carlo routines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    /// `n ~ N(0, Sigma(n))` with the linearized model covariance.
    #[default]
    Gaussian,
    /// Complex data with circular Gaussian noise; `n` is the wrapped error of
    /// each pairwise velocity.
    Complex,
}

/// Everything needed to label noise realizations: vencs, the model
/// covariance and its BLUE weights.
#[derive(Debug, Clone)]
pub struct TubeContext {
    solver: PromSolver,
    prec: Precision,
    periods: Vec<f64>,
    h: Vec<i64>,
    omega: f64,
    /// `Sigma(n) = L L^T`, for drawing noise.
    factor: DMatrix<f64>,
}

impl TubeContext {
    pub fn new(vencs: &VencSet, sigma_n: &DMatrix<f64>) -> Result<Self> {
        let omega = vencs.unambiguous_range()?;
        let solver = PromSolver::new(vencs, -omega / 2.0)?;
        let prec = Precision::new(sigma_n)?;
        let eig = SymmetricEigen::new(sigma_n.clone());
        let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root);
        Ok(Self {
            solver,
            prec,
            periods: vencs.periods(),
            h: vencs.wraps_per_range()?,
            omega,
            factor,
        })
    }

    /// Context with the known-SNR covariance.
    pub fn from_snr(vencs: &VencSet, s: &SnrMatrix) -> Result<Self> {
        if s.num_encodings() != vencs.num_encodings() {
            return Err(PromError::Dimension(format!(
                "SNR matrix has {} encodings, venc set has {}",
                s.num_encodings(),
                vencs.num_encodings()
            )));
        }
        Self::new(vencs, &velocity_cov(&model_phase_cov(s)?, vencs)?)
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn h(&self) -> &[i64] {
        &self.h
    }

    pub fn weights(&self) -> Vec<f64> {
        self.prec.weights.iter().copied().collect()
    }

    /// `w^T Sigma(n) w`.
    pub fn variance(&self) -> f64 {
        self.prec.variance
    }

    /// `w^T (x * 2 venc)`.
    pub fn shift(&self, x: &[i64]) -> f64 {
        x.iter()
            .zip(&self.periods)
            .zip(self.prec.weights.iter())
            .map(|((&x, p), w)| w * x as f64 * p)
            .sum()
    }

    /// Representative of `x` modulo `h` whose shift lies in `[-Omega/2, Omega/2)`.
    pub fn canonical(&self, x: &[i64]) -> Vec<i64> {
        let j = ((self.shift(x) + self.omega / 2.0) / self.omega).floor() as i64;
        x.iter().zip(&self.h).map(|(x, h)| x - j * h).collect()
    }

    /// Mixture center of tube `x` for true velocity `v`, in `[-Omega/2, Omega/2)`.
    pub fn center(&self, v: f64, x: &[i64]) -> f64 {
        wrap_to_range(v + self.shift(x), self.omega, -self.omega / 2.0)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: &mut [f64]) {
        let d = n.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (i, ni) in n.iter_mut().enumerate() {
            *ni = (0..d).map(|j| self.factor[(i, j)] * z[j]).sum();
        }
    }
}

/// Canonical tube label of the noise vector `n` at true velocity `v`.
pub fn tube_label(n: &[f64], v: f64, ctx: &TubeContext) -> Vec<i64> {
    let d = ctx.periods.len();
    let mut v_tilde = vec![0.0; d];
    let mut k_true = vec![0i64; d];
    for i in 0..d {
        let u = v + n[i];
        let p = ctx.periods[i];
        let kt = (u / p).floor();
        let mut r = u - kt * p;
        let mut kt = kt as i64;
        if r >= p {
            r -= p;
            kt += 1;
        }
        if r < 0.0 {
            r += p;
            kt -= 1;
        }
        v_tilde[i] = r;
        k_true[i] = kt;
    }
    let (_, k) = ctx.solver.solve_best(&v_tilde, &ctx.prec);
    let x: Vec<i64> = k.iter().zip(&k_true).map(|(a, b)| a - b).collect();
    ctx.canonical(&x)
}

/// One wrapped-normal component of the law of `v_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub x: Vec<i64>,
    pub weight: f64,
    pub center: f64,
    pub variance: f64,
}

/// Everything observed by [`label_distribution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    /// All observed components, heaviest first.
    pub components: Vec<MixtureComponent>,
    pub trials: u64,
}

impl LabelDistribution {
    pub fn top(&self, m: usize) -> Vec<MixtureComponent> {
        self.components.iter().take(m).cloned().collect()
    }

    pub fn weight_of(&self, x: &[i64]) -> f64 {
        self.components.iter().find(|c| c.x == x).map_or(0.0, |c| c.weight)
    }
}

fn noise_sample<R: Rng + ?Sized>(
    ctx: &TubeContext,
    sim: Option<&(VoxelSimulator, VencSet)>,
    v: f64,
    rng: &mut R,
    n: &mut [f64],
) {
    match sim {
        None => ctx.draw(rng, n),
        Some((sim, vencs)) => {
            let mut y = sim.zeros();
            let phi0 = rng.gen::<f64>() * 2.0 * PI;
            sim.fill(v, phi0, rng, &mut y);
            let vt = y.wrapped_velocities(vencs).expect("shapes agree");
            for (i, ni) in n.iter_mut().enumerate() {
                *ni = wrapped_diff(vt[i], v, ctx.periods[i]);
            }
        }
    }
}

/// Counts tube labels over `trials` noise draws at true velocity `v`.
pub fn label_distribution(
    v: f64,
    s: &SnrMatrix,
    scheme: &EncodingScheme,
    trials: u64,
    seed: u64,
    noise: NoiseModel,
) -> Result<LabelDistribution> {
    if trials == 0 {
        return Err(PromError::InvalidArgument("need at least one trial".into()));
    }
    let vencs = scheme.vencs();
    let ctx = TubeContext::from_snr(&vencs, s)?;
    let sim = match noise {
        NoiseModel::Gaussian => None,
        NoiseModel::Complex => Some((VoxelSimulator::new(scheme, s)?, vencs.clone())),
    };
    let domain = tag("analysis/distribution");
    let d = vencs.len();
    let chunks = trials.div_ceil(CHUNK);
    let parts: Vec<BTreeMap<Vec<i64>, u64>> = (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut counts = BTreeMap::new();
            let mut n = vec![0.0; d];
            for t in ch * CHUNK..((ch + 1) * CHUNK).min(trials) {
                let mut rng = stream(seed, domain, t);
                noise_sample(&ctx, sim.as_ref(), v, &mut rng, &mut n);
                *counts.entry(tube_label(&n, v, &ctx)).or_insert(0u64) += 1;
            }
            counts
        })
        .collect();
    let mut total: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
    for p in parts {
        for (x, c) in p {
            *total.entry(x).or_insert(0) += c;
        }
    }
    let mut components: Vec<MixtureComponent> = total
        .into_iter()
        .map(|(x, c)| MixtureComponent {
            center: ctx.center(v, &x),
            weight: c as f64 / trials as f64,
            variance: ctx.variance(),
            x,
        })
        .collect();
    components.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.x.cmp(&b.x)));
    Ok(LabelDistribution { components, trials })
}

/// PRoM estimates (in `[-Omega/2, Omega/2)`) over `trials` noise draws at
/// true velocity `v`.
pub fn sample_estimates(
    v: f64,
    s: &SnrMatrix,
    scheme: &EncodingScheme,
    trials: u64,
    seed: u64,
    noise: NoiseModel,
) -> Result<Vec<f64>> {
    let vencs = scheme.vencs();
    let ctx = TubeContext::from_snr(&vencs, s)?;
    let sim = match noise {
        NoiseModel::Gaussian => None,
        NoiseModel::Complex => Some((VoxelSimulator::new(scheme, s)?, vencs.clone())),
    };
    let domain = tag("analysis/estimates");
    let d = vencs.len();
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, domain, t);
            let mut n = vec![0.0; d];
            noise_sample(&ctx, sim.as_ref(), v, &mut rng, &mut n);
            let vt: Vec<f64> = n
                .iter()
                .zip(&ctx.periods)
                .map(|(ni, p)| wrap_to_range(v + ni, *p, 0.0))
                .collect();
            ctx.solver.solve_best(&vt, &ctx.prec).0
        })
        .collect())
}

/// The `top_m` heaviest mixture components of `v_hat`.
pub fn estimate_distribution(
    v: f64,
    s: &SnrMatrix,
    scheme: &EncodingScheme,
    trials: u64,
    top_m: usize,
    seed: u64,
) -> Result<Vec<MixtureComponent>> {
    if trials < 10_000 {
        return Err(PromError::InvalidArgument(format!(
            "need at least 10^4 trials, got {trials}"
        )));
    }
    Ok(label_distribution(v, s, scheme, trials, seed, NoiseModel::Gaussian)?.top(top_m))
}

/// Outcome of an unwrapping-error Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub errors: u64,
    /// Trials actually simulated.
    pub trials: u64,
    /// Trials requested.
    pub planned: u64,
    /// Stopped because `errors` reached `stop_at`.
    pub stopped_early: bool,
}

impl ErrorCount {
    pub fn frequency(&self) -> f64 {
        self.errors as f64 / self.trials.max(1) as f64
    }
}

/// Schemes in the Monte Carlo need moments; any moments with these vencs
/// give the same phase differences.
pub fn referenced_scheme(vencs: &VencSet) -> Result<EncodingScheme> {
    let (v21, v31, _) = vencs.three_point()?;
    EncodingScheme::new(vec![0.0, PI / v21, PI / v31])
}

/// Counts trials at `v = 0` whose tube label is nonzero. Stops as soon as
/// `stop_at` errors are seen, checking between fixed rounds of chunks so the
/// result does not depend on the thread count.
pub fn count_unwrap_errors(
    ctx: &TubeContext,
    sim: Option<&(VoxelSimulator, VencSet)>,
    trials: u64,
    seed: u64,
    stop_at: Option<u64>,
) -> ErrorCount {
    const ROUND: u64 = 256;
    let domain = tag("analysis/unwrap-error");
    let d = ctx.periods.len();
    let chunks = trials.div_ceil(CHUNK);
    let mut errors = 0u64;
    let mut done = 0u64;
    let mut ch0 = 0u64;
    while ch0 < chunks {
        let ch1 = (ch0 + ROUND).min(chunks);
        let counts: Vec<u64> = (ch0..ch1)
            .into_par_iter()
            .map(|ch| {
                let mut n = vec![0.0; d];
                let mut e = 0;
                for t in ch * CHUNK..((ch + 1) * CHUNK).min(trials) {
                    let mut rng = stream(seed, domain, t);
                    noise_sample(ctx, sim, 0.0, &mut rng, &mut n);
                    if tube_label(&n, 0.0, ctx).iter().any(|&x| x != 0) {
                        e += 1;
                    }
                }
                e
            })
            .collect();
        errors += counts.iter().sum::<u64>();
        done = (ch1 * CHUNK).min(trials);
        ch0 = ch1;
        if stop_at.is_some_and(|s| errors >= s) {
            return ErrorCount {
                errors,
                trials: done,
                planned: trials,
                stopped_early: ch0 < chunks,
            };
        }
    }
    ErrorCount {
        errors,
        trials: done,
        planned: trials,
        stopped_early: false,
    }
}

/// Frequency of unwrapping errors at `v = 0`.
pub fn unwrap_error_prob(s: &SnrMatrix, vencs: &VencSet, trials: u64, seed: u64, noise: NoiseModel) -> Result<f64> {
    if trials == 0 {
        return Err(PromError::InvalidArgument("need at least one trial".into()));
    }
    let ctx = TubeContext::from_snr(vencs, s)?;
    let sim = match noise {
        NoiseModel::Gaussian => None,
        NoiseModel::Complex => {
            let scheme = referenced_scheme(vencs)?;
            Some((VoxelSimulator::new(&scheme, s)?, vencs.clone()))
        }
    };
    Ok(count_unwrap_errors(&ctx, sim.as_ref(), trials, seed, None).frequency())
}

/// Jacobian of the stacked noiseless measurements (encoding-major, then coil)
/// with respect to `[v, phi0, A_1..A_Ne, Re S_2, Im S_2, ..]`. `S_1` is held
/// fixed to remove the amplitude and phase gauge.
pub fn crlb_jacobian(gt: &VoxelGroundTruth, scheme: &EncodingScheme) -> Result<DMatrix<Complex64>> {
    let y = gt.noiseless(scheme)?;
    let m = scheme.gamma_m1();
    let (ne, nc) = (m.len(), gt.sensitivities.len());
    let np = 2 + ne + 2 * (nc - 1);
    let i = Complex64::i();
    let mut j = DMatrix::from_element(ne * nc, np, Complex64::new(0.0, 0.0));
    for a in 0..ne {
        let e = Complex64::from_polar(1.0, gt.phi0 + m[a] * gt.v);
        for c in 0..nc {
            let r = a * nc + c;
            let mu = y.get(a, c);
            j[(r, 0)] = i * m[a] * mu;
            j[(r, 1)] = i * mu;
            j[(r, 2 + a)] = e * gt.sensitivities[c];
            if c > 0 {
                let col = 2 + ne + 2 * (c - 1);
                j[(r, col)] = e * gt.amplitudes[a];
                j[(r, col + 1)] = i * e * gt.amplitudes[a];
            }
        }
    }
    Ok(j)
}

/// Central-difference version of [`crlb_jacobian`].
pub fn crlb_jacobian_fd(gt: &VoxelGroundTruth, scheme: &EncodingScheme, step: f64) -> Result<DMatrix<Complex64>> {
    let ne = scheme.num_encodings();
    let nc = gt.sensitivities.len();
    let np = 2 + ne + 2 * (nc - 1);
    let perturbed = |k: usize, d: f64| -> Result<Vec<Complex64>> {
        let mut g = gt.clone();
        match k {
            0 => g.v += d,
            1 => g.phi0 += d,
            k if k < 2 + ne => g.amplitudes[k - 2] += d,
            k => {
                let c = 1 + (k - 2 - ne) / 2;
                if (k - 2 - ne).is_multiple_of(2) {
                    g.sensitivities[c].re += d;
                } else {
                    g.sensitivities[c].im += d;
                }
            }
        }
        // amplitudes may step below zero in the difference stencil
        g.amplitudes.iter_mut().for_each(|a| *a = a.max(0.0));
        Ok(g.noiseless(scheme)?.as_slice().to_vec())
    };
    let mut j = DMatrix::from_element(ne * nc, np, Complex64::new(0.0, 0.0));
    for k in 0..np {
        let hi = perturbed(k, step)?;
        let lo = perturbed(k, -step)?;
        for r in 0..ne * nc {
            j[(r, k)] = (hi[r] - lo[r]) / (2.0 * step);
        }
    }
    Ok(j)
}

fn crlb_from_jacobian(j: &DMatrix<Complex64>, sigma: f64) -> Result<f64> {
    let jh = j.adjoint() * j;
    let fim = jh.map(|z| z.re) * (2.0 / (sigma * sigma));
    let eig = SymmetricEigen::new(fim.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(PromError::NonIdentifiable(format!(
            "Fisher information is singular (eigenvalues {min:e} .. {max:e})"
        )));
    }
    let inv = fim
        .try_inverse()
        .ok_or_else(|| PromError::NonIdentifiable("Fisher information is singular".into()))?;
    Ok(inv[(0, 0)])
}

/// Cramér-Rao bound on the variance of any unbiased velocity estimate, (cm/s)^2.
pub fn crlb_velocity(gt: &VoxelGroundTruth, scheme: &EncodingScheme) -> Result<f64> {
    crlb_from_jacobian(&crlb_jacobian(gt, scheme)?, gt.sigma)
}

/// Same bound using the finite-difference Jacobian.
pub fn crlb_velocity_fd(gt: &VoxelGroundTruth, scheme: &EncodingScheme, step: f64) -> Result<f64> {
    crlb_from_jacobian(&crlb_jacobian_fd(gt, scheme, step)?, gt.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::congruence::symmetric_moments_from_vencs;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fig5() -> (EncodingScheme, VencSet) {
        let scheme = symmetric_moments_from_vencs(18.0, 22.0).unwrap();
        let vencs = scheme.vencs();
        (scheme, vencs)
    }

    fn fig5_snr(s21: f64) -> SnrMatrix {
        SnrMatrix::per_encoding(&[s21 / 2.0, s21, s21 / 2.0], 1).unwrap()
    }

    #[test]
    fn fig5_scheme_has_expected_vencs() {
        let (_, vencs) = fig5();
        for (a, b) in vencs.values().iter().zip([99.0, 18.0, 22.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((vencs.unambiguous_range().unwrap() - 396.0).abs() < 1e-9);
    }

    #[test]
    fn zero_noise_is_tube_zero() {
        let (_, vencs) = fig5();
        let ctx = TubeContext::from_snr(&vencs, &fig5_snr(5.0)).unwrap();
        for v in [-190.0, -3.3, 0.0, 41.0, 197.9] {
            assert_eq!(tube_label(&[0.0; 3], v, &ctx), vec![0, 0, 0]);
        }
    }

    #[test]
    fn canonical_label_is_periodic_in_h() {
        let (_, vencs) = fig5();
        let ctx = TubeContext::from_snr(&vencs, &fig5_snr(5.0)).unwrap();
        let h = ctx.h().to_vec();
        let x = vec![1, 5, 4];
        let c = ctx.canonical(&x);
        for j in [-3i64, -1, 2] {
            let y: Vec<i64> = x.iter().zip(&h).map(|(a, b)| a + j * b).collect();
            assert_eq!(ctx.canonical(&y), c);
        }
        let s = ctx.shift(&c);
        assert!((-198.0..198.0).contains(&s));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn labels_are_shift_invariant(
            n in proptest::collection::vec(-25.0f64..25.0, 3),
            eta in -60.0f64..60.0,
            v in -198.0f64..198.0,
        ) {
            let (_, vencs) = fig5();
            let ctx = TubeContext::from_snr(&vencs, &fig5_snr(5.0)).unwrap();
            let a = tube_label(&n, v, &ctx);
            let shifted: Vec<f64> = n.iter().map(|x| x + eta).collect();
            let b = tube_label(&shifted, v, &ctx);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn weights_do_not_depend_on_v() {
        let (scheme, _) = fig5();
        let s = fig5_snr(5.0);
        let a = label_distribution(0.0, &s, &scheme, 20_000, 8, NoiseModel::Gaussian).unwrap();
        let b = label_distribution(132.0, &s, &scheme, 20_000, 8, NoiseModel::Gaussian).unwrap();
        let wa: Vec<(Vec<i64>, f64)> = a.components.iter().map(|c| (c.x.clone(), c.weight)).collect();
        let wb: Vec<(Vec<i64>, f64)> = b.components.iter().map(|c| (c.x.clone(), c.weight)).collect();
        assert_eq!(wa, wb);
        let total: f64 = a.components.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(a.components.iter().all(|c| c.variance == a.components[0].variance));
    }

    #[test]
    fn sampled_estimates_sit_on_mixture_components() {
        let (scheme, vencs) = fig5();
        let omega = vencs.unambiguous_range().unwrap();
        let s = fig5_snr(5.0);
        let n = 20_000u64;
        let est = sample_estimates(30.0, &s, &scheme, n, 4, NoiseModel::Gaussian).unwrap();
        let dist = label_distribution(30.0, &s, &scheme, n, 5, NoiseModel::Gaussian).unwrap();
        let sd = dist.components[0].variance.sqrt();
        let near = |x: f64, c: f64| wrapped_diff(x, c, omega).abs() < 8.0 * sd;
        assert!(est.iter().all(|&x| (-omega / 2.0..omega / 2.0).contains(&x)));
        assert!(est.iter().all(|&x| dist.components.iter().any(|c| near(x, c.center))));
        let w0 = dist.weight_of(&vec![0; vencs.len()]);
        let f0 = est.iter().filter(|&&x| near(x, 30.0)).count() as f64 / n as f64;
        let tol = 6.0 * (2.0 * w0 * (1.0 - w0) / n as f64).sqrt() + 1e-3;
        assert!((f0 - w0).abs() < tol, "{f0} vs {w0}");
    }

    #[test]
    fn infinite_snr_has_one_component() {
        let (scheme, _) = fig5();
        let d = estimate_distribution(17.0, &fig5_snr(500.0), &scheme, 10_000, 5, 3).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].weight, 1.0);
        assert!((d[0].center - 17.0).abs() < 1e-9);
        assert!(estimate_distribution(0.0, &fig5_snr(5.0), &scheme, 100, 5, 3).is_err());
    }

    #[test]
    fn error_probability_scale_invariance() {
        let (_, vencs) = fig5();
        let s = fig5_snr(5.0);
        let a = unwrap_error_prob(&s, &vencs, 20_000, 4, NoiseModel::Gaussian).unwrap();
        let b = unwrap_error_prob(&s, &vencs.scaled(2.5).unwrap(), 20_000, 4, NoiseModel::Gaussian).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
        let big = unwrap_error_prob(&s.scaled(1000.0), &vencs, 10_000, 4, NoiseModel::Gaussian).unwrap();
        assert_eq!(big, 0.0);
    }

    #[test]
    fn error_count_matches_distribution_and_stops_early() {
        let (scheme, vencs) = fig5();
        let s = fig5_snr(5.0);
        let ctx = TubeContext::from_snr(&vencs, &s).unwrap();
        let full = count_unwrap_errors(&ctx, None, 50_000, 11, None);
        let dist = label_distribution(0.0, &s, &scheme, 50_000, 11, NoiseModel::Gaussian).unwrap();
        // different streams, same law
        let p = 1.0 - dist.weight_of(&[0, 0, 0]);
        let q = full.frequency();
        assert!(
            (p - q).abs() < 4.0 * (p * (1.0 - p) / 50_000.0).sqrt() + 1e-4,
            "{p} vs {q}"
        );
        let early = count_unwrap_errors(&ctx, None, 10_000_000, 11, Some(10));
        assert!(early.stopped_early && early.errors >= 10 && early.trials < 10_000_000);
    }

    #[test]
    fn complex_noise_model_agrees_at_high_snr() {
        let (scheme, vencs) = fig5();
        let s = fig5_snr(8.0);
        let g = unwrap_error_prob(&s, &vencs, 100_000, 2, NoiseModel::Gaussian).unwrap();
        let c = unwrap_error_prob(&s, &vencs, 100_000, 2, NoiseModel::Complex).unwrap();
        assert!(g > 0.0 && c > 0.0);
        assert!((g / c).ln().abs() < 0.4, "{g} vs {c}");
        let _ = scheme;
    }

    fn crlb_case(nc: usize) -> (VoxelGroundTruth, EncodingScheme) {
        let scheme = symmetric_moments_from_vencs(6.0, 10.0).unwrap();
        let sens = (0..nc)
            .map(|c| Complex64::from_polar(1.0 - 0.2 * c as f64, 0.5 * c as f64))
            .collect();
        (
            VoxelGroundTruth {
                v: 4.0,
                phi0: 0.3,
                amplitudes: vec![2.5, 5.0, 2.5],
                sensitivities: sens,
                sigma: 1.0,
            },
            scheme,
        )
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        for nc in [1, 3] {
            let (gt, scheme) = crlb_case(nc);
            let a = crlb_jacobian(&gt, &scheme).unwrap();
            let f = crlb_jacobian_fd(&gt, &scheme, 1e-6).unwrap();
            for (x, y) in a.iter().zip(f.iter()) {
                assert!((x - y).norm() <= 1e-5 * x.norm().max(1.0), "{x} vs {y}");
            }
            let b = crlb_velocity(&gt, &scheme).unwrap();
            let bf = crlb_velocity_fd(&gt, &scheme, 1e-6).unwrap();
            assert!((b / bf - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn crlb_scales_with_noise_variance() {
        let (mut gt, scheme) = crlb_case(1);
        let b1 = crlb_velocity(&gt, &scheme).unwrap();
        gt.sigma = 2.0;
        let b2 = crlb_velocity(&gt, &scheme).unwrap();
        assert!((b2 / b1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn crlb_single_coil_closed_form() {
        // With phase and amplitudes free, only the phase differences inform v:
        // 1 / Var = 2 / sigma^2 * (sum A^2 m^2 - (sum A^2 m)^2 / sum A^2).
        let (gt, scheme) = crlb_case(1);
        let m = scheme.gamma_m1();
        let a2: Vec<f64> = gt.amplitudes.iter().map(|a| a * a).collect();
        let s0: f64 = a2.iter().sum();
        let s1: f64 = a2.iter().zip(m).map(|(a, m)| a * m).sum();
        let s2: f64 = a2.iter().zip(m).map(|(a, m)| a * m * m).sum();
        let want = 1.0 / (2.0 * (s2 - s1 * s1 / s0));
        let got = crlb_velocity(&gt, &scheme).unwrap();
        assert!((got / want - 1.0).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn zero_amplitude_is_not_identifiable() {
        let (mut gt, scheme) = crlb_case(2);
        gt.amplitudes = vec![0.0; 3];
        assert!(matches!(
            crlb_velocity(&gt, &scheme),
            Err(PromError::NonIdentifiable(_))
        ));
    }

    #[test]
    fn gaussian_draws_have_model_covariance() {
        let (_, vencs) = fig5();
        let s = fig5_snr(5.0);
        let ctx = TubeContext::from_snr(&vencs, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        let mut n = vec![0.0; 3];
        for _ in 0..50_000 {
            ctx.draw(&mut rng, &mut n);
            rows.push(n.clone());
        }
        let got = crate::covariance::sample_covariance(&rows).unwrap();
        let want = velocity_cov(&model_phase_cov(&s).unwrap(), &vencs).unwrap();
        assert!((got - &want).norm() < 0.03 * want.norm());
    }
}
