//! Noise covariance of the pairwise phase differences.
//!
//! For each pair `(a, b)` the first-order phase noise of `theta_ab` is a
//! weighted sum of the per-coil phase noise of encodings `a` and `b`. Two pairs
//! that share an encoding `e` inherit a covariance term from it, with a sign set
//! by whether `e` sits on the same side of both differences.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::congruence::{pair_order, VencSet};
use crate::error::{PromError, Result};
use crate::measurement::MeasurementMatrix;

/// Signal-to-noise ratios `s_ab = |A_a S_b| / sigma`, `Ne x Nc`, row-major by encoding.
///
/// In JSON either a flat list (one coil) or a list of per-encoding rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SnrRows", into = "SnrRows")]
pub struct SnrMatrix {
    ne: usize,
    nc: usize,
    s: Vec<f64>,
}

impl SnrMatrix {
    pub fn new(ne: usize, nc: usize, s: Vec<f64>) -> Result<Self> {
        if ne < 2 || nc < 1 || s.len() != ne * nc {
            return Err(PromError::Dimension(format!(
                "{} SNR values for a {ne} x {nc} matrix",
                s.len()
            )));
        }
        if let Some(bad) = s.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(PromError::InvalidArgument(format!(
                "SNR entries must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(Self { ne, nc, s })
    }

    /// Same SNR on every coil for each encoding.
    pub fn per_encoding(s: &[f64], nc: usize) -> Result<Self> {
        let data = s.iter().flat_map(|&x| std::iter::repeat_n(x, nc)).collect();
        Self::new(s.len(), nc, data)
    }

    /// Rank-one SNR from amplitudes, coil sensitivity magnitudes and noise std.
    pub fn from_model(amplitudes: &[f64], sensitivity_mags: &[f64], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(PromError::InvalidArgument(format!(
                "noise std must be positive, got {sigma}"
            )));
        }
        let data = amplitudes
            .iter()
            .flat_map(|a| sensitivity_mags.iter().map(move |s| a * s / sigma))
            .collect();
        Self::new(amplitudes.len(), sensitivity_mags.len(), data)
    }

    pub fn num_encodings(&self) -> usize {
        self.ne
    }

    pub fn num_coils(&self) -> usize {
        self.nc
    }

    #[inline]
    pub fn get(&self, encoding: usize, coil: usize) -> f64 {
        self.s[encoding * self.nc + coil]
    }

    pub fn row(&self, encoding: usize) -> &[f64] {
        &self.s[encoding * self.nc..(encoding + 1) * self.nc]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.s
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            ne: self.ne,
            nc: self.nc,
            s: self.s.iter().map(|x| x * t).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SnrRows {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl TryFrom<SnrRows> for SnrMatrix {
    type Error = PromError;
    fn try_from(r: SnrRows) -> Result<Self> {
        match r {
            SnrRows::Flat(s) => SnrMatrix::per_encoding(&s, 1),
            SnrRows::Rows(rows) => {
                let nc = rows.first().map_or(0, |r| r.len());
                if rows.iter().any(|r| r.len() != nc) {
                    return Err(PromError::Dimension("SNR rows differ in length".into()));
                }
                SnrMatrix::new(rows.len(), nc, rows.concat())
            }
        }
    }
}

impl From<SnrMatrix> for SnrRows {
    fn from(s: SnrMatrix) -> Self {
        if s.nc == 1 {
            SnrRows::Flat(s.s)
        } else {
            SnrRows::Rows(s.s.chunks(s.nc).map(|r| r.to_vec()).collect())
        }
    }
}

/// Pairwise phase covariance in canonical pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCovariance {
    pub sigma: DMatrix<f64>,
    /// `false` for the data-driven form, which is only known up to a global scale.
    pub scale_known: bool,
}

/// Covariance of the phase differences given known SNRs.
pub fn model_phase_cov(s: &SnrMatrix) -> Result<PhaseCovariance> {
    let sigma = pair_cov(s.ne, s.nc, &s.s, 1.0)?;
    Ok(PhaseCovariance {
        sigma,
        scale_known: true,
    })
}

/// Scaled covariance estimated from the measured magnitudes, PSD-projected.
pub fn data_phase_cov(y: &MeasurementMatrix) -> Result<PhaseCovariance> {
    if let Some(encoding) = y.zero_row() {
        return Err(PromError::MaskedVoxel { encoding });
    }
    let mags = y.magnitudes();
    let sigma = pair_cov(y.num_encodings(), y.num_coils(), &mags, 0.0)?;
    Ok(PhaseCovariance {
        sigma: psd_project(&sigma),
        scale_known: false,
    })
}

/// `m` holds per-coil magnitudes (`Ne x Nc`); `unit` is the additive term of
/// the diagonal numerator per coil (1 for the model form, 0 for data).
fn pair_cov(ne: usize, nc: usize, m: &[f64], unit: f64) -> Result<DMatrix<f64>> {
    let row = |a: usize| &m[a * nc..(a + 1) * nc];
    let dot = |a: usize, b: usize| -> f64 { row(a).iter().zip(row(b)).map(|(x, y)| x * y).sum() };
    let pairs = pair_order(ne);
    let d = pairs.len();

    let mut cross = vec![0.0; d];
    for (i, &(a, b)) in pairs.iter().enumerate() {
        cross[i] = dot(a, b);
        if !(cross[i] > 0.0) {
            return Err(PromError::SingularPair {
                pair: format!("{}{}", a + 1, b + 1),
            });
        }
    }

    let mut sigma = DMatrix::zeros(d, d);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let num = dot(a, a) + dot(b, b) + unit * nc as f64;
        sigma[(i, i)] = num / (2.0 * cross[i] * cross[i]);
        for (j, &(c, e)) in pairs.iter().enumerate().skip(i + 1) {
            // shared encoding, its role sign in each pair, and the two others
            let (shared, sign, x, z) = if a == c {
                (a, 1.0, b, e)
            } else if b == e {
                (b, 1.0, a, c)
            } else if a == e {
                (a, -1.0, b, c)
            } else if b == c {
                (b, -1.0, a, e)
            } else {
                continue;
            };
            let v = sign * dot(x, z) / (2.0 * dot(x, shared) * dot(z, shared));
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(sigma)
}

/// Frobenius-nearest positive semi-definite matrix: clamp eigenvalues at zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    (&out + out.transpose()) * 0.5
}

/// Velocity-domain noise covariance `diag(venc) P(Sigma) diag(venc) / pi^2`.
pub fn velocity_cov(theta_cov: &PhaseCovariance, vencs: &VencSet) -> Result<DMatrix<f64>> {
    let d = vencs.len();
    if theta_cov.sigma.nrows() != d || theta_cov.sigma.ncols() != d {
        return Err(PromError::Dimension(format!(
            "{}x{} phase covariance for {d} vencs",
            theta_cov.sigma.nrows(),
            theta_cov.sigma.ncols()
        )));
    }
    let p = psd_project(&theta_cov.sigma);
    let v = vencs.values();
    Ok(DMatrix::from_fn(d, d, |i, j| p[(i, j)] * v[i] * v[j] / (PI * PI)))
}

/// `Trace(A^T B) / (|A|_F |B|_F)`.
pub fn cosine_similarity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(PromError::Dimension(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(PromError::UndefinedSimilarity(
            "cosine similarity with a zero matrix".into(),
        ));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unbiased sample covariance of row vectors.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if n < 2 || d == 0 {
        return Err(PromError::InvalidArgument(
            "sample covariance needs at least two samples".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut c = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    Ok(c / (n - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fig_snr() -> SnrMatrix {
        SnrMatrix::new(3, 1, vec![2.5, 5.0, 2.5]).unwrap()
    }

    #[test]
    fn model_examples() {
        let c = model_phase_cov(&fig_snr()).unwrap().sigma;
        assert!((c[(0, 0)] - 32.25 / 312.5).abs() < 1e-12);
        assert!((c[(0, 1)] - 0.08).abs() < 1e-12);
        assert!((c[(0, 2)] + 0.02).abs() < 1e-12);
        // pairs 31 and 32 share encoding 3 as minuend
        assert!((c[(1, 2)] - 1.0 / (2.0 * 2.5 * 2.5)).abs() < 1e-12);
    }

    #[test]
    fn four_point_disjoint_pairs_uncorrelated() {
        let s = SnrMatrix::new(4, 1, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = model_phase_cov(&s).unwrap().sigma;
        // 21 and 43 share nothing
        assert_eq!(c[(0, 5)], 0.0);
        // 21 vs 42: encoding 2 is subtrahend in 42, minuend in 21
        assert!((c[(0, 4)] + 1.0 / (2.0 * 16.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_snr_pair_is_singular() {
        let s = SnrMatrix::new(3, 1, vec![0.0, 5.0, 2.5]).unwrap();
        assert!(matches!(model_phase_cov(&s), Err(PromError::SingularPair { .. })));
    }

    fn noiseless(mags: &[f64], nc: usize) -> MeasurementMatrix {
        let mut y = MeasurementMatrix::zeros(mags.len(), nc);
        for (a, m) in mags.iter().enumerate() {
            for c in 0..nc {
                y.set(a, c, Complex64::from_polar(*m, 0.4 * a as f64 + c as f64));
            }
        }
        y
    }

    #[test]
    fn data_form_matches_model_without_unit_term() {
        let y = noiseless(&[2.5, 5.0, 2.5], 1);
        let c = data_phase_cov(&y).unwrap();
        assert!(!c.scale_known);
        let m = pair_cov(3, 1, &[2.5, 5.0, 2.5], 0.0).unwrap();
        assert!((&c.sigma - &m).norm() < 1e-12);
        // only the diagonal +1 term separates it from the model form
        let model = model_phase_cov(&fig_snr()).unwrap().sigma;
        assert!((c.sigma[(0, 1)] - model[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn duplicated_coils_halve_data_covariance() {
        let one = data_phase_cov(&noiseless(&[2.5, 5.0, 2.5], 1)).unwrap().sigma;
        let mut two = MeasurementMatrix::zeros(3, 2);
        let base = noiseless(&[2.5, 5.0, 2.5], 1);
        for a in 0..3 {
            two.set(a, 0, base.get(a, 0));
            two.set(a, 1, base.get(a, 0));
        }
        let two = data_phase_cov(&two).unwrap().sigma;
        assert!((one * 0.5 - two).norm() < 1e-12);
    }

    #[test]
    fn data_form_masked_row() {
        let y = noiseless(&[2.5, 0.0, 2.5], 2);
        assert!(matches!(
            data_phase_cov(&y),
            Err(PromError::MaskedVoxel { encoding: 1 })
        ));
    }

    #[test]
    fn psd_examples() {
        let p = psd_project(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        assert!((p - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
        let p = psd_project(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert!((p - DMatrix::from_element(2, 2, 0.5)).norm() < 1e-12);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert!((psd_project(&a) - &a).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn velocity_cov_examples() {
        let vencs = VencSet::new(vec![35.0, 10.0, 14.0]).unwrap();
        let id = PhaseCovariance {
            sigma: DMatrix::identity(3, 3),
            scale_known: true,
        };
        let s = velocity_cov(&id, &vencs).unwrap();
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![35.0 * 35.0, 100.0, 196.0])) / (PI * PI);
        assert!((s - want).norm() < 1e-10);

        let theta = model_phase_cov(&fig_snr()).unwrap();
        let s = velocity_cov(&theta, &vencs).unwrap();
        assert!((s[(0, 0)] - 0.1032 * 35.0 * 35.0 / (PI * PI)).abs() < 1e-9 + 1e-6);
        let s2 = velocity_cov(&theta, &vencs.scaled(3.0).unwrap()).unwrap();
        assert!((s * 9.0 - s2).norm() < 1e-9);
    }

    #[test]
    fn cosine_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((cosine_similarity(&i, &i).unwrap() - 1.0).abs() < 1e-15);
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(cosine_similarity(&i, &x).unwrap(), 0.0);
        assert!(cosine_similarity(&i, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn sample_variance_converges_to_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::Normal::new(0.0, (0.5f64).sqrt()).unwrap();
        for s in [[5.0, 5.0, 5.0], [5.0, 10.0, 5.0]] {
            let theta = model_phase_cov(&SnrMatrix::new(3, 1, s.to_vec()).unwrap()).unwrap();
            let n = 100_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let mut y = MeasurementMatrix::zeros(3, 1);
                for (a, sa) in s.iter().enumerate() {
                    y.set(a, 0, Complex64::new(sa + rng.sample(normal), rng.sample(normal)));
                }
                let r = y.conjugate_products()[0];
                acc += r.arg() * r.arg();
            }
            let var = acc / n as f64;
            let rel = (var - theta.sigma[(0, 0)]).abs() / theta.sigma[(0, 0)];
            assert!(rel < 0.05, "{s:?}: empirical {var} vs model {}", theta.sigma[(0, 0)]);
        }
    }

    proptest! {
        #[test]
        fn coil_permutation_invariant(v in proptest::collection::vec(0.5f64..20.0, 9), rot in 0usize..3) {
            let s = SnrMatrix::new(3, 3, v.clone()).unwrap();
            let mut p = vec![0.0; 9];
            for a in 0..3 {
                for c in 0..3 {
                    p[a * 3 + (c + rot) % 3] = v[a * 3 + c];
                }
            }
            let sp = SnrMatrix::new(3, 3, p).unwrap();
            let (c0, c1) = (model_phase_cov(&s).unwrap().sigma, model_phase_cov(&sp).unwrap().sigma);
            prop_assert!((c0 - c1).norm() < 1e-12);
        }

        #[test]
        fn magnitude_rescale(mags in proptest::collection::vec(0.5f64..20.0, 6), t in 0.1f64..10.0) {
            let mut y = MeasurementMatrix::zeros(3, 2);
            for (i, m) in mags.iter().enumerate() {
                y.set(i / 2, i % 2, Complex64::from_polar(*m, i as f64));
            }
            let mut yt = y.clone();
            for z in yt.as_mut_slice() {
                *z *= t;
            }
            let c0 = data_phase_cov(&y).unwrap().sigma;
            let c1 = data_phase_cov(&yt).unwrap().sigma;
            prop_assert!((c0 / (t * t) - &c1).norm() <= 1e-10 * c1.norm());
        }

        #[test]
        fn psd_projection_properties(e in proptest::collection::vec(-5.0f64..5.0, 9), seed in 0u64..1000) {
            let m = DMatrix::from_row_slice(3, 3, &e);
            let p = psd_project(&m);
            prop_assert!((&p - p.transpose()).norm() < 1e-12);
            let eig = SymmetricEigen::new(p.clone());
            let lmax = eig.eigenvalues.max().max(0.0);
            prop_assert!(eig.eigenvalues.min() >= -1e-12 * lmax.max(1.0));
            prop_assert!((psd_project(&p) - &p).norm() < 1e-10 * p.norm().max(1.0));
            let sym = (&m + m.transpose()) * 0.5;
            let dist = (&sym - &p).norm();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-3.0..3.0));
                let q = &b * b.transpose();
                prop_assert!(dist <= (&sym - &q).norm() + 1e-9);
            }
        }
    }
}
