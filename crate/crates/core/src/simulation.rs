//! Synthetic multi-coil data, the vessel phantom, and Monte Carlo RMSE sweeps.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::congruence::{pair_order, EncodingScheme};
use crate::covariance::{cosine_similarity, data_phase_cov, model_phase_cov, sample_covariance, SnrMatrix};
use crate::error::{PromError, Result};
use crate::measurement::{MeasurementField, MeasurementMatrix};
use crate::rng::{derive_seed, stream, tag};
use crate::voxel::{EstimatorId, EstimatorOptions, VoxelEstimator};

/// Trials per work unit. Sums are formed per chunk and then added in chunk
/// order, so the result does not depend on the thread count.
const CHUNK: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGroundTruth {
    pub v: f64,
    pub phi0: f64,
    pub amplitudes: Vec<f64>,
    pub sensitivities: Vec<Complex64>,
    pub sigma: f64,
}

impl VoxelGroundTruth {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(PromError::InvalidArgument(format!(
                "noise std must be positive, got {}",
                self.sigma
            )));
        }
        if self.amplitudes.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(PromError::InvalidArgument("amplitudes must be finite and >= 0".into()));
        }
        if self.sensitivities.is_empty() {
            return Err(PromError::Dimension("need at least one coil".into()));
        }
        Ok(())
    }

    /// Rank-one ground truth (`sigma = 1`, real sensitivities) with the given SNRs.
    pub fn from_snr(s: &SnrMatrix, v: f64, phi0: f64) -> Result<Self> {
        let (ne, nc) = (s.num_encodings(), s.num_coils());
        let (a, c) = (0..ne)
            .flat_map(|a| (0..nc).map(move |c| (a, c)))
            .find(|&(a, c)| s.get(a, c) > 0.0)
            .ok_or_else(|| PromError::InvalidArgument("all SNRs are zero".into()))?;
        let pivot = s.get(a, c);
        let amplitudes: Vec<f64> = (0..ne).map(|e| s.get(e, c)).collect();
        let sens: Vec<f64> = (0..nc).map(|b| s.get(a, b) / pivot).collect();
        for e in 0..ne {
            for b in 0..nc {
                let want = amplitudes[e] * sens[b];
                if (s.get(e, b) - want).abs() > 1e-9 * (1.0 + want.abs()) {
                    return Err(PromError::InvalidArgument(
                        "SNR matrix is not rank one (amplitude x sensitivity)".into(),
                    ));
                }
            }
        }
        Ok(Self {
            v,
            phi0,
            amplitudes,
            sensitivities: sens.into_iter().map(|x| Complex64::new(x, 0.0)).collect(),
            sigma: 1.0,
        })
    }

    pub fn snr(&self) -> Result<SnrMatrix> {
        let mags: Vec<f64> = self.sensitivities.iter().map(|z| z.norm()).collect();
        SnrMatrix::from_model(&self.amplitudes, &mags, self.sigma)
    }

    pub fn noiseless(&self, scheme: &EncodingScheme) -> Result<MeasurementMatrix> {
        self.validate()?;
        let m = scheme.gamma_m1();
        if m.len() != self.amplitudes.len() {
            return Err(PromError::Dimension(format!(
                "{} amplitudes for {} encodings",
                self.amplitudes.len(),
                m.len()
            )));
        }
        let nc = self.sensitivities.len();
        let mut y = MeasurementMatrix::zeros(m.len(), nc);
        for (a, (&amp, &ma)) in self.amplitudes.iter().zip(m).enumerate() {
            let e = Complex64::from_polar(amp, self.phi0 + ma * self.v);
            for (c, s) in self.sensitivities.iter().enumerate() {
                y.set(a, c, e * s);
            }
        }
        Ok(y)
    }
}

/// Adds circular complex Gaussian noise of total variance `sigma^2` to every entry.
pub fn add_noise<R: Rng + ?Sized>(y: &mut MeasurementMatrix, sigma: f64, rng: &mut R) {
    let sd = sigma / 2f64.sqrt();
    for z in y.as_mut_slice() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *z += Complex64::new(sd * re, sd * im);
    }
}

pub fn synth_voxel<R: Rng + ?Sized>(
    gt: &VoxelGroundTruth,
    scheme: &EncodingScheme,
    rng: &mut R,
) -> Result<MeasurementMatrix> {
    let mut y = gt.noiseless(scheme)?;
    add_noise(&mut y, gt.sigma, rng);
    Ok(y)
}

/// Reusable generator for many voxels sharing amplitudes and sensitivities.
#[derive(Debug, Clone)]
pub struct VoxelSimulator {
    gamma_m1: Vec<f64>,
    /// `A_a S_b`, row-major by encoding.
    gain: Vec<Complex64>,
    nc: usize,
    sigma: f64,
}

impl VoxelSimulator {
    pub fn new(scheme: &EncodingScheme, s: &SnrMatrix) -> Result<Self> {
        if s.num_encodings() != scheme.num_encodings() {
            return Err(PromError::Dimension(format!(
                "SNR matrix has {} encodings, scheme has {}",
                s.num_encodings(),
                scheme.num_encodings()
            )));
        }
        let gt = VoxelGroundTruth::from_snr(s, 0.0, 0.0)?;
        let gain = gt
            .amplitudes
            .iter()
            .flat_map(|a| gt.sensitivities.iter().map(move |c| c * *a))
            .collect();
        Ok(Self {
            gamma_m1: scheme.gamma_m1().to_vec(),
            gain,
            nc: gt.sensitivities.len(),
            sigma: gt.sigma,
        })
    }

    pub fn zeros(&self) -> MeasurementMatrix {
        MeasurementMatrix::zeros(self.gamma_m1.len(), self.nc)
    }

    pub fn fill<R: Rng + ?Sized>(&self, v: f64, phi0: f64, rng: &mut R, y: &mut MeasurementMatrix) {
        let nc = self.nc;
        let out = y.as_mut_slice();
        for (a, m) in self.gamma_m1.iter().enumerate() {
            let e = Complex64::from_polar(1.0, phi0 + m * v);
            for c in 0..nc {
                out[a * nc + c] = self.gain[a * nc + c] * e;
            }
        }
        add_noise(y, self.sigma, rng);
    }
}

/// One point of an RMSE curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsePoint {
    pub v: f64,
    pub rmse: f64,
    pub bias: f64,
    pub trials: u64,
    /// Trials where the estimator returned an error (counted as excluded).
    pub failures: u64,
}

/// RMSE of one estimator at each true velocity.
///
/// The common phase is drawn uniformly per trial. Errors are taken modulo
/// the unambiguous range, except for SDV.
pub fn monte_carlo_rmse(
    id: EstimatorId,
    scheme: &EncodingScheme,
    s: &SnrMatrix,
    velocities: &[f64],
    trials: u64,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<Vec<RmsePoint>> {
    let est = VoxelEstimator::new(id, scheme, opts)?;
    monte_carlo_rmse_with(&est, scheme, s, velocities, trials, seed)
}

pub fn monte_carlo_rmse_with(
    est: &VoxelEstimator,
    scheme: &EncodingScheme,
    s: &SnrMatrix,
    velocities: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<RmsePoint>> {
    if trials == 0 {
        return Err(PromError::InvalidArgument("need at least one trial".into()));
    }
    let sim = VoxelSimulator::new(scheme, s)?;
    let chunks = trials.div_ceil(CHUNK);
    let domain = tag("simulation/rmse");
    let parts: Vec<(f64, f64, u64)> = (0..velocities.len() as u64 * chunks)
        .into_par_iter()
        .map(|job| {
            let (i, ch) = (job / chunks, job % chunks);
            let v = velocities[i as usize];
            let key = derive_seed(domain, i);
            let mut y = sim.zeros();
            let (mut sq, mut sum, mut fail) = (0.0, 0.0, 0u64);
            for t in ch * CHUNK..((ch + 1) * CHUNK).min(trials) {
                let mut rng = stream(seed, key, t);
                let phi0 = rng.gen::<f64>() * 2.0 * PI;
                sim.fill(v, phi0, &mut rng, &mut y);
                match est.estimate(&y) {
                    Ok(vh) => {
                        let e = est.error(vh, v);
                        sq += e * e;
                        sum += e;
                    }
                    Err(_) => fail += 1,
                }
            }
            (sq, sum, fail)
        })
        .collect();
    Ok(velocities
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mine = &parts[i * chunks as usize..(i + 1) * chunks as usize];
            let (sq, sum, fail) = mine
                .iter()
                .fold((0.0, 0.0, 0u64), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
            let n = (trials - fail).max(1) as f64;
            RmsePoint {
                v,
                rmse: (sq / n).sqrt(),
                bias: sum / n,
                trials,
                failures: fail,
            }
        })
        .collect())
}

/// Inclusive velocity grid `lo, lo + step, ..., hi`.
pub fn velocity_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
        return Err(PromError::InvalidArgument(format!(
            "bad velocity grid [{lo}, {hi}] step {step}"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

/// Agreement between the modeled phase-difference covariance and the sample
/// covariance at one SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPoint {
    /// Mean over draws of the similarity of each draw's data-driven covariance.
    pub data_model: f64,
    /// Similarity of the known-SNR covariance.
    pub known_model: f64,
    /// Similarity of a scaled identity.
    pub identity: f64,
}

/// Phase-difference noise at `v = 0` over `draws` realizations, compared with
/// the covariance models.
pub fn covariance_similarity(scheme: &EncodingScheme, s: &SnrMatrix, draws: u64, seed: u64) -> Result<SimilarityPoint> {
    if draws < 2 {
        return Err(PromError::InvalidArgument("need at least two draws".into()));
    }
    let sim = VoxelSimulator::new(scheme, s)?;
    let d = pair_order(scheme.num_encodings()).len();
    let domain = tag("simulation/similarity");
    let rows: Vec<(Vec<f64>, Option<nalgebra::DMatrix<f64>>)> = (0..draws)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, domain, t);
            let mut y = sim.zeros();
            let phi0 = rng.gen::<f64>() * 2.0 * PI;
            sim.fill(0.0, phi0, &mut rng, &mut y);
            let th: Vec<f64> = y.conjugate_products().iter().map(|r| r.arg()).collect();
            (th, data_phase_cov(&y).ok().map(|c| c.sigma))
        })
        .collect();
    let samples: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let sample = sample_covariance(&samples)?;
    let mut acc = 0.0;
    let mut n = 0u64;
    for (_, c) in &rows {
        if let Some(c) = c {
            if let Ok(x) = cosine_similarity(c, &sample) {
                acc += x;
                n += 1;
            }
        }
    }
    let known = model_phase_cov(s)?;
    Ok(SimilarityPoint {
        data_model: if n > 0 { acc / n as f64 } else { f64::NAN },
        known_model: cosine_similarity(&known.sigma, &sample)?,
        identity: cosine_similarity(&nalgebra::DMatrix::identity(d, d), &sample)?,
    })
}

/// Geometry and contrast of the five-vessel phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselPhantomSpec {
    pub peak_velocity: f64,
    /// mm
    pub diameters: Vec<f64>,
    /// Fine grid spacing, mm.
    pub fine_res: f64,
    /// Fine voxels per coarse voxel along each axis.
    pub block: usize,
    pub background_density: f64,
    pub static_density: f64,
    pub vessel_density: f64,
    /// Largest coarse-voxel SNR over vessel voxels and encodings.
    pub max_snr: f64,
    /// Edge-to-edge spacing between neighbouring vessels, mm.
    pub gap: f64,
    /// Static tissue around the vessels, mm.
    pub margin: f64,
    /// Background around the static tissue, mm.
    pub border: f64,
    /// Draw the common phase per voxel; zero otherwise.
    pub random_phase: bool,
}

impl Default for VesselPhantomSpec {
    fn default() -> Self {
        Self {
            peak_velocity: 60.0,
            diameters: vec![5.5, 3.9, 3.2, 2.7, 2.4],
            fine_res: 0.1,
            block: 5,
            background_density: 0.3,
            static_density: 0.5,
            vessel_density: 1.0,
            max_snr: 30.0,
            gap: 2.0,
            margin: 2.0,
            border: 2.0,
            random_phase: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Background,
    Static,
    /// Some part of the coarse voxel lies inside a vessel.
    Flow,
}

/// Coarse-resolution phantom data with its ground truth.
#[derive(Debug, Clone)]
pub struct VesselPhantom {
    pub field: MeasurementField,
    /// Block-averaged fine velocity per coarse voxel.
    pub truth: Vec<f64>,
    pub region: Vec<Region>,
    /// Noiseless coarse amplitude per encoding and voxel, `[encoding][voxel]`.
    pub clean_amplitude: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Vessel centers `(x, y)` in mm.
    pub centers: Vec<(f64, f64)>,
}

/// Vessels are cylinders along z, so every fine z-slice of a block is the same
/// and only the in-plane 2D average is formed.
pub fn vessel_phantom(spec: &VesselPhantomSpec, scheme: &EncodingScheme, seed: u64) -> Result<VesselPhantom> {
    let b = spec.block;
    if b == 0 || !(spec.fine_res > 0.0) || spec.diameters.is_empty() {
        return Err(PromError::InvalidArgument("bad phantom geometry".into()));
    }
    for d in [spec.background_density, spec.static_density, spec.vessel_density] {
        if !(0.0..=1.0).contains(&d) {
            return Err(PromError::InvalidArgument(format!("density {d} outside [0, 1]")));
        }
    }
    if !(spec.max_snr > 0.0) {
        return Err(PromError::InvalidArgument("max SNR must be positive".into()));
    }
    let coarse = spec.fine_res * b as f64;
    let dmax = spec.diameters.iter().cloned().fold(0.0, f64::max);
    let pad = spec.margin + spec.border;
    let width = spec.diameters.iter().sum::<f64>() + spec.gap * (spec.diameters.len() - 1) as f64 + 2.0 * pad;
    let height = dmax + 2.0 * pad;
    let nx = (width / coarse).ceil() as usize;
    let ny = (height / coarse).ceil() as usize;
    let (fx, fy) = (nx * b, ny * b);
    // centre the layout in the padded grid
    let x0 = (nx as f64 * coarse - (width - 2.0 * pad)) / 2.0;
    let yc = ny as f64 * coarse / 2.0;
    let mut centers = Vec::new();
    let mut x = x0;
    for d in &spec.diameters {
        centers.push((x + d / 2.0, yc));
        x += d + spec.gap;
    }
    let tissue = (
        x0 - spec.margin,
        x - spec.gap + spec.margin,
        yc - dmax / 2.0 - spec.margin,
        yc + dmax / 2.0 + spec.margin,
    );

    let m = scheme.gamma_m1();
    let ne = m.len();
    let nvox = nx * ny;
    let mut sum = vec![vec![Complex64::new(0.0, 0.0); nvox]; ne];
    let mut vsum = vec![0.0; nvox];
    let mut flow = vec![false; nvox];
    let mut in_tissue = vec![false; nvox];
    for iy in 0..fy {
        let py = (iy as f64 + 0.5) * spec.fine_res;
        for ix in 0..fx {
            let px = (ix as f64 + 0.5) * spec.fine_res;
            let p = (iy / b) * nx + ix / b;
            let vessel = centers.iter().zip(&spec.diameters).find_map(|(&(cx, cy), d)| {
                let r2 = ((px - cx).powi(2) + (py - cy).powi(2)) / (d / 2.0).powi(2);
                (r2 < 1.0).then_some(r2)
            });
            let (rho, v) = match vessel {
                Some(r2) => {
                    flow[p] = true;
                    (spec.vessel_density, spec.peak_velocity * (1.0 - r2))
                }
                None if px >= tissue.0 && px < tissue.1 && py >= tissue.2 && py < tissue.3 => {
                    in_tissue[p] = true;
                    (spec.static_density, 0.0)
                }
                None => (spec.background_density, 0.0),
            };
            vsum[p] += v;
            for a in 0..ne {
                sum[a][p] += Complex64::from_polar(rho, m[a] * v);
            }
        }
    }
    let per_block = (b * b) as f64;
    for s in sum.iter_mut() {
        for z in s.iter_mut() {
            *z /= per_block;
        }
    }
    let truth: Vec<f64> = vsum.iter().map(|v| v / per_block).collect();
    let clean_amplitude: Vec<Vec<f64>> = sum.iter().map(|s| s.iter().map(|z| z.norm()).collect()).collect();
    let peak = (0..nvox)
        .filter(|&p| flow[p])
        .flat_map(|p| clean_amplitude.iter().map(move |a| a[p]))
        .fold(0.0, f64::max);
    let sigma = peak / spec.max_snr;
    let region: Vec<Region> = (0..nvox)
        .map(|p| {
            if flow[p] {
                Region::Flow
            } else if in_tissue[p] {
                Region::Static
            } else {
                Region::Background
            }
        })
        .collect();

    let domain = tag("simulation/phantom");
    let voxels: Vec<MeasurementMatrix> = (0..nvox)
        .map(|p| {
            let mut rng = stream(seed, domain, p as u64);
            let phi0 = if spec.random_phase {
                rng.gen::<f64>() * 2.0 * PI
            } else {
                0.0
            };
            let rot = Complex64::from_polar(1.0, phi0);
            let data = (0..ne).map(|a| sum[a][p] * rot).collect();
            let mut y = MeasurementMatrix::new(ne, 1, data).expect("shape");
            add_noise(&mut y, sigma, &mut rng);
            y
        })
        .collect();
    Ok(VesselPhantom {
        field: MeasurementField::from_voxels(ny, nx, &voxels)?,
        truth,
        region,
        clean_amplitude,
        sigma,
        centers,
    })
}

/// Error summary of one estimator over vessel-phantom realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselScore {
    pub estimator: EstimatorId,
    /// Flow voxels with `|error| > min venc`, summed over realizations.
    pub aliased: u64,
    /// Flow voxels where the estimator returned an error, summed.
    pub failures: u64,
    /// `sqrt(sum e^2)` over the remaining flow voxels, with the sum of squares
    /// averaged over realizations.
    pub rss_error: f64,
    pub flow_voxels: usize,
    pub realizations: u64,
}

/// Scores each estimator on `realizations` noisy copies of the vessel
/// phantom. Realization `r` uses seed `derive_seed(seed, r)`.
pub fn vessel_scores(
    spec: &VesselPhantomSpec,
    scheme: &EncodingScheme,
    ids: &[EstimatorId],
    opts: &EstimatorOptions,
    realizations: u64,
    seed: u64,
) -> Result<Vec<VesselScore>> {
    if realizations == 0 {
        return Err(PromError::InvalidArgument("need at least one realization".into()));
    }
    let ests = ids
        .iter()
        .map(|&id| VoxelEstimator::new(id, scheme, opts))
        .collect::<Result<Vec<_>>>()?;
    let limit = scheme.vencs().values().iter().copied().fold(f64::INFINITY, f64::min);
    let mut acc = vec![(0u64, 0u64, 0.0f64); ids.len()];
    let mut flow_voxels = 0;
    for r in 0..realizations {
        let ph = vessel_phantom(spec, scheme, derive_seed(seed, r))?;
        let flow: Vec<usize> = (0..ph.truth.len()).filter(|&p| ph.region[p] == Region::Flow).collect();
        flow_voxels = flow.len();
        let voxels: Vec<MeasurementMatrix> = flow.iter().map(|&p| ph.field.voxel(p)).collect();
        for (est, a) in ests.iter().zip(acc.iter_mut()) {
            let out: Vec<Result<f64>> = voxels.par_iter().map(|y| est.estimate(y)).collect();
            for (res, &p) in out.iter().zip(&flow) {
                match res {
                    Ok(vh) => {
                        let e = est.error(*vh, ph.truth[p]);
                        if e.abs() > limit {
                            a.0 += 1;
                        } else {
                            a.2 += e * e;
                        }
                    }
                    Err(_) => a.1 += 1,
                }
            }
        }
    }
    Ok(ids
        .iter()
        .zip(acc)
        .map(|(&id, (aliased, failures, sq))| VesselScore {
            estimator: id,
            aliased,
            failures,
            rss_error: (sq / realizations as f64).sqrt(),
            flow_voxels,
            realizations,
        })
        .collect())
}

/// A rotating disk seen face on: the encoded velocity grows linearly with the
/// horizontal distance from the centre. Outside the disk there is only noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationPhantomSpec {
    /// Image is `size x size`.
    pub size: usize,
    /// Disk radius as a fraction of `size`.
    pub radius: f64,
    /// Velocity at the left and right rim, cm/s.
    pub peak_velocity: f64,
    /// SNR per encoding inside the disk.
    pub snr: Vec<f64>,
}

impl Default for RotationPhantomSpec {
    fn default() -> Self {
        Self {
            size: 48,
            radius: 0.45,
            peak_velocity: 240.0,
            snr: vec![10.0, 20.0, 10.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RotationPhantom {
    pub field: MeasurementField,
    pub truth: Vec<f64>,
    pub inside: Vec<bool>,
}

pub fn rotation_phantom(spec: &RotationPhantomSpec, scheme: &EncodingScheme, seed: u64) -> Result<RotationPhantom> {
    if spec.size < 4 || !(spec.radius > 0.0 && spec.radius <= 0.5) {
        return Err(PromError::InvalidArgument("bad rotation phantom geometry".into()));
    }
    let s = SnrMatrix::per_encoding(&spec.snr, 1)?;
    let sim = VoxelSimulator::new(scheme, &s)?;
    let n = spec.size;
    let c = (n as f64 - 1.0) / 2.0;
    let r = spec.radius * n as f64;
    let domain = tag("simulation/rotation");
    let mut truth = Vec::with_capacity(n * n);
    let mut inside = Vec::with_capacity(n * n);
    let voxels: Vec<MeasurementMatrix> = (0..n * n)
        .map(|p| {
            let (dy, dx) = ((p / n) as f64 - c, (p % n) as f64 - c);
            let mut rng = stream(seed, domain, p as u64);
            let phi0 = rng.gen::<f64>() * 2.0 * PI;
            let mut y = sim.zeros();
            let hit = dx * dx + dy * dy <= r * r;
            let v = if hit { spec.peak_velocity * dx / r } else { 0.0 };
            if hit {
                sim.fill(v, phi0, &mut rng, &mut y);
            } else {
                add_noise(&mut y, sim.sigma, &mut rng);
            }
            truth.push(v);
            inside.push(hit);
            y
        })
        .collect();
    Ok(RotationPhantom {
        field: MeasurementField::from_voxels(n, n, &voxels)?,
        truth,
        inside,
    })
}
