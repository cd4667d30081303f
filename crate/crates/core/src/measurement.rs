//! Per-voxel complex data and the phase-difference statistics derived from it.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::congruence::{pair_order, VencSet};
use crate::error::{PromError, Result};

/// Complex `Ne x Nc` measurements of one voxel, row-major by encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    ne: usize,
    nc: usize,
    data: Vec<Complex64>,
}

impl MeasurementMatrix {
    pub fn new(ne: usize, nc: usize, data: Vec<Complex64>) -> Result<Self> {
        if ne < 2 || nc < 1 {
            return Err(PromError::Dimension(format!(
                "need Ne >= 2 and Nc >= 1, got {ne} x {nc}"
            )));
        }
        if data.len() != ne * nc {
            return Err(PromError::Dimension(format!(
                "{} samples for a {ne} x {nc} matrix",
                data.len()
            )));
        }
        Ok(Self { ne, nc, data })
    }

    pub fn zeros(ne: usize, nc: usize) -> Self {
        Self {
            ne,
            nc,
            data: vec![Complex64::new(0.0, 0.0); ne * nc],
        }
    }

    pub fn num_encodings(&self) -> usize {
        self.ne
    }

    pub fn num_coils(&self) -> usize {
        self.nc
    }

    #[inline]
    pub fn get(&self, encoding: usize, coil: usize) -> Complex64 {
        self.data[encoding * self.nc + coil]
    }

    #[inline]
    pub fn set(&mut self, encoding: usize, coil: usize, value: Complex64) {
        self.data[encoding * self.nc + coil] = value;
    }

    pub fn row(&self, encoding: usize) -> &[Complex64] {
        &self.data[encoding * self.nc..(encoding + 1) * self.nc]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Magnitudes `|y|`, same layout.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    /// First encoding whose row is identically zero, if any.
    pub fn zero_row(&self) -> Option<usize> {
        (0..self.ne).find(|&a| self.row(a).iter().all(|z| z.norm_sqr() == 0.0))
    }

    /// Coil-combined conjugate products `r_ab = sum_beta y_a y_b*`, canonical pair order.
    pub fn conjugate_products(&self) -> Vec<Complex64> {
        pair_order(self.ne)
            .into_iter()
            .map(|(a, b)| self.row(a).iter().zip(self.row(b)).map(|(ya, yb)| ya * yb.conj()).sum())
            .collect()
    }

    /// Phase differences `theta_ab` in `[0, 2 pi)`.
    pub fn phase_differences(&self) -> Vec<f64> {
        self.conjugate_products()
            .into_iter()
            .map(|r| wrap_phase(r.arg()))
            .collect()
    }

    /// Wrapped pairwise velocities `v_ab = theta_ab venc_ab / pi` in `[0, 2 venc_ab)`.
    pub fn wrapped_velocities(&self, vencs: &VencSet) -> Result<Vec<f64>> {
        if vencs.num_encodings() != self.ne {
            return Err(PromError::Dimension(format!(
                "venc set has {} encodings, data has {}",
                vencs.num_encodings(),
                self.ne
            )));
        }
        Ok(phases_to_velocities(&self.phase_differences(), vencs.values()))
    }

    /// Root sum of squares over coils and encodings.
    pub fn combined_magnitude(&self) -> f64 {
        (self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.ne as f64).sqrt()
    }
}

#[inline]
pub(crate) fn wrap_phase(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

pub fn phases_to_velocities(theta: &[f64], venc: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(venc)
        .map(|(t, v)| {
            let x = t * v / PI;
            if x >= 2.0 * v {
                0.0
            } else {
                x
            }
        })
        .collect()
}

/// A 2D image of measurements, stored x fastest, then y, coil, encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementField {
    pub ne: usize,
    pub nc: usize,
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<Complex64>,
}

impl MeasurementField {
    pub fn new(ne: usize, nc: usize, ny: usize, nx: usize, data: Vec<Complex64>) -> Result<Self> {
        if ne < 2 || nc < 1 || ny < 1 || nx < 1 {
            return Err(PromError::Dimension(format!(
                "bad field shape Ne={ne} Nc={nc} Ny={ny} Nx={nx}"
            )));
        }
        if data.len() != ne * nc * ny * nx {
            return Err(PromError::Dimension(format!(
                "{} samples for a {ne}x{nc}x{ny}x{nx} field",
                data.len()
            )));
        }
        Ok(Self { ne, nc, ny, nx, data })
    }

    pub fn num_voxels(&self) -> usize {
        self.ny * self.nx
    }

    #[inline]
    fn index(&self, encoding: usize, coil: usize, voxel: usize) -> usize {
        (encoding * self.nc + coil) * self.ny * self.nx + voxel
    }

    /// Voxel `iy * nx + ix` as a measurement matrix.
    pub fn voxel(&self, voxel: usize) -> MeasurementMatrix {
        let mut y = MeasurementMatrix::zeros(self.ne, self.nc);
        for a in 0..self.ne {
            for c in 0..self.nc {
                y.set(a, c, self.data[self.index(a, c, voxel)]);
            }
        }
        y
    }

    /// Inverse of [`MeasurementField::voxel`]; every voxel must share the shape.
    pub fn from_voxels(ny: usize, nx: usize, voxels: &[MeasurementMatrix]) -> Result<Self> {
        let first = voxels.first().ok_or_else(|| PromError::Dimension("no voxels".into()))?;
        let (ne, nc) = (first.num_encodings(), first.num_coils());
        if voxels.len() != ny * nx {
            return Err(PromError::Dimension(format!(
                "{} voxels for a {ny}x{nx} image",
                voxels.len()
            )));
        }
        let mut f = Self::new(ne, nc, ny, nx, vec![Complex64::new(0.0, 0.0); ne * nc * ny * nx])?;
        for (p, y) in voxels.iter().enumerate() {
            if y.num_encodings() != ne || y.num_coils() != nc {
                return Err(PromError::Dimension(format!("voxel {p} has a different shape")));
            }
            for a in 0..ne {
                for c in 0..nc {
                    let i = f.index(a, c, p);
                    f.data[i] = y.get(a, c);
                }
            }
        }
        Ok(f)
    }

    /// Coil-combined magnitude of every voxel, averaged over encodings.
    pub fn combined_magnitudes(&self) -> Vec<f64> {
        (0..self.num_voxels())
            .map(|p| self.voxel(p).combined_magnitude())
            .collect()
    }
}
