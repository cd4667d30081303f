//! One interface over every per-voxel estimator, and whole-map estimation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{sdv_estimate, DualVencSolver, GridSpec, MleAmplitudes, MleSolver, SdvMode};
use crate::congruence::{wrapped_diff, EncodingScheme, VencSet};
use crate::error::{PromError, Result};
use crate::estimator::{prom_with_solver, voxel_inputs, CovMode, Precision, PromResult, PromSolver};
use crate::measurement::MeasurementMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorId {
    Prom,
    Sdv,
    Odv,
    Nco,
    Mle,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 5] = [Self::Prom, Self::Sdv, Self::Odv, Self::Nco, Self::Mle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prom => "prom",
            Self::Sdv => "sdv",
            Self::Odv => "odv",
            Self::Nco => "nco",
            Self::Mle => "mle",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorId {
    type Err = PromError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| PromError::Validation(format!("unknown estimator '{s}'")))
    }
}

/// Knobs shared by the voxel estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    /// Start of the output interval `[offset, offset + Omega)`; `None` means `-Omega/2`.
    pub offset: Option<f64>,
    pub cov: CovMode,
    pub sdv_mode: SdvMode,
    pub mle_amplitudes: MleAmplitudes,
    /// Grid step for ODV/NCO/MLE; `None` means `min(venc) / 1000`.
    pub grid_step: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            offset: None,
            cov: CovMode::Data,
            sdv_mode: SdvMode::Corrected,
            mle_amplitudes: MleAmplitudes::NonNegative,
            grid_step: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Prom {
        solver: PromSolver,
        fixed: Option<Precision>,
    },
    Sdv(SdvMode),
    Odv(DualVencSolver),
    Nco(DualVencSolver),
    Mle(MleSolver),
}

/// A configured estimator for one encoding scheme.
#[derive(Debug, Clone)]
pub struct VoxelEstimator {
    id: EstimatorId,
    vencs: VencSet,
    omega: f64,
    offset: f64,
    cov: CovMode,
    kind: Kind,
}

impl VoxelEstimator {
    pub fn new(id: EstimatorId, scheme: &EncodingScheme, opts: &EstimatorOptions) -> Result<Self> {
        let vencs = scheme.vencs();
        let omega = vencs.unambiguous_range()?;
        let offset = opts.offset.unwrap_or(-omega / 2.0);
        let grid = || -> Result<GridSpec> {
            let g = GridSpec::for_range(&vencs, offset)?;
            match opts.grid_step {
                Some(step) => GridSpec::new(g.lo, g.hi, step),
                None => Ok(g),
            }
        };
        let kind = match id {
            EstimatorId::Prom => {
                let solver = PromSolver::new(&vencs, offset)?;
                let fixed = match &opts.cov {
                    CovMode::Data => None,
                    CovMode::Model(s) => {
                        let theta = crate::covariance::model_phase_cov(s)?;
                        Some(Precision::new(&crate::covariance::velocity_cov(&theta, &vencs)?)?)
                    }
                };
                Kind::Prom { solver, fixed }
            }
            EstimatorId::Sdv => {
                vencs.three_point()?;
                Kind::Sdv(opts.sdv_mode)
            }
            EstimatorId::Odv => Kind::Odv(DualVencSolver::new(&vencs, grid()?)?),
            EstimatorId::Nco => Kind::Nco(DualVencSolver::new(&vencs, grid()?)?),
            EstimatorId::Mle => Kind::Mle(MleSolver::new(scheme, grid()?, opts.mle_amplitudes)?),
        };
        Ok(Self {
            id,
            vencs,
            omega,
            offset,
            cov: opts.cov.clone(),
            kind,
        })
    }

    pub fn id(&self) -> EstimatorId {
        self.id
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn vencs(&self) -> &VencSet {
        &self.vencs
    }

    pub fn estimate(&self, y: &MeasurementMatrix) -> Result<f64> {
        match &self.kind {
            Kind::Prom { solver, fixed } => match fixed {
                Some(prec) => {
                    let vt = y.wrapped_velocities(&self.vencs)?;
                    Ok(solver.solve_best(&vt, prec).0)
                }
                None => {
                    let (vt, prec) = voxel_inputs(y, &self.vencs, &self.cov)?;
                    Ok(solver.solve_best(&vt, &prec).0)
                }
            },
            Kind::Sdv(mode) => sdv_estimate(&y.wrapped_velocities(&self.vencs)?, &self.vencs, *mode),
            Kind::Odv(s) => Ok(s.odv(&y.wrapped_velocities(&self.vencs)?)),
            Kind::Nco(s) => {
                let r = y.conjugate_products();
                Ok(s.nco(r[1], r[2]))
            }
            Kind::Mle(s) => s.solve(y),
        }
    }

    /// Full PRoM result with candidates; only for the PRoM estimator.
    pub fn prom_full(&self, y: &MeasurementMatrix) -> Result<PromResult> {
        match &self.kind {
            Kind::Prom { solver, fixed } => match fixed {
                Some(prec) => solver.solve(&y.wrapped_velocities(&self.vencs)?, prec),
                None => prom_with_solver(solver, y, &self.vencs, &self.cov),
            },
            _ => Err(PromError::InvalidArgument(format!(
                "candidate lists come from prom, not {}",
                self.id
            ))),
        }
    }

    /// Signed error against the truth. SDV lives on `[-venc21, venc21)` and is
    /// compared directly; the others are compared modulo `Omega`.
    pub fn error(&self, v_hat: f64, v_true: f64) -> f64 {
        match self.id {
            EstimatorId::Sdv => v_hat - v_true,
            _ => wrapped_diff(v_hat, v_true, self.omega),
        }
    }
}

/// Estimates a list of voxels in parallel; output order matches input order.
pub fn estimate_voxels(est: &VoxelEstimator, voxels: &[MeasurementMatrix]) -> Vec<Result<f64>> {
    voxels.par_iter().map(|y| est.estimate(y)).collect()
}
