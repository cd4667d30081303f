//! Run configuration for the command-line tool.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::NoiseModel;
use crate::covariance::SnrMatrix;
use crate::design::DesignSpec;
use crate::error::{PromError, Result};
use crate::estimator::CovMode;
use crate::postprocess::PromPlusOptions;
use crate::simulation::{RotationPhantomSpec, VesselPhantomSpec};
use crate::voxel::EstimatorId;

/// A per-voxel estimator, or PRoM followed by spatial post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorChoice {
    Voxel(EstimatorId),
    PromPlus,
}

impl EstimatorChoice {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Voxel(id) => id.name(),
            Self::PromPlus => "prom+",
        }
    }
}

impl fmt::Display for EstimatorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorChoice {
    type Err = PromError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prom+" | "promplus" => Ok(Self::PromPlus),
            _ => s.parse().map(Self::Voxel),
        }
    }
}

impl Serialize for EstimatorChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EstimatorChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceSource {
    #[default]
    Data,
    Model,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    #[serde(default)]
    pub mode: CovarianceSource,
    /// Required for `model`.
    #[serde(default)]
    pub snr: Option<SnrMatrix>,
}

impl CovarianceConfig {
    pub fn cov_mode(&self) -> Result<CovMode> {
        match (self.mode, &self.snr) {
            (CovarianceSource::Data, _) => Ok(CovMode::Data),
            (CovarianceSource::Model, Some(s)) => Ok(CovMode::Model(s.clone())),
            (CovarianceSource::Model, None) => Err(PromError::Validation(
                "covariance mode 'model' needs an snr matrix".into(),
            )),
        }
    }
}

/// Knobs for the simulate and analyze recipes. Anything left out takes the
/// recipe's own default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Monte Carlo trials per point (draws for fig2).
    pub trials: Option<u64>,
    /// Three-point vencs `[venc21, venc31, venc32]`; symmetric moments are used.
    pub venc: Option<Vec<f64>>,
    /// Moments instead of vencs.
    pub gamma_m1: Option<Vec<f64>>,
    pub snr: Option<SnrMatrix>,
    /// Sweep of `s21` values; outer encodings get half.
    pub s21: Option<Vec<f64>>,
    /// True velocity for single-velocity recipes.
    pub v: Option<f64>,
    pub v_range: Option<[f64; 2]>,
    pub v_step: Option<f64>,
    pub estimators: Option<Vec<EstimatorId>>,
    /// Grid step for ODV, NCO and MLE.
    pub grid_step: Option<f64>,
    pub bin_width: Option<f64>,
    pub noise: Option<NoiseModel>,
    pub phantom: Option<VesselPhantomSpec>,
    /// Noise realizations of the vessel phantom.
    pub realizations: Option<u64>,
    pub rotation: Option<RotationPhantomSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub estimator: Option<EstimatorChoice>,
    #[serde(default)]
    pub covariance: CovarianceConfig,
    /// Start of the output interval; `-Omega/2` when absent.
    #[serde(default)]
    pub offset: Option<f64>,
    /// Container to estimate from.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Optional f32 truth map for error statistics in `estimate`.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub design: Option<DesignSpec>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub postprocess: Option<PromPlusOptions>,
    #[serde(default)]
    pub recipe: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PromError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PromError::io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.design {
            d.validate()?;
        }
        if let Some(p) = &self.postprocess {
            p.validate()?;
        }
        if self.threads == Some(0) {
            return Err(PromError::Validation("threads must be positive".into()));
        }
        if let Some(o) = self.offset {
            if !o.is_finite() {
                return Err(PromError::Validation("offset must be finite".into()));
            }
        }
        self.covariance.cov_mode()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_parses() {
        let cfg = RunConfig::from_json(
            r#"{
                "estimator": "prom+",
                "covariance": {"mode": "model", "snr": [10, 20, 10]},
                "offset": -70,
                "design": {"P": 10, "Q": 10, "s": [5, 10, 5], "eps": [1e-6, 1e-6],
                           "omega_eps": 200, "gamma_m_tau": 0.0785, "trials_override": 1000},
                "simulation": {"trials": 100, "venc": [15, 6, 10], "phantom": {"peak_velocity": 50}},
                "postprocess": {"span": 0.03},
                "recipe": "fig6",
                "seed": 9,
                "output": "out",
                "threads": 2
            }"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.estimator, Some(EstimatorChoice::PromPlus));
        assert!(matches!(cfg.covariance.cov_mode().unwrap(), CovMode::Model(_)));
        assert_eq!(cfg.postprocess.unwrap().span, 0.03);
        assert_eq!(cfg.postprocess.unwrap().lambda, 1.0);
        let phantom = cfg.simulation.as_ref().unwrap().phantom.as_ref().unwrap();
        assert_eq!(phantom.peak_velocity, 50.0);
        assert_eq!(phantom.block, 5);
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"estimatr": "prom"}"#,
            r#"{"simulation": {"trails": 3}}"#,
            r#"{"covariance": {"mode": "data", "x": 1}}"#,
            r#"{"postprocess": {"spam": 0.2}}"#,
            r#"{"estimator": "fft"}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(bad), Err(PromError::Validation(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn semantic_validation() {
        let cfg = RunConfig::from_json(r#"{"covariance": {"mode": "model"}}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::from_json(
            r#"{"design": {"P": 10, "Q": 10, "s": [5, 10, 5], "eps": [1e-6, 1e-6], "omega_eps": 0, "gamma_m_tau": 0.1}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(PromError::Validation(_))));
    }

    #[test]
    fn estimator_names() {
        for name in ["prom", "prom+", "sdv", "odv", "nco", "mle"] {
            let e: EstimatorChoice = name.parse().unwrap();
            assert_eq!(e.name(), name);
        }
    }
}
