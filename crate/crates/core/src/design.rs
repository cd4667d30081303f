//! Three-point venc design.
//!
//! Every coprime `p/q` in `(1, 2)` gives base vencs `[pq, q(p-q), p(p-q)]`.
//! A base passes when PRoM's unwrapping-error rate at the design SNR is below
//! `eps1`; it is then scaled so the reliable range `Omega - 2 z sigma` covers
//! `omega_eps`, and so the outer moment stays under `gamma_m_tau`. The
//! passing candidate with the smallest scaled standard deviation wins.
//!
//! The Monte Carlo is by far the expensive part, while the score `c sigma`
//! only needs the covariance. Candidates are therefore simulated in order of
//! score and the search stops at the first one that passes, which picks the
//! same winner as simulating all of them.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analysis::{count_unwrap_errors, referenced_scheme, ErrorCount, NoiseModel, TubeContext};
use crate::congruence::{gcd_u64, symmetric_moments_from_vencs, EncodingScheme, VencSet};
use crate::covariance::SnrMatrix;
use crate::error::{PromError, Result};
use crate::rng::{derive_seed, tag};
use crate::simulation::VoxelSimulator;

/// Largest Monte Carlo budget run without an explicit `trials_override`.
pub const DEFAULT_TRIALS_CAP: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    #[serde(rename = "P")]
    pub p_max: u64,
    #[serde(rename = "Q")]
    pub q_max: u64,
    /// Lowest SNR the acquisition must handle.
    pub s: SnrMatrix,
    /// `[eps1, eps2]`: unwrapping and aliasing error budgets.
    pub eps: [f64; 2],
    /// Required reliable range in cm/s.
    pub omega_eps: f64,
    /// Cap on `gamma m13` in s/cm.
    pub gamma_m_tau: f64,
    /// Monte Carlo trials per candidate instead of `100 / eps1`.
    #[serde(default)]
    pub trials_override: Option<u64>,
    #[serde(default = "default_cap")]
    pub trials_cap: u64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
    /// Round the final scale to a multiple of this, as a scanner that only
    /// takes vencs at some precision would. Never rounds below the moment cap.
    #[serde(default)]
    pub scale_step: Option<f64>,
}

fn default_cap() -> u64 {
    DEFAULT_TRIALS_CAP
}

impl DesignSpec {
    pub fn new(p_max: u64, q_max: u64, s: SnrMatrix, eps: [f64; 2], omega_eps: f64, gamma_m_tau: f64) -> Self {
        Self {
            p_max,
            q_max,
            s,
            eps,
            omega_eps,
            gamma_m_tau,
            trials_override: None,
            trials_cap: DEFAULT_TRIALS_CAP,
            noise: NoiseModel::Gaussian,
            seed: 0,
            scale_step: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_max < 2 || self.q_max < 1 {
            return Err(PromError::Validation(format!(
                "need P >= 2 and Q >= 1, got P={} Q={}",
                self.p_max, self.q_max
            )));
        }
        if self.s.num_encodings() != 3 {
            return Err(PromError::Validation(format!(
                "design is for three encodings, SNR has {}",
                self.s.num_encodings()
            )));
        }
        for e in self.eps {
            if !(e > 0.0 && e < 1.0) {
                return Err(PromError::Validation(format!("eps must lie in (0, 1), got {e}")));
            }
        }
        if !(self.omega_eps > 0.0 && self.omega_eps.is_finite()) {
            return Err(PromError::Validation(format!(
                "omega_eps must be positive, got {}",
                self.omega_eps
            )));
        }
        if !(self.gamma_m_tau > 0.0 && self.gamma_m_tau.is_finite()) {
            return Err(PromError::Validation(format!(
                "gamma_m_tau must be positive, got {}",
                self.gamma_m_tau
            )));
        }
        if let Some(step) = self.scale_step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(PromError::Validation(format!(
                    "scale_step must be positive, got {step}"
                )));
            }
        }
        if self.trials_override == Some(0) {
            return Err(PromError::Validation("trials_override must be positive".into()));
        }
        Ok(())
    }

    /// Trials per candidate, or an error if `100 / eps1` exceeds the cap.
    pub fn trials(&self) -> Result<u64> {
        if let Some(n) = self.trials_override {
            return Ok(n);
        }
        let n = (100.0 / self.eps[0]).ceil();
        if n > self.trials_cap as f64 {
            return Err(PromError::Validation(format!(
                "100/eps1 = {n:.0} trials exceeds the cap of {}; set trials_override",
                self.trials_cap
            )));
        }
        Ok(n as u64)
    }
}

/// What happened to one `(p, q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CandidateStatus {
    /// `Omega <= 2 z sigma`: no scale reaches the reliable range.
    NoMargin,
    Rejected {
        count: ErrorCount,
    },
    Accepted {
        count: ErrorCount,
    },
    /// A better-scoring candidate had already passed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub p: u64,
    pub q: u64,
    /// Unscaled base vencs.
    pub base_venc: Vec<f64>,
    /// Standard deviation of the BLUE at the base vencs.
    pub base_sigma: f64,
    /// Scale, if the margin allows one.
    pub c: Option<f64>,
    /// `c * base_sigma`.
    pub score: Option<f64>,
    #[serde(flatten)]
    pub status: CandidateStatus,
}

impl CandidateReport {
    pub fn summary(&self) -> String {
        let what = match &self.status {
            CandidateStatus::NoMargin => "rejected: Omega - 2 z sigma <= 0".to_string(),
            CandidateStatus::Rejected { count } => format!(
                "rejected: {} unwrapping errors in {} trials",
                count.errors, count.trials
            ),
            CandidateStatus::Accepted { count } => format!(
                "accepted: {} unwrapping errors in {} trials",
                count.errors, count.trials
            ),
            CandidateStatus::Skipped => "skipped: a better candidate passed".to_string(),
        };
        match self.score {
            Some(score) => format!("(p,q)=({},{}) c*sigma={score:.4}: {what}", self.p, self.q),
            None => format!("(p,q)=({},{}): {what}", self.p, self.q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub p: u64,
    pub q: u64,
    pub c: f64,
    /// Scale before `scale_step` rounding.
    pub c_exact: f64,
    pub venc: Vec<f64>,
    /// Symmetric `gamma m1` per encoding, s/cm.
    pub moments: Vec<f64>,
    pub omega: f64,
    pub predicted_rmse: f64,
    pub unwrap_error_prob: f64,
    pub trials: u64,
    pub candidates: Vec<CandidateReport>,
}

impl DesignResult {
    pub fn venc_set(&self) -> Result<VencSet> {
        VencSet::new(self.venc.clone())
    }

    pub fn scheme(&self) -> Result<EncodingScheme> {
        EncodingScheme::new(self.moments.clone())
    }
}

/// `[pq, q(p-q), p(p-q)]` for coprime `p, q` with `1 < p/q < 2`.
pub fn base_venc(p: u64, q: u64) -> Result<[u64; 3]> {
    if q == 0 || p <= q || p >= 2 * q {
        return Err(PromError::InvalidArgument(format!("p/q = {p}/{q} must lie in (1, 2)")));
    }
    if gcd_u64(p, q) != 1 {
        return Err(PromError::InvalidArgument(format!("{p} and {q} are not coprime")));
    }
    Ok([p * q, q * (p - q), p * (p - q)])
}

/// Admissible `(p, q)` pairs in the order the search visits them.
pub fn admissible_pairs(p_max: u64, q_max: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for p in 2..=p_max {
        for q in 1..=q_max {
            if base_venc(p, q).is_ok() {
                out.push((p, q));
            }
        }
    }
    out
}

/// Upper `eps` quantile of the standard normal, `Phi^-1(1 - eps)`.
pub fn upper_quantile(eps: f64) -> f64 {
    // computed from the lower tail to keep precision for tiny eps
    -Normal::standard().inverse_cdf(eps)
}

/// Smallest `c` with `gamma m13 <= gamma_m_tau` for symmetric moments.
pub fn moment_cap(p: u64, q: u64, gamma_m_tau: f64) -> f64 {
    PI / (2.0 * gamma_m_tau * (q * (p - q)) as f64)
}

struct Prepared {
    report: CandidateReport,
    vencs: VencSet,
    ctx: TubeContext,
    order: usize,
}

pub fn design_three_point(spec: &DesignSpec) -> Result<DesignResult> {
    spec.validate()?;
    let trials = spec.trials()?;
    let z = upper_quantile(spec.eps[1]);
    // errors >= ceil(eps1 N) already rule out frequency < eps1
    let stop_at = ((spec.eps[0] * trials as f64).ceil() as u64).max(1);

    let mut prepared = Vec::new();
    for (order, (p, q)) in admissible_pairs(spec.p_max, spec.q_max).into_iter().enumerate() {
        let base = base_venc(p, q)?;
        let vencs = VencSet::new(base.iter().map(|&x| x as f64).collect())?;
        let ctx = TubeContext::from_snr(&vencs, &spec.s)?;
        let sigma = ctx.variance().max(0.0).sqrt();
        let margin = ctx.omega() - 2.0 * z * sigma;
        let c = (margin > 0.0).then(|| (spec.omega_eps / margin).max(moment_cap(p, q, spec.gamma_m_tau)));
        prepared.push(Prepared {
            report: CandidateReport {
                p,
                q,
                base_venc: vencs.values().to_vec(),
                base_sigma: sigma,
                c,
                score: c.map(|c| c * sigma),
                status: if c.is_some() {
                    CandidateStatus::Skipped
                } else {
                    CandidateStatus::NoMargin
                },
            },
            vencs,
            ctx,
            order,
        });
    }
    if prepared.is_empty() {
        return Err(PromError::InfeasibleDesign {
            reason: format!(
                "no coprime p/q in (1, 2) with p <= {} and q <= {}",
                spec.p_max, spec.q_max
            ),
            diagnostics: Vec::new(),
        });
    }

    // Best score first; on equal scores the later (p, q) wins, as in a
    // sequential scan that replaces on `<=`.
    let mut queue: Vec<usize> = (0..prepared.len())
        .filter(|&i| prepared[i].report.score.is_some())
        .collect();
    queue.sort_by(|&a, &b| {
        let (sa, sb) = (prepared[a].report.score.unwrap(), prepared[b].report.score.unwrap());
        sa.partial_cmp(&sb)
            .unwrap_or(Ordering::Equal)
            .then(prepared[b].order.cmp(&prepared[a].order))
    });

    let mut winner = None;
    for i in queue {
        let cand = &prepared[i];
        let sim = match spec.noise {
            NoiseModel::Gaussian => None,
            NoiseModel::Complex => {
                let scheme = referenced_scheme(&cand.vencs)?;
                Some((VoxelSimulator::new(&scheme, &spec.s)?, cand.vencs.clone()))
            }
        };
        let seed = derive_seed(spec.seed, tag(&format!("design/p{}q{}", cand.report.p, cand.report.q)));
        let count = count_unwrap_errors(&cand.ctx, sim.as_ref(), trials, seed, Some(stop_at));
        let passed = !count.stopped_early && count.errors < stop_at;
        prepared[i].report.status = if passed {
            CandidateStatus::Accepted { count }
        } else {
            CandidateStatus::Rejected { count }
        };
        if passed {
            winner = Some(i);
            break;
        }
    }

    let candidates: Vec<CandidateReport> = prepared.iter().map(|c| c.report.clone()).collect();
    let Some(i) = winner else {
        return Err(PromError::InfeasibleDesign {
            reason: format!(
                "none of {} candidates meets eps1 = {} with a positive margin",
                candidates.len(),
                spec.eps[0]
            ),
            diagnostics: candidates.iter().map(CandidateReport::summary).collect(),
        });
    };
    let best = &prepared[i];
    let c_exact = best.report.c.expect("accepted candidates have a scale");
    let c = match spec.scale_step {
        None => c_exact,
        Some(step) => {
            let cap = moment_cap(best.report.p, best.report.q, spec.gamma_m_tau);
            let mut c = (c_exact / step).round() * step;
            if c < cap {
                c = (cap / step).ceil() * step;
            }
            c
        }
    };
    let vencs = best.vencs.scaled(c)?;
    let (_, v31, v32) = vencs.three_point()?;
    let scheme = symmetric_moments_from_vencs(v31, v32)?;
    let count = match &best.report.status {
        CandidateStatus::Accepted { count } => *count,
        _ => unreachable!("winner was accepted"),
    };
    Ok(DesignResult {
        p: best.report.p,
        q: best.report.q,
        c,
        c_exact,
        venc: vencs.values().to_vec(),
        moments: scheme.gamma_m1().to_vec(),
        omega: vencs.unambiguous_range()?,
        predicted_rmse: c * best.report.base_sigma,
        unwrap_error_prob: count.frequency(),
        trials: count.trials,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::unwrap_error_prob;

    #[test]
    fn base_vencs() {
        assert_eq!(base_venc(7, 5).unwrap(), [35, 10, 14]);
        assert_eq!(base_venc(5, 3).unwrap(), [15, 6, 10]);
        assert_eq!(base_venc(6, 5).unwrap(), [30, 5, 6]);
        for (p, q) in [(7, 5), (5, 3), (6, 5), (9, 7)] {
            let v = base_venc(p, q).unwrap().map(|x| x as f64);
            let omega = VencSet::new(v.to_vec()).unwrap().unambiguous_range().unwrap();
            assert_eq!(omega, (2 * p * q * (p - q)) as f64);
            assert!((v[2] / v[1] - p as f64 / q as f64).abs() < 1e-12);
        }
        assert!(base_venc(6, 4).is_err());
        assert!(base_venc(4, 2).is_err());
        assert!(base_venc(3, 3).is_err());
        assert!(base_venc(2, 3).is_err());
    }

    #[test]
    fn admissible_pairs_are_coprime_ratios() {
        let pairs = admissible_pairs(10, 10);
        for &(p, q) in &pairs {
            assert!(q < p && p < 2 * q && gcd_u64(p, q) == 1);
        }
        // independent count: reduced fractions in (1, 2)
        let mut n = 0;
        for p in 2..=10u64 {
            for q in 1..=10u64 {
                if (p as f64 / q as f64) > 1.0 && (p as f64 / q as f64) < 2.0 && gcd_u64(p, q) == 1 {
                    n += 1;
                }
            }
        }
        assert_eq!(pairs.len(), n);
        assert!(pairs.contains(&(5, 3)) && pairs.contains(&(6, 5)));
    }

    #[test]
    fn normal_tail_quantile() {
        // reference values of the standard normal quantile
        assert!((upper_quantile(1e-7) - 5.199_337_582_192_817).abs() < 1e-10);
        assert!((upper_quantile(1e-6) - 4.753_424_308_822_899).abs() < 1e-10);
        assert!((upper_quantile(0.025) - 1.959_963_984_540_054).abs() < 1e-10);
    }

    #[test]
    fn moment_cap_binds_without_noise_or_range() {
        let s = SnrMatrix::per_encoding(&[1e6, 1e6, 1e6], 1).unwrap();
        let mut spec = DesignSpec::new(5, 5, s, [0.999, 1e-3], 1e-9, PI / 50.0);
        spec.trials_override = Some(2000);
        let r = design_three_point(&spec).unwrap();
        assert_eq!(r.c, moment_cap(r.p, r.q, spec.gamma_m_tau));
        let gm13 = r.moments[2];
        assert!(gm13 <= spec.gamma_m_tau + 1e-12);
        assert!((gm13 - spec.gamma_m_tau).abs() < 1e-12);
    }

    #[test]
    fn result_meets_both_constraints() {
        let s = SnrMatrix::per_encoding(&[5.0, 10.0, 5.0], 1).unwrap();
        let mut spec = DesignSpec::new(6, 6, s.clone(), [1e-3, 1e-3], 100.0, PI / 40.0);
        spec.seed = 3;
        let r = design_three_point(&spec).unwrap();
        assert_eq!(r.trials, 100_000);
        assert_eq!(r.venc.len(), 3);
        let base = base_venc(r.p, r.q).unwrap();
        for (v, b) in r.venc.iter().zip(base) {
            assert!((v - r.c * b as f64).abs() < 1e-9 * v);
        }
        assert!(r.moments[2] <= spec.gamma_m_tau + 1e-12);
        // aliasing margin
        let z = upper_quantile(spec.eps[1]);
        assert!(r.omega - spec.omega_eps >= 2.0 * z * r.predicted_rmse - 1e-9);
        // fresh seed: the error rate stays under eps1 up to a binomial 95% band
        let vs = r.venc_set().unwrap();
        let n = 100_000u64;
        let f = unwrap_error_prob(&s, &vs, n, 99, NoiseModel::Gaussian).unwrap();
        let band = 1.96 * (spec.eps[0] * (1.0 - spec.eps[0]) / n as f64).sqrt();
        assert!(f < spec.eps[0] + band, "{f}");
        // nothing with a better score passed
        for cand in &r.candidates {
            if let (Some(score), CandidateStatus::Accepted { .. }) = (cand.score, &cand.status) {
                assert_eq!((cand.p, cand.q), (r.p, r.q));
                assert!((score - r.predicted_rmse).abs() < 1e-12);
            }
            if let Some(score) = cand.score {
                if score < r.predicted_rmse {
                    assert!(
                        matches!(cand.status, CandidateStatus::Rejected { .. }),
                        "{}",
                        cand.summary()
                    );
                }
            }
        }
    }

    #[test]
    fn ordered_search_matches_full_scan() {
        let s = SnrMatrix::per_encoding(&[4.0, 8.0, 4.0], 1).unwrap();
        let mut spec = DesignSpec::new(7, 7, s.clone(), [1e-2, 1e-3], 80.0, PI / 40.0);
        spec.seed = 11;
        let r = design_three_point(&spec).unwrap();
        // the scan as written: every candidate simulated, replace on <=
        let trials = spec.trials().unwrap();
        let z = upper_quantile(spec.eps[1]);
        let mut best: Option<((u64, u64), f64)> = None;
        for (p, q) in admissible_pairs(7, 7) {
            let vs = VencSet::new(base_venc(p, q).unwrap().map(|x| x as f64).to_vec()).unwrap();
            let ctx = TubeContext::from_snr(&vs, &s).unwrap();
            let seed = derive_seed(spec.seed, tag(&format!("design/p{p}q{q}")));
            let e = count_unwrap_errors(&ctx, None, trials, seed, None);
            if e.frequency() >= spec.eps[0] {
                continue;
            }
            let sigma = ctx.variance().sqrt();
            let margin = ctx.omega() - 2.0 * z * sigma;
            if margin <= 0.0 {
                continue;
            }
            let c = (spec.omega_eps / margin).max(moment_cap(p, q, spec.gamma_m_tau));
            if best.is_none_or(|(_, b)| c * sigma <= b) {
                best = Some(((p, q), c * sigma));
            }
        }
        let ((p, q), score) = best.unwrap();
        assert_eq!((r.p, r.q), (p, q));
        assert!((r.predicted_rmse - score).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_scale_consistent() {
        let s = SnrMatrix::per_encoding(&[5.0, 10.0, 5.0], 1).unwrap();
        let mut spec = DesignSpec::new(6, 6, s, [1e-3, 1e-3], 100.0, PI / 40.0);
        spec.seed = 5;
        let a = design_three_point(&spec).unwrap();
        let b = design_three_point(&spec).unwrap();
        assert_eq!(a, b);
        // doubling the range doubles c and the RMSE once the cap is slack
        let mut wide = spec.clone();
        wide.omega_eps *= 2.0;
        wide.gamma_m_tau = 10.0;
        spec.gamma_m_tau = 10.0;
        let a = design_three_point(&spec).unwrap();
        let b = design_three_point(&wide).unwrap();
        assert_eq!((a.p, a.q), (b.p, b.q));
        assert_eq!(a.unwrap_error_prob, b.unwrap_error_prob);
        assert!((b.c / a.c - 2.0).abs() < 1e-12);
        assert!((b.predicted_rmse / a.predicted_rmse - 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_lists_every_candidate() {
        let s = SnrMatrix::per_encoding(&[0.5, 1.0, 0.5], 1).unwrap();
        let mut spec = DesignSpec::new(5, 5, s, [1e-4, 1e-4], 100.0, PI / 40.0);
        spec.trials_override = Some(10_000);
        match design_three_point(&spec) {
            Err(PromError::InfeasibleDesign { diagnostics, .. }) => {
                assert_eq!(diagnostics.len(), admissible_pairs(5, 5).len());
                assert!(diagnostics.iter().all(|d| d.contains("rejected")));
            }
            other => panic!("expected infeasible design, got {other:?}"),
        }
    }

    #[test]
    fn scale_rounding_respects_the_cap() {
        let s = SnrMatrix::per_encoding(&[5.0, 10.0, 5.0], 1).unwrap();
        let mut spec = DesignSpec::new(6, 6, s, [1e-3, 1e-3], 100.0, PI / 40.0);
        spec.scale_step = Some(0.5);
        let r = design_three_point(&spec).unwrap();
        assert_eq!((r.c / 0.5).fract(), 0.0);
        assert!((r.c - r.c_exact).abs() <= 0.25 || r.c >= moment_cap(r.p, r.q, spec.gamma_m_tau));
        assert!(r.moments[2] <= spec.gamma_m_tau + 1e-12);
        // a huge step must round up past the cap, not to zero
        spec.scale_step = Some(100.0);
        let r = design_three_point(&spec).unwrap();
        assert_eq!(r.c, 100.0);
    }

    #[test]
    fn trial_budget_needs_override() {
        let s = SnrMatrix::per_encoding(&[5.0, 10.0, 5.0], 1).unwrap();
        let mut spec = DesignSpec::new(10, 10, s, [1e-9, 1e-7], 300.0, PI / 50.0);
        assert!(matches!(spec.trials(), Err(PromError::Validation(_))));
        spec.trials_override = Some(1000);
        assert_eq!(spec.trials().unwrap(), 1000);
        spec.eps = [1e-7, 1e-7];
        spec.trials_override = None;
        assert_eq!(spec.trials().unwrap(), 1_000_000_000);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"P":10,"Q":10,"s":[[5,5],[10,10],[5,5]],"eps":[1e-6,1e-6],
            "omega_eps":200,"gamma_m_tau":0.07853981633974483,"trials_override":1000}"#;
        let spec: DesignSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.s.num_coils(), 2);
        assert_eq!(spec.s.get(1, 1), 10.0);
        assert_eq!(spec.trials_cap, DEFAULT_TRIALS_CAP);
        let back: DesignSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let flat: DesignSpec = serde_json::from_str(
            r#"{"P":10,"Q":10,"s":[10,20,10],"eps":[1e-7,1e-7],"omega_eps":300,"gamma_m_tau":0.06}"#,
        )
        .unwrap();
        assert_eq!(flat.s.num_coils(), 1);
        assert!(serde_json::from_str::<DesignSpec>(r#"{"P":1,"bogus":2}"#).is_err());
    }
}
