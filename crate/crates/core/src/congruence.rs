//! Venc and unambiguous-range arithmetic for multi-point velocity encoding.
//!
//! Every pairwise phase difference `theta_ab = phi_a - phi_b` (a > b) carries
//! velocity with its own venc, so measurements alias modulo `2 * venc_ab`.
//! Pairs are always laid out in the canonical order 21, 31, 32, 41, 42, 43, ...
//! (zero-based `(1,0), (2,0), (2,1), ...`), and every vector or matrix indexed
//! by pairs in this crate uses that order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PromError, Result};

/// Largest denominator accepted when rationalizing venc ratios.
pub const MAX_DENOMINATOR: u64 = 1_000_000;
/// Relative tolerance of the rational reconstruction of venc ratios.
pub const RATIONAL_TOLERANCE: f64 = 1e-9;

/// First-moment products `gamma * m1` (s/cm), one per encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EncodingScheme {
    gamma_m1: Vec<f64>,
}

impl EncodingScheme {
    /// Moments must be finite and strictly increasing, which keeps every
    /// derived venc positive.
    pub fn new(gamma_m1: Vec<f64>) -> Result<Self> {
        if gamma_m1.len() < 2 {
            return Err(PromError::DegenerateEncoding(format!(
                "need at least two encodings, got {}",
                gamma_m1.len()
            )));
        }
        if let Some(bad) = gamma_m1.iter().find(|m| !m.is_finite()) {
            return Err(PromError::DegenerateEncoding(format!("non-finite first moment {bad}")));
        }
        for (i, w) in gamma_m1.windows(2).enumerate() {
            if w[1] == w[0] {
                return Err(PromError::DegenerateEncoding(format!(
                    "encodings {} and {} share first moment {}",
                    i + 1,
                    i + 2,
                    w[0]
                )));
            }
            if w[1] < w[0] {
                return Err(PromError::DegenerateEncoding(format!(
                    "first moments must be strictly increasing (encoding {} = {} > encoding {} = {})",
                    i + 1,
                    w[0],
                    i + 2,
                    w[1]
                )));
            }
        }
        Ok(Self { gamma_m1 })
    }

    pub fn gamma_m1(&self) -> &[f64] {
        &self.gamma_m1
    }

    pub fn num_encodings(&self) -> usize {
        self.gamma_m1.len()
    }

    pub fn num_pairs(&self) -> usize {
        num_pairs(self.num_encodings())
    }

    pub fn vencs(&self) -> VencSet {
        vencs_from_moments(self)
    }
}

impl TryFrom<Vec<f64>> for EncodingScheme {
    type Error = PromError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EncodingScheme> for Vec<f64> {
    fn from(s: EncodingScheme) -> Self {
        s.gamma_m1
    }
}

pub fn num_pairs(num_encodings: usize) -> usize {
    num_encodings * num_encodings.saturating_sub(1) / 2
}

/// Canonical pair order `(a, b)`, `a > b`, zero-based.
pub fn pair_order(num_encodings: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(num_pairs(num_encodings));
    for a in 1..num_encodings {
        for b in 0..a {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Number of encodings implied by a pair count, if it is triangular.
pub fn encodings_for_pairs(num_pairs: usize) -> Option<usize> {
    (2..=64).find(|&n| n * (n - 1) / 2 == num_pairs)
}

/// `venc = scale * integers`, with the integers coprime as a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalForm {
    pub scale: f64,
    pub integers: Vec<u64>,
}

impl RationalForm {
    pub fn reconstruct(&self) -> Vec<f64> {
        self.integers.iter().map(|&n| self.scale * n as f64).collect()
    }
}

/// Pairwise vencs (cm/s) in canonical pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct VencSet {
    venc: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    rational: Option<RationalForm>,
}

impl VencSet {
    /// Builds a venc set directly from values, e.g. `[35, 10, 14]`.
    pub fn new(venc: Vec<f64>) -> Result<Self> {
        let ne = encodings_for_pairs(venc.len())
            .ok_or_else(|| PromError::Dimension(format!("{} vencs is not a pair count n(n-1)/2", venc.len())))?;
        if let Some(bad) = venc.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(PromError::InvalidArgument(format!(
                "venc values must be positive and finite, got {bad}"
            )));
        }
        let rational = rational_form(&venc);
        Ok(Self {
            venc,
            pairs: pair_order(ne),
            rational,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.venc
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.venc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.venc.is_empty()
    }

    pub fn num_encodings(&self) -> usize {
        self.pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0)
    }

    pub fn rational_form(&self) -> Option<&RationalForm> {
        self.rational.as_ref()
    }

    /// Aliasing periods `2 * venc`.
    pub fn periods(&self) -> Vec<f64> {
        self.venc.iter().map(|v| 2.0 * v).collect()
    }

    pub fn unambiguous_range(&self) -> Result<f64> {
        unambiguous_range(self)
    }

    /// `h = Omega / (2 venc)`, the number of wraps of each pair over one range.
    pub fn wraps_per_range(&self) -> Result<Vec<i64>> {
        let rf = self.rational.as_ref().ok_or_else(no_range_err)?;
        let l = lcm_all(&rf.integers).ok_or_else(no_range_err)?;
        Ok(rf.integers.iter().map(|&n| (l / n as u128) as i64).collect())
    }

    /// Three-point accessors, valid when the set has exactly three pairs.
    pub fn three_point(&self) -> Result<(f64, f64, f64)> {
        if self.venc.len() != 3 {
            return Err(PromError::Dimension(format!(
                "three-point encoding expected, got {} pairs",
                self.venc.len()
            )));
        }
        Ok((self.venc[0], self.venc[1], self.venc[2]))
    }

    pub fn scaled(&self, t: f64) -> Result<Self> {
        Self::new(self.venc.iter().map(|v| v * t).collect())
    }
}

fn no_range_err() -> PromError {
    PromError::NoFiniteRange("venc ratios are not rational within tolerance (or the integer LCM overflows)".into())
}

/// `venc_ab = pi / (gamma (m1a - m1b))` for every pair in canonical order.
pub fn vencs_from_moments(scheme: &EncodingScheme) -> VencSet {
    let m = scheme.gamma_m1();
    let pairs = pair_order(m.len());
    let venc: Vec<f64> = pairs.iter().map(|&(a, b)| PI / (m[a] - m[b])).collect();
    let rational = rational_form(&venc);
    VencSet { venc, pairs, rational }
}

/// Symmetric three-point moments (`m11 = -m13`) realizing the given vencs.
pub fn symmetric_moments_from_vencs(venc31: f64, venc32: f64) -> Result<EncodingScheme> {
    if !(venc31.is_finite() && venc32.is_finite() && venc31 > 0.0 && venc32 > 0.0) {
        return Err(PromError::InvalidArgument(format!(
            "vencs must be positive and finite, got {venc31}, {venc32}"
        )));
    }
    let xi = venc32 / venc31;
    if !(xi > 1.0 && xi < 2.0) {
        return Err(PromError::UnsupportedGeometry(format!(
            "venc32/venc31 = {xi} must lie in (1, 2)"
        )));
    }
    let m11 = -PI / (2.0 * venc31);
    let m12 = PI / (2.0 * venc31) - PI / venc32;
    EncodingScheme::new(vec![m11, m12, -m11])
}

/// Best rational approximation `p/q` of `x > 0` by continued fractions.
pub fn rationalize(x: f64, max_den: u64, rel_tol: f64) -> Option<(u64, u64)> {
    if !(x.is_finite() && x > 0.0) {
        return None;
    }
    let (mut p0, mut q0, mut p1, mut q1) = (0u128, 1u128, 1u128, 0u128);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > 1e18 {
            break;
        }
        let a = a as u128;
        let p2 = a.checked_mul(p1)?.checked_add(p0)?;
        let q2 = a.checked_mul(q1)?.checked_add(q0)?;
        if q2 > max_den as u128 {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let approx = p1 as f64 / q1 as f64;
        if ((approx - x) / x).abs() <= rel_tol {
            return Some((u64::try_from(p1).ok()?, u64::try_from(q1).ok()?));
        }
        let frac = r - r.floor();
        if frac == 0.0 {
            break;
        }
        r = 1.0 / frac;
    }
    None
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn lcm(a: u128, b: u128) -> Option<u128> {
    (a / gcd(a, b)).checked_mul(b)
}

fn lcm_all(xs: &[u64]) -> Option<u128> {
    xs.iter().try_fold(1u128, |acc, &x| lcm(acc, x as u128))
}

pub(crate) fn gcd_u64(a: u64, b: u64) -> u64 {
    gcd(a as u128, b as u128) as u64
}

/// Writes positive reals as `scale * integers` with coprime integers.
pub fn rational_form(values: &[f64]) -> Option<RationalForm> {
    let first = *values.first()?;
    if !(first.is_finite() && first > 0.0) {
        return None;
    }
    let mut fracs = Vec::with_capacity(values.len());
    for &x in values {
        fracs.push(rationalize(x / first, MAX_DENOMINATOR, RATIONAL_TOLERANCE)?);
    }
    let den = fracs.iter().try_fold(1u128, |acc, &(_, q)| lcm(acc, q as u128))?;
    let mut ints = Vec::with_capacity(fracs.len());
    for &(p, q) in &fracs {
        ints.push((p as u128).checked_mul(den / q as u128)?);
    }
    let g = ints.iter().fold(0u128, |acc, &n| gcd(acc, n));
    let integers = ints
        .iter()
        .map(|&n| u64::try_from(n / g).ok())
        .collect::<Option<Vec<u64>>>()?;
    // least-squares scale over all entries
    let num: f64 = values.iter().zip(&integers).map(|(x, &n)| x * n as f64).sum();
    let den2: f64 = integers.iter().map(|&n| (n as f64) * (n as f64)).sum();
    Some(RationalForm {
        scale: num / den2,
        integers,
    })
}

/// Least common multiple of positive reals via their rational form.
pub fn real_lcm(values: &[f64]) -> Result<f64> {
    let rf = rational_form(values).ok_or_else(no_range_err)?;
    let l = lcm_all(&rf.integers).ok_or_else(no_range_err)?;
    Ok(rf.scale * l as f64)
}

/// `Omega = LCM(2 venc)`: the smallest period of the pairwise congruences.
pub fn unambiguous_range(vencs: &VencSet) -> Result<f64> {
    let rf = vencs.rational.as_ref().ok_or_else(no_range_err)?;
    let l = lcm_all(&rf.integers).ok_or_else(no_range_err)?;
    Ok(2.0 * rf.scale * l as f64)
}

/// Period of the raw complex data in `v`: LCM of `2 pi / |gamma m1|` over the
/// nonzero moments. Always an integer multiple of the pairwise range.
pub fn moment_period(scheme: &EncodingScheme) -> Result<f64> {
    let periods: Vec<f64> = scheme
        .gamma_m1()
        .iter()
        .filter(|m| **m != 0.0)
        .map(|m| 2.0 * PI / m.abs())
        .collect();
    if periods.is_empty() {
        return Err(PromError::DegenerateEncoding("all first moments are zero".into()));
    }
    real_lcm(&periods)
}

/// `x - y - round(x - y / z) * z`, rounding half to even. Lies in `[-z/2, z/2]`.
#[inline]
pub fn wrapped_diff(x: f64, y: f64, z: f64) -> f64 {
    let d = x - y;
    d - (d / z).round_ties_even() * z
}

/// Elementwise wrapped displacement `d_z(x, y)`.
pub fn wrapped_displacement(x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), z.len(), "x and z lengths differ");
    assert_eq!(y.len(), z.len(), "y and z lengths differ");
    x.iter()
        .zip(y)
        .zip(z)
        .map(|((&x, &y), &z)| wrapped_diff(x, y, z))
        .collect()
}

/// Wrapped displacement against a scalar `y` broadcast to every entry.
pub fn wrapped_displacement_scalar(x: &[f64], y: f64, z: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), z.len(), "x and z lengths differ");
    x.iter().zip(z).map(|(&x, &z)| wrapped_diff(x, y, z)).collect()
}

/// Representative of `v` modulo `omega` in `[offset, offset + omega)`.
#[inline]
pub fn wrap_to_range(v: f64, omega: f64, offset: f64) -> f64 {
    let d = v - offset;
    if (0.0..omega).contains(&d) {
        return v;
    }
    let mut r = d - (d / omega).floor() * omega;
    // the product can round either way near the ends
    if r < 0.0 {
        r += omega;
    }
    if r >= omega {
        r -= omega;
    }
    if r >= omega || r < 0.0 {
        offset
    } else {
        offset + r
    }
}
