//! C ABI over promkit.
//!
//! Every function returns a [`PromkitStatus`]. On failure the message is
//! kept per thread and can be read with [`promkit_last_error`]. Panics are
//! caught at the boundary and reported as `PROMKIT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use num_complex::Complex64;
use promkit::congruence::{EncodingScheme, VencSet};
use promkit::design::{design_three_point, DesignSpec};
use promkit::error::PromError;
use promkit::measurement::{MeasurementField, MeasurementMatrix};
use promkit::voxel::{EstimatorId, EstimatorOptions, VoxelEstimator};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromkitStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad arguments, encodings or configuration.
    InvalidInput = 2,
    Io = 3,
    InfeasibleDesign = 4,
    /// The voxel could not be estimated (masked, degenerate covariance).
    Estimation = 5,
    Panic = 6,
}

/// Opaque estimator handle.
pub struct PromkitEstimator {
    inner: VoxelEstimator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PromError) -> PromkitStatus {
    match e {
        PromError::Io { .. } => PromkitStatus::Io,
        PromError::InfeasibleDesign { .. } => PromkitStatus::InfeasibleDesign,
        PromError::MaskedVoxel { .. }
        | PromError::DegenerateCovariance(_)
        | PromError::SingularPair { .. }
        | PromError::NonIdentifiable(_)
        | PromError::UndefinedSimilarity(_) => PromkitStatus::Estimation,
        _ => PromkitStatus::InvalidInput,
    }
}

/// Runs `f`, records any error, and turns panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (PromkitStatus, String)>) -> PromkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PromkitStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PromkitStatus::Panic
        }
    }
}

fn prom(e: PromError) -> (PromkitStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PromkitStatus, String) {
    (PromkitStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (PromkitStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PromkitStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PromkitStatus::InvalidInput, format!("{what} is not UTF-8")))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn promkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn promkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Unambiguous range of a set of pairwise vencs.
///
/// # Safety
/// `venc` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn promkit_unambiguous_range(venc: *const f64, n: usize, out: *mut f64) -> PromkitStatus {
    guard(|| {
        let v = slice(venc, n, "venc")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let set = VencSet::new(v.to_vec()).map_err(prom)?;
        *out = set.unambiguous_range().map_err(prom)?;
        Ok(())
    })
}

/// Creates an estimator for the given first moments (`gamma m1`, s/cm).
/// `name` is one of prom, sdv, odv, nco, mle. A NaN `offset` selects the
/// default output interval `[-Omega/2, Omega/2)`.
///
/// # Safety
/// `gamma_m1` must point to `num_encodings` doubles, `name` must be a nul
/// terminated string, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn promkit_estimator_new(
    gamma_m1: *const f64,
    num_encodings: usize,
    name: *const c_char,
    offset: f64,
    out: *mut *mut PromkitEstimator,
) -> PromkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = slice(gamma_m1, num_encodings, "gamma_m1")?;
        let id: EstimatorId = text(name, "name")?.parse().map_err(prom)?;
        let scheme = EncodingScheme::new(m.to_vec()).map_err(prom)?;
        let opts = EstimatorOptions {
            offset: (!offset.is_nan()).then_some(offset),
            ..EstimatorOptions::default()
        };
        let inner = VoxelEstimator::new(id, &scheme, &opts).map_err(prom)?;
        *out = Box::into_raw(Box::new(PromkitEstimator { inner }));
        Ok(())
    })
}

/// Releases an estimator. Null is ignored.
///
/// # Safety
/// `est` must come from `promkit_estimator_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn promkit_estimator_free(est: *mut PromkitEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Unambiguous range and interval start of an estimator.
///
/// # Safety
/// `est` must be a live handle; `omega` and `offset` must be writable.
#[no_mangle]
pub unsafe extern "C" fn promkit_estimator_range(
    est: *const PromkitEstimator,
    omega: *mut f64,
    offset: *mut f64,
) -> PromkitStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("est"))?;
        if omega.is_null() || offset.is_null() {
            return Err(null("output"));
        }
        *omega = e.inner.omega();
        *offset = e.inner.offset();
        Ok(())
    })
}

/// Estimates one voxel. `data` holds `num_encodings * num_coils` complex
/// samples as interleaved `(re, im)` doubles, coil fastest.
///
/// # Safety
/// `est` must be a live handle, `data` must point to
/// `2 * num_encodings * num_coils` doubles and `v` must be writable.
#[no_mangle]
pub unsafe extern "C" fn promkit_estimate_voxel(
    est: *const PromkitEstimator,
    data: *const f64,
    num_encodings: usize,
    num_coils: usize,
    v: *mut f64,
) -> PromkitStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("est"))?;
        if v.is_null() {
            return Err(null("v"));
        }
        let n = num_encodings
            .checked_mul(num_coils)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| (PromkitStatus::InvalidInput, "size overflow".into()))?;
        let d = slice(data, n, "data")?;
        let z = d.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        let y = MeasurementMatrix::new(num_encodings, num_coils, z).map_err(prom)?;
        *v = e.inner.estimate(&y).map_err(prom)?;
        Ok(())
    })
}

/// Estimates a whole image. `data` uses the container layout: interleaved
/// `(re, im)` floats, x fastest, then y, coil, encoding. `out` receives
/// `ny * nx` velocities, NaN where a voxel could not be estimated.
///
/// # Safety
/// `est` must be a live handle, `data` must hold `2 * ne * nc * ny * nx`
/// floats and `out` must have room for `ny * nx` floats.
#[no_mangle]
pub unsafe extern "C" fn promkit_estimate_image(
    est: *const PromkitEstimator,
    data: *const f32,
    ne: usize,
    nc: usize,
    ny: usize,
    nx: usize,
    out: *mut f32,
) -> PromkitStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("est"))?;
        let count = [ne, nc, ny, nx, 2]
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| (PromkitStatus::InvalidInput, "size overflow".into()))?;
        let d = slice(data, count, "data")?;
        if out.is_null() && ny * nx > 0 {
            return Err(null("out"));
        }
        let z = d
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
            .collect();
        let field = MeasurementField::new(ne, nc, ny, nx, z).map_err(prom)?;
        let voxels: Vec<MeasurementMatrix> = (0..field.num_voxels()).map(|p| field.voxel(p)).collect();
        let res = promkit::voxel::estimate_voxels(&e.inner, &voxels);
        let dst = std::slice::from_raw_parts_mut(out, ny * nx);
        for (o, r) in dst.iter_mut().zip(res) {
            *o = r.map_or(f32::NAN, |v| v as f32);
        }
        Ok(())
    })
}

/// Runs the three-point design. `spec_json` is a design spec as in the
/// `design` section of a run config. On success `*result_json` owns a
/// string to be released with `promkit_string_free`. On infeasible designs
/// the per-candidate reasons are in the last error.
///
/// # Safety
/// `spec_json` must be a nul terminated string; `result_json` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn promkit_design(spec_json: *const c_char, result_json: *mut *mut c_char) -> PromkitStatus {
    guard(|| {
        if result_json.is_null() {
            return Err(null("result_json"));
        }
        *result_json = ptr::null_mut();
        let spec: DesignSpec = serde_json::from_str(text(spec_json, "spec_json")?)
            .map_err(|e| (PromkitStatus::InvalidInput, format!("design spec: {e}")))?;
        let r = match design_three_point(&spec) {
            Ok(r) => r,
            Err(PromError::InfeasibleDesign { reason, diagnostics }) => {
                return Err((
                    PromkitStatus::InfeasibleDesign,
                    format!("infeasible design: {reason}\n{}", diagnostics.join("\n")),
                ));
            }
            Err(e) => return Err(prom(e)),
        };
        let s = serde_json::to_string(&r).map_err(|e| (PromkitStatus::Io, e.to_string()))?;
        *result_json = CString::new(s).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn promkit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
