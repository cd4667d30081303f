//! On-disk formats: the complex image container with its JSON sidecar, the
//! float velocity map, and atomic file writes.
//!
//! Container layout, all little endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `PROMCIMG` |
//! | 2     | version (u16) |
//! | 16    | `Ne`, `Nc`, `Ny`, `Nx` (u32 each) |
//! | 2     | dtype code (u16, 1 = complex f32) |
//! | rest  | `(re, im)` f32 pairs, x fastest, then y, coil, encoding |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::congruence::{EncodingScheme, VencSet};
use crate::error::{PromError, Result};
use crate::measurement::MeasurementField;

pub const MAGIC: &[u8; 8] = b"PROMCIMG";
pub const VERSION: u16 = 1;
pub const DTYPE_COMPLEX_F32: u16 = 1;
pub const HEADER_LEN: usize = 8 + 2 + 16 + 2;

/// Metadata stored next to a container as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// `gamma m1` per encoding, s/cm.
    pub gamma_m1: Vec<f64>,
    /// Pairwise vencs in canonical pair order, cm/s.
    pub venc: Vec<f64>,
    pub offset: Option<f64>,
    #[serde(default = "default_units")]
    pub units: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: String,
}

fn default_units() -> String {
    "cm/s".into()
}

impl Sidecar {
    pub fn for_scheme(scheme: &EncodingScheme, offset: Option<f64>, seed: Option<u64>, provenance: &str) -> Self {
        Self {
            gamma_m1: scheme.gamma_m1().to_vec(),
            venc: scheme.vencs().values().to_vec(),
            offset,
            units: default_units(),
            seed,
            provenance: provenance.into(),
        }
    }

    /// Checks that `venc` follows from `gamma_m1`.
    pub fn scheme(&self) -> Result<EncodingScheme> {
        let scheme = EncodingScheme::new(self.gamma_m1.clone())?;
        let want = scheme.vencs();
        if want.values().len() != self.venc.len() {
            return Err(PromError::Validation(format!(
                "sidecar lists {} vencs, moments give {}",
                self.venc.len(),
                want.values().len()
            )));
        }
        for (a, b) in self.venc.iter().zip(want.values()) {
            if (a - b).abs() > 1e-6 * b.abs() {
                return Err(PromError::Validation(format!(
                    "sidecar venc {a} disagrees with moments ({b})"
                )));
            }
        }
        Ok(scheme)
    }

    pub fn vencs(&self) -> Result<VencSet> {
        Ok(self.scheme()?.vencs())
    }
}

/// Serializes a field to container bytes; samples are rounded to f32.
pub fn encode_container(field: &MeasurementField) -> Result<Vec<u8>> {
    let dims = [field.ne, field.nc, field.ny, field.nx];
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * field.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| PromError::Dimension(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_COMPLEX_F32.to_le_bytes());
    for z in &field.data {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<MeasurementField> {
    if bytes.len() < HEADER_LEN {
        return Err(PromError::io_at(
            format!("container header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            bytes.len() as u64,
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(PromError::io_at("bad magic, expected PROMCIMG", 0));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u16_at(8);
    if version != VERSION {
        return Err(PromError::io_at(format!("unsupported container version {version}"), 8));
    }
    let (ne, nc, ny, nx) = (u32_at(10), u32_at(14), u32_at(18), u32_at(22));
    let dtype = u16_at(26);
    if dtype != DTYPE_COMPLEX_F32 {
        return Err(PromError::io_at(format!("unsupported dtype code {dtype}"), 26));
    }
    if ne < 2 || nc < 1 || ny < 1 || nx < 1 {
        return Err(PromError::io_at(format!("bad dimensions {ne}x{nc}x{ny}x{nx}"), 10));
    }
    let n = ne
        .checked_mul(nc)
        .and_then(|x| x.checked_mul(ny))
        .and_then(|x| x.checked_mul(nx))
        .ok_or_else(|| PromError::io_at("dimensions overflow", 10))?;
    let want = n
        .checked_mul(8)
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| PromError::io_at("dimensions overflow", 10))?;
    if bytes.len() != want {
        return Err(PromError::io_at(
            format!(
                "payload length mismatch: header implies {want} bytes, file has {}",
                bytes.len()
            ),
            bytes.len().min(want) as u64,
        ));
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let data = (0..n)
        .map(|i| {
            let o = HEADER_LEN + 8 * i;
            Complex64::new(f32_at(o), f32_at(o + 4))
        })
        .collect();
    MeasurementField::new(ne, nc, ny, nx, data)
}

/// `foo.pci` -> `foo.json`.
pub fn sidecar_path(container: &Path) -> PathBuf {
    container.with_extension("json")
}

pub fn write_container(path: &Path, field: &MeasurementField, sidecar: &Sidecar) -> Result<()> {
    if sidecar.gamma_m1.len() != field.ne {
        return Err(PromError::Dimension(format!(
            "sidecar has {} encodings, field has {}",
            sidecar.gamma_m1.len(),
            field.ne
        )));
    }
    sidecar.scheme()?;
    write_atomic(path, &encode_container(field)?)?;
    write_json(&sidecar_path(path), sidecar)
}

pub fn read_container(path: &Path) -> Result<(MeasurementField, Sidecar)> {
    let bytes = fs::read(path).map_err(|e| PromError::io(format!("{}: {e}", path.display())))?;
    let field = decode_container(&bytes)?;
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| PromError::io(format!("{}: {e}", side_path.display())))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| PromError::io(format!("{}: {e}", side_path.display())))?;
    if sidecar.gamma_m1.len() != field.ne {
        return Err(PromError::Validation(format!(
            "sidecar has {} encodings, container has {}",
            sidecar.gamma_m1.len(),
            field.ne
        )));
    }
    sidecar.scheme()?;
    Ok((field, sidecar))
}

/// Metadata written next to an f32 map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub ny: usize,
    pub nx: usize,
    /// Always `f32le`; NaN marks masked voxels.
    pub dtype: String,
    pub units: String,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub offset: Option<f64>,
    #[serde(default)]
    pub estimator: Option<String>,
}

impl MapMeta {
    pub fn new(ny: usize, nx: usize) -> Self {
        Self {
            ny,
            nx,
            dtype: "f32le".into(),
            units: default_units(),
            omega: None,
            offset: None,
            estimator: None,
        }
    }
}

/// Little-endian f32 map, NaN where there is no value.
pub fn encode_map(values: &[Option<f64>]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|v| (v.unwrap_or(f64::NAN) as f32).to_le_bytes())
        .collect()
}

pub fn decode_map(bytes: &[u8]) -> Result<Vec<Option<f64>>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(PromError::io_at(
            "map length is not a multiple of 4",
            bytes.len() as u64,
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            (!v.is_nan()).then_some(v as f64)
        })
        .collect())
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| PromError::io(format!("{}: {e}", dir.display())))?;
    let name = path
        .file_name()
        .ok_or_else(|| PromError::io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        PromError::io(format!("{}: {e}", path.display()))
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PromError::io(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
