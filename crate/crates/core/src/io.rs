//! On-disk formats: the GFKM matrix container, JSON sidecars, and atomic writes.
//!
//! GFKM layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"GFKM"
//! 4       4     u32    version (= 1)
//! 8       8     u64    rows
//! 16      8     u64    cols
//! 24      8*r*c f64    entries, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

pub const GFKM_MAGIC: [u8; 4] = *b"GFKM";
pub const GFKM_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Serializes a matrix into GFKM bytes. Rejects non-finite entries.
pub fn encode_gfkm(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(&GFKM_MAGIC);
    out.extend_from_slice(&GFKM_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses GFKM bytes. `origin` is only used in error messages.
pub fn decode_gfkm(bytes: &[u8], origin: &Path) -> Result<DMatrix<f64>> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if bytes[0..4] != GFKM_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GFKM_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "payload length {} does not match {rows}x{cols}",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = &bytes[HEADER_LEN..];
    let m = DMatrix::from_fn(rows, cols, |r, c| {
        let at = 8 * (r * cols + c);
        f64::from_le_bytes(data[at..at + 8].try_into().unwrap())
    });
    if m.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite entry"));
    }
    Ok(m)
}

pub fn read_gfkm(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_gfkm(&bytes, path)
}

pub fn write_gfkm(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_gfkm(m)?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Path of the JSON sidecar that accompanies an artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    artifact.with_file_name(name)
}

/// Provenance block embedded in every sidecar.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_sidecar<T: Serialize>(artifact: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    write_json(&sidecar_path(artifact), &Sidecar { provenance, body })
}

/// Reads a matrix whose rows are samples, or a single vector stored as 1×D or D×1.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let m = read_gfkm(path)?;
    if m.nrows() == 1 || m.ncols() == 1 {
        Ok(m.iter().copied().collect())
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a vector, found {}x{}", m.nrows(), m.ncols()),
        })
    }
}
