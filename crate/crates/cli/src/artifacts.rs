//! Report files. Every artifact is assembled in memory and moved into
//! place atomically, so a crash never leaves a half-written file, and two
//! runs with the same inputs produce byte-identical output.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{AppError, AppResult};

/// Full precision for numeric CSV cells: seventeen significant digits
/// round-trip any double exactly.
pub fn full(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn full_opt(v: Option<f64>) -> String {
    v.map(full).unwrap_or_default()
}

/// Four significant digits for human-facing tables.
pub fn sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn sig4_opt(v: Option<f64>) -> String {
    v.map(sig4).unwrap_or_else(|| "-".into())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| AppError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Writes one CSV artifact from pre-formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> AppResult<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| AppError::Io(e.to_string()))?;
    atomic_write(path, &bytes)
}

pub fn in_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
