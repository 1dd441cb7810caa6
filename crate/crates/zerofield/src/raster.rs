//! Scalar raster export/import: 32-bit little-endian float raw files with a
//! JSON sidecar, and CSV with a `#`-prefixed metadata header. NaN is the
//! masked-pixel sentinel in both.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sidecar metadata describing one raster component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterMeta {
    pub nx: usize,
    pub ny: usize,
    pub pitch_m: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standoff_m: Option<f64>,
    pub component: String,
    pub units: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bin_factor: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_encoding: Option<String>,
}

/// Writes `<base>.f32` (row-major LE f32) and `<base>.json`.
pub fn write_f32_raster(base: &Path, data: &[f64], meta: &RasterMeta) -> Result<()> {
    if data.len() != meta.nx * meta.ny {
        return Err(Error::Dimension(format!(
            "raster has {} values for {}x{}",
            data.len(),
            meta.nx,
            meta.ny
        )));
    }
    let raw: PathBuf = base.with_extension("f32");
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let side = base.with_extension("json");
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Reads a `<base>.f32` + `<base>.json` pair.
pub fn read_f32_raster(base: &Path) -> Result<(Vec<f64>, RasterMeta)> {
    let side = base.with_extension("json");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RasterMeta =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", side.display())))?;
    let raw = base.with_extension("f32");
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let need = meta.nx * meta.ny * 4;
    if bytes.len() != need {
        return Err(Error::Dimension(format!(
            "{}: {} bytes for a {}x{} f32 raster (expected {need})",
            raw.display(),
            bytes.len(),
            meta.nx,
            meta.ny
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((data, meta))
}

/// Writes the raster as CSV: metadata as `# key = value` lines, then ny
/// rows of nx comma-separated values. Masked cells are written as NaN.
pub fn write_csv_raster(path: &Path, data: &[f64], meta: &RasterMeta) -> Result<()> {
    if data.len() != meta.nx * meta.ny {
        return Err(Error::Dimension(format!(
            "raster has {} values for {}x{}",
            data.len(),
            meta.nx,
            meta.ny
        )));
    }
    let mut buf = Vec::new();
    let w = &mut buf;
    writeln!(w, "# component = {}", meta.component).unwrap();
    writeln!(w, "# units = {}", meta.units).unwrap();
    writeln!(w, "# nx = {}", meta.nx).unwrap();
    writeln!(w, "# ny = {}", meta.ny).unwrap();
    writeln!(w, "# pitch_m = {:e}", meta.pitch_m).unwrap();
    if let Some(s) = meta.standoff_m {
        writeln!(w, "# standoff_m = {s:e}").unwrap();
    }
    if let Some(b) = meta.bin_factor {
        writeln!(w, "# bin_factor = {b}").unwrap();
    }
    for row in data.chunks(meta.nx) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(",")).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
