//! Image files and run manifests.
//!
//! Images are written twice: a 16-bit binary PGM for viewing and a raw
//! little-endian float32 file with a JSON sidecar (`<name>.json`) for exact
//! values. Complex rasters interleave `(re, im)`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use imjense::{ComplexImage, SensitivityMaps};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub dtype: String,
    /// `[frames, d1, d2]`, rows of `d2` values.
    pub shape: [usize; 3],
    /// 1 for real rasters, 2 for interleaved complex.
    pub components: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_raw(path: &Path, shape: [usize; 3], components: usize, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(shape.iter().product::<usize>() * components * 4);
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if bytes.len() != shape.iter().product::<usize>() * components * 4 {
        bail!("{}: value count does not match shape {shape:?}", path.display());
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let header = RawHeader {
        dtype: "float32-le".into(),
        shape,
        components,
    };
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_string_pretty(&header)? + "\n").with_context(|| format!("writing {}", side.display()))
}

pub fn write_real(path: &Path, d1: usize, d2: usize, values: &[f64]) -> Result<()> {
    write_raw(path, [1, d1, d2], 1, values.iter().copied())
}

pub fn write_complex(path: &Path, image: &ComplexImage) -> Result<()> {
    write_raw(path, [1, image.d1, image.d2], 2, image.data.iter().flat_map(|z| [z.re, z.im]))
}

pub fn write_maps(path: &Path, maps: &SensitivityMaps) -> Result<()> {
    write_raw(path, [maps.coils, maps.d1, maps.d2], 2, maps.data.iter().flat_map(|z| [z.re, z.im]))
}

/// Reads a single-frame raster as a magnitude image: complex rasters are
/// reduced to `|z|`.
pub fn read_magnitude(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).with_context(|| format!("reading sidecar {}", side.display()))?;
    let header: RawHeader = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    let [frames, d1, d2] = header.shape;
    if header.dtype != "float32-le" || frames != 1 || !(1..=2).contains(&header.components) {
        bail!("{}: expected one float32-le frame of 1 or 2 components, got {header:?}", side.display());
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let expected = d1 * d2 * header.components * 4;
    if bytes.len() != expected {
        bail!("{}: expected {expected} bytes for {d1}×{d2}, found {}", path.display(), bytes.len());
    }
    let raw: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = if header.components == 2 {
        raw.chunks_exact(2).map(|c| c[0].hypot(c[1])).collect()
    } else {
        raw
    };
    Ok((d1, d2, values))
}

/// Binary 16-bit PGM, `d1` rows by `d2` columns, `lo..hi` mapped to the full
/// grey range.
pub fn write_pgm(path: &Path, d1: usize, d2: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    let mut bytes = format!("P5\n{d2} {d1}\n65535\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in values {
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&g.to_be_bytes());
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Magnitude scaled by its maximum.
pub fn write_magnitude_pgm(path: &Path, d1: usize, d2: usize, magnitude: &[f64]) -> Result<()> {
    let max = magnitude.iter().copied().fold(0.0, f64::max);
    write_pgm(path, d1, d2, magnitude, 0.0, max)
}

/// Phase mapped from `[-π, π]`.
pub fn write_phase_pgm(path: &Path, d1: usize, d2: usize, phase: &[f64]) -> Result<()> {
    write_pgm(path, d1, d2, phase, -std::f64::consts::PI, std::f64::consts::PI)
}

/// Writes magnitude and phase of `image` as `<stem>_mag` and `<stem>_phase`
/// PGM plus raw files, and the complex raster as `<stem>.f32`.
pub fn write_image_set(dir: &Path, stem: &str, image: &ComplexImage) -> Result<Vec<PathBuf>> {
    let (d1, d2) = (image.d1, image.d2);
    let mag = image.magnitude();
    let phase = image.phase();
    let paths = [
        dir.join(format!("{stem}.f32")),
        dir.join(format!("{stem}_mag.f32")),
        dir.join(format!("{stem}_mag.pgm")),
        dir.join(format!("{stem}_phase.f32")),
        dir.join(format!("{stem}_phase.pgm")),
    ];
    write_complex(&paths[0], image)?;
    write_real(&paths[1], d1, d2, &mag)?;
    write_magnitude_pgm(&paths[2], d1, d2, &mag)?;
    write_real(&paths[3], d1, d2, &phase)?;
    write_phase_pgm(&paths[4], d1, d2, &phase)?;
    Ok(paths.to_vec())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: serde_json::Value,
    pub tool_version: String,
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: serde_json::Value::Null,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_clock_seconds: 0.0,
        }
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        self.wall_clock_seconds = (now - self.started_unix).max(0.0);
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
