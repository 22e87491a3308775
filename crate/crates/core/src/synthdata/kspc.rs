//! The `KSPC` multi-coil k-space container.
//!
//! All values little-endian:
//!
//! ```text
//! "KSPC"  u16 version  u16 coils  u32 d1  u32 d2  u32 line count
//! u32 kept line[line count]   (centered indices, sorted)
//! f32 (re, im)[coils·d1·d2]   (coil-major, rows of d2, DC at (0, 0))
//! ```

use std::path::Path;

use num_complex::Complex64;

use crate::binio::{put_f32, put_u16, put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::mrop::{KSpaceVolume, SamplingMask};

const MAGIC: &[u8; 4] = b"KSPC";
const VERSION: u16 = 1;

/// Writes `volume` with samples rounded to single precision.
pub fn write_kspc(path: &Path, volume: &KSpaceVolume) -> Result<()> {
    if volume.coils > u16::MAX as usize {
        return Err(Error::invalid(format!("{} coils do not fit the KSPC header", volume.coils)));
    }
    let lines = volume.mask.kept_lines();
    let mut out = Vec::with_capacity(20 + 4 * lines.len() + 8 * volume.data.len());
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u16(&mut out, volume.coils as u16);
    put_u32(&mut out, volume.d1);
    put_u32(&mut out, volume.d2);
    put_u32(&mut out, lines.len());
    lines.iter().for_each(|&l| put_u32(&mut out, l));
    for z in &volume.data {
        put_f32(&mut out, z.re as f32);
        put_f32(&mut out, z.im as f32);
    }
    write_file(path, &out)
}

pub fn read_kspc(path: &Path) -> Result<KSpaceVolume> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    if r.take(4)? != MAGIC {
        return Err(r.format_error(0, "not a KSPC file (bad magic)"));
    }
    let at = r.offset();
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.format_error(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let coils = r.u16()? as usize;
    let d1 = r.u32()? as usize;
    let d2 = r.u32()? as usize;
    if coils == 0 || d1 == 0 || d2 == 0 {
        return Err(r.format_error(at, format!("empty volume {coils}×{d1}×{d2}")));
    }
    let at = r.offset();
    let count = r.u32()? as usize;
    if count > d2 {
        return Err(r.format_error(at, format!("{count} kept lines for {d2} phase-encode lines")));
    }
    let at = r.offset();
    let mut lines = Vec::with_capacity(count);
    for _ in 0..count {
        lines.push(r.u32()? as usize);
    }
    if lines.windows(2).any(|w| w[0] >= w[1]) || lines.iter().any(|&l| l >= d2) {
        return Err(r.format_error(at, "kept lines must be sorted, unique and in range"));
    }
    let n = coils * d1 * d2;
    r.require(n as u64 * 8)?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let re = r.f32()?;
        let im = r.f32()?;
        data.push(Complex64::new(re as f64, im as f64));
    }
    r.finish()?;
    KSpaceVolume::new(coils, data, SamplingMask::new(d1, d2, lines)?)
}
