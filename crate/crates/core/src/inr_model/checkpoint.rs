//! The `IMJW` parameter checkpoint.
//!
//! All values little-endian:
//!
//! ```text
//! "IMJW"  u16 version  u32 d1  u32 d2
//! u8 activation (0 sine, 1 relu)  u32 encoding bands (0 = none)  f64 w0
//! 2 × branch (real, imaginary):
//!     u32 layer count
//!     per layer: u32 fan_out  u32 fan_in  f64 weight[fan_out·fan_in]  f64 bias[fan_out]
//! u32 coils  u32 order  f64 coeffs[coils·2·(order+1)²]
//! ```

use std::path::Path;

use super::{Activation, InrParameters, Layer};
use crate::binio::{put_f64, put_u16, put_u32, read_file, write_file, Reader};
use crate::coilmodel::{monomial_count, PolyCoefficients};
use crate::error::Result;
use crate::tensorgrad::RealTensor;

const MAGIC: &[u8; 4] = b"IMJW";
const VERSION: u16 = 1;

/// A trained model: both networks plus the coil polynomials, in double
/// precision, for an image of `d1×d2` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub d1: usize,
    pub d2: usize,
    pub inr: InrParameters<f64>,
    pub poly: PolyCoefficients<f64>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, ckpt.d1);
    put_u32(&mut out, ckpt.d2);
    out.push(match ckpt.inr.activation {
        Activation::Sine => 0,
        Activation::Relu => 1,
    });
    put_u32(&mut out, ckpt.inr.encoding_bands.unwrap_or(0));
    put_f64(&mut out, ckpt.inr.w0);
    for layers in [&ckpt.inr.real, &ckpt.inr.imag] {
        put_u32(&mut out, layers.len());
        for l in layers {
            put_u32(&mut out, l.weight.shape()[0]);
            put_u32(&mut out, l.weight.shape()[1]);
            l.weight.data().iter().for_each(|&v| put_f64(&mut out, v));
            l.bias.data().iter().for_each(|&v| put_f64(&mut out, v));
        }
    }
    put_u32(&mut out, ckpt.poly.coils);
    put_u32(&mut out, ckpt.poly.order);
    ckpt.poly.coeffs.data().iter().for_each(|&v| put_f64(&mut out, v));
    write_file(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    if r.take(4)? != MAGIC {
        return Err(r.format_error(0, "not an IMJW checkpoint (bad magic)"));
    }
    let at = r.offset();
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.format_error(at, format!("unsupported version {version}")));
    }
    let d1 = r.u32()? as usize;
    let d2 = r.u32()? as usize;
    let at = r.offset();
    let activation = match r.u8()? {
        0 => Activation::Sine,
        1 => Activation::Relu,
        other => return Err(r.format_error(at, format!("unknown activation code {other}"))),
    };
    let bands = r.u32()? as usize;
    let w0 = r.f64()?;
    let mut branches = Vec::new();
    for _ in 0..2 {
        let at = r.offset();
        let count = r.u32()? as usize;
        if count < 2 {
            return Err(r.format_error(at, format!("branch needs at least 2 layers, got {count}")));
        }
        let mut layers: Vec<Layer<f64>> = Vec::with_capacity(count);
        for k in 0..count {
            let at = r.offset();
            let fan_out = r.u32()? as usize;
            let fan_in = r.u32()? as usize;
            let chained = layers.last().map(|l| l.bias.len() == fan_in).unwrap_or(true);
            if fan_out == 0 || fan_in == 0 || !chained || (k + 1 == count && fan_out != 1) {
                return Err(r.format_error(at, format!("inconsistent layer {k} dims {fan_out}×{fan_in}")));
            }
            let w = r.f64s(fan_out * fan_in)?;
            let b = r.f64s(fan_out)?;
            layers.push(Layer {
                weight: RealTensor::new(&[fan_out, fan_in], w)?,
                bias: RealTensor::new(&[fan_out], b)?,
            });
        }
        branches.push(layers);
    }
    let at = r.offset();
    let coils = r.u32()? as usize;
    let order = r.u32()? as usize;
    if coils == 0 {
        return Err(r.format_error(at, "zero coils"));
    }
    let k = monomial_count(order);
    let coeffs = r.f64s(coils * 2 * k)?;
    r.finish()?;
    let imag = branches.pop().unwrap();
    let real = branches.pop().unwrap();
    if real.iter().zip(&imag).any(|(a, b)| a.weight.shape() != b.weight.shape()) || real.len() != imag.len() {
        return Err(r.format_error(0, "real and imaginary branches differ in shape"));
    }
    let encoding_bands = (bands > 0).then_some(bands);
    if let Some(b) = encoding_bands {
        if real[0].weight.shape()[1] != 4 * b {
            return Err(r.format_error(0, "encoding bands do not match the input layer"));
        }
    }
    Ok(Checkpoint {
        d1,
        d2,
        inr: InrParameters {
            activation,
            w0,
            encoding_bands,
            real,
            imag,
        },
        poly: PolyCoefficients::new(coils, order, RealTensor::new(&[coils, 2, k], coeffs)?)?,
    })
}
