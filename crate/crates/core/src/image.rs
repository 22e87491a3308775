//! Concrete complex-valued images and coil sensitivity maps.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Row-major `d1×d2` complex image.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub d1: usize,
    pub d2: usize,
    pub data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(d1: usize, d2: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != d1 * d2 {
            return Err(Error::shape("complex image", &[d1 * d2], &[data.len()]));
        }
        Ok(Self { d1, d2, data })
    }

    pub fn zeros(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            data: vec![Complex64::new(0.0, 0.0); d1 * d2],
        }
    }

    /// Real image with zero imaginary part.
    pub fn from_real(d1: usize, d2: usize, re: &[f64]) -> Result<Self> {
        Self::new(d1, d2, re.iter().map(|&r| Complex64::new(r, 0.0)).collect())
    }

    pub fn from_parts(d1: usize, d2: usize, re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape("complex image parts", &[re.len()], &[im.len()]));
        }
        Self::new(d1, d2, re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect())
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.arg()).collect()
    }

    pub fn re(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.im).collect()
    }
}

/// Evaluated sensitivities of `coils` coils, coil-major, each `d1×d2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    pub coils: usize,
    pub d1: usize,
    pub d2: usize,
    pub data: Vec<Complex64>,
}

impl SensitivityMaps {
    pub fn new(coils: usize, d1: usize, d2: usize, data: Vec<Complex64>) -> Result<Self> {
        if coils == 0 || data.len() != coils * d1 * d2 {
            return Err(Error::shape("sensitivity maps", &[coils, d1, d2], &[data.len()]));
        }
        Ok(Self { coils, d1, d2, data })
    }

    /// Every coil equal to one.
    pub fn ones(coils: usize, d1: usize, d2: usize) -> Self {
        Self {
            coils,
            d1,
            d2,
            data: vec![Complex64::new(1.0, 0.0); coils * d1 * d2],
        }
    }

    pub fn coil(&self, j: usize) -> &[Complex64] {
        let p = self.d1 * self.d2;
        &self.data[j * p..(j + 1) * p]
    }

    pub fn coil_image(&self, j: usize) -> ComplexImage {
        ComplexImage {
            d1: self.d1,
            d2: self.d2,
            data: self.coil(j).to_vec(),
        }
    }
}
