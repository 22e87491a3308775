//! Normalized pixel-coordinate grids and the positional encoding used by
//! the ReLU+PE ablation network.

use crate::error::{Error, Result};
use crate::tensorgrad::{Real, RealTensor};

/// Pixel centres mapped to `[-1, 1]²`, one row per pixel in row-major
/// order: row `k` is pixel `(k / d2, k % d2)` with `x` along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    d1: usize,
    d2: usize,
    coords: Vec<[f64; 2]>,
}

fn axis(n: usize) -> Vec<f64> {
    let step = 2.0 / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { 1.0 } else { -1.0 + i as f64 * step })
        .collect()
}

impl CoordinateGrid {
    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Pixel index `(k1, k2)` of grid row `k`.
    pub fn pixel(&self, row: usize) -> (usize, usize) {
        (row / self.d2, row % self.d2)
    }

    /// The coordinates as a `[d1·d2, 2]` tensor.
    pub fn to_tensor<T: Real>(&self) -> RealTensor<T> {
        let data = self.coords.iter().flat_map(|c| [T::lit(c[0]), T::lit(c[1])]).collect();
        RealTensor::new(&[self.coords.len(), 2], data).expect("grid tensor shape")
    }
}

/// Grid with spacing `2/(d1-1)` along x and `2/(d2-1)` along y.
pub fn make_grid(d1: usize, d2: usize) -> Result<CoordinateGrid> {
    if d1 < 2 || d2 < 2 {
        return Err(Error::invalid(format!(
            "coordinate grid needs at least 2 samples per axis, got {d1}×{d2}"
        )));
    }
    let (xs, ys) = (axis(d1), axis(d2));
    let coords = xs.iter().flat_map(|&x| ys.iter().map(move |&y| [x, y])).collect();
    Ok(CoordinateGrid { d1, d2, coords })
}

/// `scale·d1 × scale·d2` samples spanning the same `[-1, 1]²` box.
pub fn make_dense_grid(d1: usize, d2: usize, scale: usize) -> Result<CoordinateGrid> {
    if scale < 1 {
        return Err(Error::invalid("upsampling scale must be at least 1"));
    }
    make_grid(d1 * scale, d2 * scale)
}

/// Sinusoidal features `[sin(2^l·π·v), cos(2^l·π·v)]` for `l < bands`,
/// first for x then for y, giving a `[rows, 4·bands]` tensor.
pub fn positional_encode<T: Real>(grid: &CoordinateGrid, bands: usize) -> Result<RealTensor<T>> {
    if bands < 1 {
        return Err(Error::invalid("positional encoding needs at least one band"));
    }
    let width = 4 * bands;
    let mut data = Vec::with_capacity(grid.len() * width);
    for c in grid.coords() {
        for v in c {
            for l in 0..bands {
                let arg = (1u64 << l) as f64 * std::f64::consts::PI * v;
                data.push(T::lit(arg.sin()));
                data.push(T::lit(arg.cos()));
            }
        }
    }
    RealTensor::new(&[grid.len(), width], data)
}
