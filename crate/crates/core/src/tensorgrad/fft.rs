//! Unitary 2D FFT over the last two axes of row-major complex data.
//!
//! DC sits at index (0, 0). Both directions are scaled by `1/sqrt(d1·d2)`,
//! so the inverse transform is the adjoint of the forward one.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Real;

/// Planned transforms for one `(d1, d2)` plane size.
pub struct Fft2<T: Real> {
    d1: usize,
    d2: usize,
    rows_fwd: Arc<dyn Fft<T>>,
    rows_inv: Arc<dyn Fft<T>>,
    cols_fwd: Arc<dyn Fft<T>>,
    cols_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> Fft2<T> {
    pub fn new(planner: &mut FftPlanner<T>, d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            rows_fwd: planner.plan_fft_forward(d2),
            rows_inv: planner.plan_fft_inverse(d2),
            cols_fwd: planner.plan_fft_forward(d1),
            cols_inv: planner.plan_fft_inverse(d1),
            scale: T::one() / T::lit((d1 * d2) as f64).sqrt(),
        }
    }

    pub fn plan(d1: usize, d2: usize) -> Self {
        Self::new(&mut FftPlanner::new(), d1, d2)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    /// Transforms every `d1×d2` plane of `data` in place.
    ///
    /// # Panics
    /// If `data.len()` is not a multiple of `d1·d2`.
    pub fn process(&self, data: &mut [Complex<T>], inverse: bool) {
        let plane = self.d1 * self.d2;
        assert!(plane > 0 && data.len() % plane == 0, "fft2: buffer is not whole planes");
        let (rows, cols) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows_fwd, &self.cols_fwd)
        };
        rows.process(data);
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); plane];
        for p in data.chunks_exact_mut(plane) {
            transpose(p, &mut scratch, self.d1, self.d2);
            cols.process(&mut scratch);
            transpose(&scratch, p, self.d2, self.d1);
        }
        for v in data.iter_mut() {
            *v = *v * self.scale;
        }
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Packs separate real and imaginary planes into complex values.
pub fn pack<T: Real>(re: &[T], im: &[T]) -> Vec<Complex<T>> {
    re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect()
}

/// Splits complex values into `[re..., im...]`.
pub fn unpack<T: Real>(z: &[Complex<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * z.len());
    out.extend(z.iter().map(|v| v.re));
    out.extend(z.iter().map(|v| v.im));
    out
}
