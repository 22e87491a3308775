use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst};
use rustfft::FftNum;

/// Floating-point element type usable on a [`Tape`](super::Tape).
///
/// Implemented for `f32` (training) and `f64` (gradient checks and
/// inference).
pub trait Real:
    FftNum + Float + FloatConst + Default + Debug + Display + LowerExp + Sum + 'static
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = A·B + beta·C` with arbitrary (row, column) strides.
    ///
    /// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`. Slices must cover every
    /// addressed element.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Elementwise `sin` and `cos` of `x` written into `sin` and `cos`.
    fn sin_cos_slice(x: &[Self], sin: &mut [Self], cos: &mut [Self]);
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

fn check_gemm_extents(
    m: usize,
    k: usize,
    n: usize,
    a: (usize, (isize, isize)),
    b: (usize, (isize, isize)),
    c: (usize, (isize, isize)),
) {
    assert!(a.1 .0 >= 0 && a.1 .1 >= 0 && b.1 .0 >= 0 && b.1 .1 >= 0 && c.1 .0 >= 0 && c.1 .1 >= 0);
    assert!(extent(m, k, a.1) <= a.0, "gemm: A out of bounds");
    assert!(extent(k, n, b.1) <= b.0, "gemm: B out of bounds");
    assert!(extent(m, n, c.1) <= c.0, "gemm: C out of bounds");
}

impl Real for f64 {
    const NAME: &'static str = "double";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        check_gemm_extents(
            m,
            k,
            n,
            (a.len(), a_strides),
            (b.len(), b_strides),
            (c.len(), c_strides),
        );
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above; strides are non-negative.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }

    fn sin_cos_slice(x: &[f64], sin: &mut [f64], cos: &mut [f64]) {
        for ((v, s), c) in x.iter().zip(sin.iter_mut()).zip(cos.iter_mut()) {
            let (sv, cv) = v.sin_cos();
            *s = sv;
            *c = cv;
        }
    }
}

impl Real for f32 {
    const NAME: &'static str = "single";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        check_gemm_extents(
            m,
            k,
            n,
            (a.len(), a_strides),
            (b.len(), b_strides),
            (c.len(), c_strides),
        );
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above; strides are non-negative.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }

    fn sin_cos_slice(x: &[f32], sin: &mut [f32], cos: &mut [f32]) {
        sin_cos_f32(x, sin, cos);
    }
}

// Cody-Waite split of pi; each head term has few enough significant bits
// that k·PI_A and k·PI_B are exact for the |k| < 2^12 handled here.
const PI_A: f32 = 3.140625;
const PI_B: f32 = 9.675025939941406e-4;
const PI_C: f32 = 1.5099067240953445e-7;
const PI_D: f32 = 5.126688136514179e-12;
const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
const FAST_RANGE: f32 = 4096.0;

/// Branch-free sine/cosine for `f32` slices.
///
/// Reduces by multiples of pi to [-pi/2, pi/2] and evaluates odd/even
/// Taylor polynomials (error below 6e-8 absolute). The loop body has no
/// data-dependent branches so it vectorizes; arguments outside
/// `±FAST_RANGE` fall back to libm. On x86-64 the kernel is compiled
/// for AVX-512 and AVX2 as well and picked at run time.
fn sin_cos_f32(x: &[f32], sin: &mut [f32], cos: &mut [f32]) {
    let n = x.len().min(sin.len()).min(cos.len());
    let (x, sin, cos) = (&x[..n], &mut sin[..n], &mut cos[..n]);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected above.
            unsafe { sin_cos_avx512(x, sin, cos) };
        } else if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: features detected above.
            unsafe { sin_cos_avx2(x, sin, cos) };
        } else {
            sin_cos_kernel(x, sin, cos);
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    sin_cos_kernel(x, sin, cos);

    if x.iter().any(|v| !(v.abs() < FAST_RANGE)) {
        for i in 0..n {
            if !(x[i].abs() < FAST_RANGE) {
                let (s, c) = x[i].sin_cos();
                sin[i] = s;
                cos[i] = c;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn sin_cos_avx512(x: &[f32], sin: &mut [f32], cos: &mut [f32]) {
    sin_cos_kernel(x, sin, cos)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sin_cos_avx2(x: &[f32], sin: &mut [f32], cos: &mut [f32]) {
    sin_cos_kernel(x, sin, cos)
}

#[inline(always)]
fn sin_cos_kernel(x: &[f32], sin: &mut [f32], cos: &mut [f32]) {
    const S3: f32 = -1.0 / 6.0;
    const S5: f32 = 1.0 / 120.0;
    const S7: f32 = -1.0 / 5040.0;
    const S9: f32 = 1.0 / 362_880.0;
    const S11: f32 = -1.0 / 39_916_800.0;
    const C2: f32 = -0.5;
    const C4: f32 = 1.0 / 24.0;
    const C6: f32 = -1.0 / 720.0;
    const C8: f32 = 1.0 / 40_320.0;
    const C10: f32 = -1.0 / 3_628_800.0;
    const C12: f32 = 1.0 / 479_001_600.0;

    for ((v, s_out), c_out) in x.iter().zip(sin.iter_mut()).zip(cos.iter_mut()) {
        let v = *v;
        // The low mantissa bit of the shifted value is the parity of k.
        let shifted = v * std::f32::consts::FRAC_1_PI + ROUND_MAGIC;
        let k = shifted - ROUND_MAGIC;
        let r = ((v - k * PI_A) - k * PI_B) - k * PI_C - k * PI_D;
        let r2 = r * r;
        let s = r + r * r2 * (S3 + r2 * (S5 + r2 * (S7 + r2 * (S9 + r2 * S11))));
        let c = 1.0 + r2 * (C2 + r2 * (C4 + r2 * (C6 + r2 * (C8 + r2 * (C10 + r2 * C12)))));
        let flip = (shifted.to_bits() & 1) << 31;
        *s_out = f32::from_bits(s.to_bits() ^ flip);
        *c_out = f32::from_bits(c.to_bits() ^ flip);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_sin_cos_matches_libm() {
        let xs: Vec<f32> = (-40_000..40_000).map(|i| i as f32 * 1.3e-3).collect();
        let mut s = vec![0.0; xs.len()];
        let mut c = vec![0.0; xs.len()];
        f32::sin_cos_slice(&xs, &mut s, &mut c);
        for ((x, s), c) in xs.iter().zip(&s).zip(&c) {
            let (rs, rc) = (*x as f64).sin_cos();
            assert!((*s as f64 - rs).abs() < 4e-7, "sin({x})");
            assert!((*c as f64 - rc).abs() < 4e-7, "cos({x})");
        }
    }

    #[test]
    fn fast_sin_cos_falls_back_for_huge_and_nan() {
        let xs = [1.0e6f32, -7.5e5, f32::NAN, 0.0];
        let mut s = [0.0; 4];
        let mut c = [0.0; 4];
        f32::sin_cos_slice(&xs, &mut s, &mut c);
        assert_eq!(s[0], 1.0e6f32.sin());
        assert_eq!(c[1], (-7.5e5f32).cos());
        assert!(s[2].is_nan() && c[2].is_nan());
        assert_eq!((s[3], c[3]), (0.0, 1.0));
    }

    #[test]
    fn gemm_strided_transpose() {
        // A = [[1,2],[3,4]], B = A^T via strides.
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, (2, 1), &a, (1, 2), 0.0, &mut c, (2, 1));
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }
}
