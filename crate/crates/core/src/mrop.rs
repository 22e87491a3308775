//! The acquisition model `S_j = M·F(C_j·I)`: coil weighting, unitary 2D
//! FFT and line sampling, with its adjoint and the k-space replacement
//! used at inference.
//!
//! k-space arrays are stored with DC at index `(0, 0)`. Sampling masks name
//! their lines in centered order, where DC sits at `⌊d2/2⌋`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::image::{ComplexImage, SensitivityMaps};
use crate::tensorgrad::fft::Fft2;
use crate::tensorgrad::{ComplexNode, Real, Tape};

/// Centered line index to FFT-order index along an axis of length `d`.
pub fn centered_to_fft(c: usize, d: usize) -> usize {
    (c + d - d / 2) % d
}

/// FFT-order index to centered line index along an axis of length `d`.
pub fn fft_to_centered(f: usize, d: usize) -> usize {
    (f + d / 2) % d
}

/// Phase-encode lines kept along the second axis; every kept line is
/// sampled across the whole first axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    d1: usize,
    d2: usize,
    /// Centered indices, sorted and unique.
    kept_lines: Vec<usize>,
}

impl SamplingMask {
    pub fn new(d1: usize, d2: usize, mut lines: Vec<usize>) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return Err(Error::invalid(format!("mask dimensions must be positive, got {d1}×{d2}")));
        }
        lines.sort_unstable();
        lines.dedup();
        if let Some(&bad) = lines.iter().find(|&&l| l >= d2) {
            return Err(Error::invalid(format!("line {bad} outside 0..{d2}")));
        }
        Ok(Self {
            d1,
            d2,
            kept_lines: lines,
        })
    }

    pub fn full(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            kept_lines: (0..d2).collect(),
        }
    }

    pub fn empty(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            kept_lines: Vec::new(),
        }
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    /// Kept lines in centered order.
    pub fn kept_lines(&self) -> &[usize] {
        &self.kept_lines
    }

    pub fn kept_count(&self) -> usize {
        self.kept_lines.len()
    }

    /// Per-column keep flags in FFT order.
    pub fn keep_fft(&self) -> Vec<bool> {
        let mut keep = vec![false; self.d2];
        for &c in &self.kept_lines {
            keep[centered_to_fft(c, self.d2)] = true;
        }
        keep
    }

    /// The mask as a `d1×d2` 0/1 matrix in centered order.
    pub fn to_matrix(&self) -> Vec<u8> {
        let mut row = vec![0u8; self.d2];
        for &c in &self.kept_lines {
            row[c] = 1;
        }
        row.repeat(self.d1)
    }

    /// Zeroes unkept columns of every `d1×d2` plane in `data` (FFT order).
    pub fn apply(&self, data: &mut [Complex64]) {
        let keep = self.keep_fft();
        for row in data.chunks_exact_mut(self.d2) {
            for (v, k) in row.iter_mut().zip(&keep) {
                if !k {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
        }
    }
}

/// Multi-coil k-space, coil-major, each plane `d1×d2` in FFT order.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceVolume {
    pub coils: usize,
    pub d1: usize,
    pub d2: usize,
    pub data: Vec<Complex64>,
    pub mask: SamplingMask,
}

impl KSpaceVolume {
    pub fn new(coils: usize, data: Vec<Complex64>, mask: SamplingMask) -> Result<Self> {
        let (d1, d2) = (mask.d1(), mask.d2());
        if coils == 0 || data.len() != coils * d1 * d2 {
            return Err(Error::shape("k-space volume", &[coils, d1, d2], &[data.len()]));
        }
        Ok(Self {
            coils,
            d1,
            d2,
            data,
            mask,
        })
    }

    pub fn coil(&self, j: usize) -> &[Complex64] {
        let p = self.d1 * self.d2;
        &self.data[j * p..(j + 1) * p]
    }

    /// True when every unkept entry is exactly zero.
    pub fn respects_mask(&self) -> bool {
        let keep = self.mask.keep_fft();
        self.data
            .chunks_exact(self.d2)
            .all(|row| row.iter().zip(&keep).all(|(v, k)| *k || *v == Complex64::new(0.0, 0.0)))
    }
}

/// Records `M·F(C_j·I)` for every coil. Outputs are `d1×d2` pairs in FFT
/// order, zero on unkept lines.
pub fn forward_model<T: Real>(
    image: ComplexNode,
    sens: &[ComplexNode],
    mask: &SamplingMask,
    tape: &mut Tape<T>,
) -> Result<Vec<ComplexNode>> {
    if sens.is_empty() {
        return Err(Error::invalid("forward model needs at least one coil"));
    }
    let want = [mask.d1(), mask.d2()];
    for node in [image].iter().chain(sens) {
        for id in [node.re, node.im] {
            if tape.shape(id) != want {
                return Err(Error::shape("forward model", &want, tape.shape(id)));
            }
        }
    }
    let keep: Arc<[bool]> = mask.keep_fft().into();
    let mut out = Vec::with_capacity(sens.len());
    for &c in sens {
        let weighted = tape.complex_mul(c, image)?;
        let k = tape.fft2(weighted, false)?;
        out.push(ComplexNode {
            re: tape.mask_select(k.re, keep.clone())?,
            im: tape.mask_select(k.im, keep.clone())?,
        });
    }
    Ok(out)
}

fn check_maps(image: (usize, usize), maps: &SensitivityMaps) -> Result<()> {
    if (maps.d1, maps.d2) != image {
        return Err(Error::shape("sensitivity maps", &[image.0, image.1], &[maps.d1, maps.d2]));
    }
    Ok(())
}

/// Unmasked coil k-space `F(C_j·I)` for every coil.
pub fn coil_kspace(image: &ComplexImage, maps: &SensitivityMaps) -> Result<Vec<Complex64>> {
    check_maps((image.d1, image.d2), maps)?;
    let plan = Fft2::<f64>::plan(image.d1, image.d2);
    let mut data = Vec::with_capacity(maps.data.len());
    for j in 0..maps.coils {
        data.extend(maps.coil(j).iter().zip(&image.data).map(|(c, i)| c * i));
    }
    plan.process(&mut data, false);
    Ok(data)
}

/// Concrete `M·F(C_j·I)`.
pub fn apply_forward(image: &ComplexImage, maps: &SensitivityMaps, mask: &SamplingMask) -> Result<KSpaceVolume> {
    if (mask.d1(), mask.d2()) != (image.d1, image.d2) {
        return Err(Error::shape("mask", &[image.d1, image.d2], &[mask.d1(), mask.d2()]));
    }
    let mut data = coil_kspace(image, maps)?;
    mask.apply(&mut data);
    KSpaceVolume::new(maps.coils, data, mask.clone())
}

/// `Σ_j conj(C_j)·F⁻¹(M·S_j)`.
pub fn adjoint_model(kspace: &KSpaceVolume, maps: &SensitivityMaps) -> Result<ComplexImage> {
    check_maps((kspace.d1, kspace.d2), maps)?;
    if maps.coils != kspace.coils {
        return Err(Error::invalid(format!(
            "{} sensitivity maps for {} coils",
            maps.coils, kspace.coils
        )));
    }
    let mut data = kspace.data.clone();
    kspace.mask.apply(&mut data);
    Fft2::<f64>::plan(kspace.d1, kspace.d2).process(&mut data, true);
    let p = kspace.d1 * kspace.d2;
    let mut out = ComplexImage::zeros(kspace.d1, kspace.d2);
    for j in 0..kspace.coils {
        for ((o, c), v) in out.data.iter_mut().zip(maps.coil(j)).zip(&data[j * p..(j + 1) * p]) {
            *o += c.conj() * v;
        }
    }
    Ok(out)
}

/// Measured values on kept lines, predicted values elsewhere.
pub fn kspace_consistency(predicted: &KSpaceVolume, measured: &KSpaceVolume) -> Result<KSpaceVolume> {
    if predicted.mask != measured.mask {
        return Err(Error::invalid("predicted and measured k-space use different masks"));
    }
    if predicted.coils != measured.coils {
        return Err(Error::invalid(format!(
            "predicted k-space has {} coils, measured has {}",
            predicted.coils, measured.coils
        )));
    }
    let keep = measured.mask.keep_fft();
    let mut out = predicted.clone();
    for (row, meas) in out.data.chunks_exact_mut(out.d2).zip(measured.data.chunks_exact(measured.d2)) {
        for ((v, m), k) in row.iter_mut().zip(meas).zip(&keep) {
            if *k {
                *v = *m;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_image(rng: &mut ChaCha8Rng, d1: usize, d2: usize) -> ComplexImage {
        let data = (0..d1 * d2)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexImage::new(d1, d2, data).unwrap()
    }

    fn random_maps(rng: &mut ChaCha8Rng, c: usize, d1: usize, d2: usize) -> SensitivityMaps {
        let data = (0..c * d1 * d2)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        SensitivityMaps::new(c, d1, d2, data).unwrap()
    }

    #[test]
    fn index_conversion() {
        // Even length: DC is centered index 4 and FFT index 0.
        assert_eq!(centered_to_fft(4, 8), 0);
        assert_eq!(centered_to_fft(0, 8), 4);
        assert_eq!(centered_to_fft(7, 8), 3);
        // Odd length: DC is centered index 2.
        assert_eq!(centered_to_fft(2, 5), 0);
        assert_eq!(centered_to_fft(0, 5), 3);
        for d in 1..40 {
            for c in 0..d {
                assert_eq!(fft_to_centered(centered_to_fft(c, d), d), c);
            }
        }
    }

    #[test]
    fn unit_maps_full_mask_is_plain_fft() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 6, 5);
        let k = apply_forward(&img, &SensitivityMaps::ones(1, 6, 5), &SamplingMask::full(6, 5)).unwrap();
        let mut want = img.data.clone();
        Fft2::<f64>::plan(6, 5).process(&mut want, false);
        assert_eq!(k.data, want);

        let zero = apply_forward(&ComplexImage::zeros(6, 5), &random_maps(&mut rng, 2, 6, 5), &SamplingMask::full(6, 5)).unwrap();
        assert!(zero.data.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn one_line_matches_direct_dft() {
        let (d1, d2) = (6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, d1, d2);
        let maps = random_maps(&mut rng, 1, d1, d2);
        let line = 5;
        let mask = SamplingMask::new(d1, d2, vec![line]).unwrap();
        let k = apply_forward(&img, &maps, &mask).unwrap();
        let f = centered_to_fft(line, d2);
        let scale = 1.0 / ((d1 * d2) as f64).sqrt();
        for u in 0..d1 {
            for v in 0..d2 {
                let got = k.data[u * d2 + v];
                if v != f {
                    assert_eq!(got, Complex64::new(0.0, 0.0));
                    continue;
                }
                let mut want = Complex64::new(0.0, 0.0);
                for a in 0..d1 {
                    for b in 0..d2 {
                        let ang = -2.0 * PI * ((u * a) as f64 / d1 as f64 + (v * b) as f64 / d2 as f64);
                        want += maps.data[a * d2 + b] * img.data[a * d2 + b] * Complex64::from_polar(1.0, ang);
                    }
                }
                assert!((got - want * scale).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn recorded_and_concrete_forward_agree() {
        let (d1, d2) = (8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, d1, d2);
        let maps = random_maps(&mut rng, 3, d1, d2);
        let mask = SamplingMask::new(d1, d2, vec![0, 2, 3]).unwrap();
        let mut tape = Tape::<f64>::new();
        let plane = |tape: &mut Tape<f64>, v: Vec<f64>| tape.constant(crate::tensorgrad::RealTensor::new(&[d1, d2], v).unwrap());
        let inode = ComplexNode {
            re: plane(&mut tape, img.re()),
            im: plane(&mut tape, img.im()),
        };
        let snodes: Vec<ComplexNode> = (0..3)
            .map(|j| {
                let c = maps.coil_image(j);
                ComplexNode {
                    re: plane(&mut tape, c.re()),
                    im: plane(&mut tape, c.im()),
                }
            })
            .collect();
        let pred = forward_model(inode, &snodes, &mask, &mut tape).unwrap();
        let concrete = apply_forward(&img, &maps, &mask).unwrap();
        for (j, p) in pred.iter().enumerate() {
            let re = tape.value(p.re).data();
            let im = tape.value(p.im).data();
            for (k, z) in concrete.coil(j).iter().enumerate() {
                assert!((z.re - re[k]).abs() < 1e-14 && (z.im - im[k]).abs() < 1e-14);
            }
        }
        assert!(forward_model(inode, &[], &mask, &mut tape).is_err());
        assert!(forward_model(inode, &snodes, &SamplingMask::full(4, 4), &mut tape).is_err());
    }

    #[test]
    fn adjoint_identity_on_64x64_four_coils() {
        let (d1, d2, c) = (64, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, d1, d2);
        let maps = random_maps(&mut rng, c, d1, d2);
        let lines: Vec<usize> = (0..d2).filter(|l| l % 3 == 0).collect();
        let mask = SamplingMask::new(d1, d2, lines).unwrap();
        let ex = apply_forward(&x, &maps, &mask).unwrap();
        let ydata = (0..c * d1 * d2)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let y = KSpaceVolume::new(c, ydata, mask).unwrap();
        let ehy = adjoint_model(&y, &maps).unwrap();
        let lhs: Complex64 = ex.data.iter().zip(&y.data).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex64 = x.data.iter().zip(&ehy.data).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() <= 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn adjoint_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Complex64> = random_image(&mut rng, 4, 6).data;
        let k = KSpaceVolume::new(1, data.clone(), SamplingMask::full(4, 6)).unwrap();
        let img = adjoint_model(&k, &SensitivityMaps::ones(1, 4, 6)).unwrap();
        let mut want = data;
        Fft2::<f64>::plan(4, 6).process(&mut want, true);
        assert_eq!(img.data, want);

        let zero = KSpaceVolume::new(2, vec![Complex64::new(0.0, 0.0); 48], SamplingMask::full(4, 6)).unwrap();
        let img = adjoint_model(&zero, &random_maps(&mut rng, 2, 4, 6)).unwrap();
        assert!(img.data.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn consistency_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d1, d2) = (4, 8);
        let vol = |rng: &mut ChaCha8Rng, mask: &SamplingMask| {
            let mut d = random_image(rng, d1, d2).data;
            mask.apply(&mut d);
            KSpaceVolume::new(1, d, mask.clone()).unwrap()
        };
        let mask = SamplingMask::new(d1, d2, vec![1, 4, 5]).unwrap();
        let measured = vol(&mut rng, &mask);
        let predicted = KSpaceVolume::new(1, random_image(&mut rng, d1, d2).data, mask.clone()).unwrap();
        let out = kspace_consistency(&predicted, &measured).unwrap();
        let keep = mask.keep_fft();
        for (k, v) in out.data.iter().enumerate() {
            let want = if keep[k % d2] { measured.data[k] } else { predicted.data[k] };
            assert_eq!(v.re.to_bits(), want.re.to_bits());
            assert_eq!(v.im.to_bits(), want.im.to_bits());
        }
        assert_eq!(kspace_consistency(&out, &measured).unwrap(), out);
        assert_eq!(kspace_consistency(&measured, &measured).unwrap(), measured);

        let full = SamplingMask::full(d1, d2);
        let m = vol(&mut rng, &full);
        let p = KSpaceVolume::new(1, random_image(&mut rng, d1, d2).data, full).unwrap();
        assert_eq!(kspace_consistency(&p, &m).unwrap().data, m.data);

        let empty = SamplingMask::empty(d1, d2);
        let m = vol(&mut rng, &empty);
        let p = KSpaceVolume::new(1, random_image(&mut rng, d1, d2).data, empty).unwrap();
        assert_eq!(kspace_consistency(&p, &m).unwrap().data, p.data);

        assert!(kspace_consistency(&p, &measured).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(SamplingMask::new(4, 4, vec![4]).is_err());
        let m = SamplingMask::new(2, 4, vec![3, 1, 3]).unwrap();
        assert_eq!(m.kept_lines(), &[1, 3]);
        assert_eq!(m.to_matrix(), vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    proptest! {
        #[test]
        fn fft_is_unitary(d1 in 2usize..20, d2 in 2usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(&mut rng, d1, d2);
            let mut y = x.data.clone();
            Fft2::<f64>::plan(d1, d2).process(&mut y, false);
            let nx: f64 = x.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!((nx - ny).abs() <= 1e-12 * nx);
        }

        #[test]
        fn mask_projection_is_idempotent(d2 in 1usize..30, bits in proptest::collection::vec(any::<bool>(), 30), seed in 0u64..100) {
            let lines: Vec<usize> = (0..d2).filter(|&l| bits[l]).collect();
            let mask = SamplingMask::new(3, d2, lines).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut once = random_image(&mut rng, 3, d2).data;
            mask.apply(&mut once);
            let mut twice = once.clone();
            mask.apply(&mut twice);
            prop_assert_eq!(once, twice);
        }
    }
}
