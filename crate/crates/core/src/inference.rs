//! Post-training pipeline: full k-space prediction, k-space consistency,
//! per-coil inverse FFT, adaptive coil combination and dense querying.

use num_complex::Complex64;

use crate::coilmodel::{build_basis, evaluate_maps};
use crate::coords::{make_dense_grid, make_grid};
use crate::error::{Error, Result};
use crate::image::{ComplexImage, SensitivityMaps};
use crate::inr_model::{evaluate, Checkpoint, InrParameters};
use crate::mrop::{coil_kspace, kspace_consistency, KSpaceVolume};
use crate::tensorgrad::fft::Fft2;

/// Side of the square window over which coil covariances are averaged.
pub const COMBINE_WINDOW: usize = 5;
/// Power iterations per pixel for the dominant eigenvector.
pub const POWER_ITERATIONS: usize = 10;

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub combined: ComplexImage,
    pub coil_images: Vec<ComplexImage>,
    pub sens_maps: SensitivityMaps,
    pub network_image: ComplexImage,
    /// Predicted k-space with measured lines substituted when consistency
    /// is enforced.
    pub composite: KSpaceVolume,
}

/// The network image on the training grid, in double precision.
pub fn network_image(inr: &InrParameters<f64>, d1: usize, d2: usize) -> Result<ComplexImage> {
    let grid = make_grid(d1, d2)?;
    let (re, im) = evaluate(inr, &grid)?;
    ComplexImage::from_parts(d1, d2, &re, &im)
}

/// Runs the inference branch on a trained model. With `use_kc` the
/// measured lines replace the prediction before the inverse FFT.
pub fn reconstruct(model: &Checkpoint, measured: &KSpaceVolume, use_kc: bool) -> Result<ReconResult> {
    if (model.d1, model.d2) != (measured.d1, measured.d2) {
        return Err(Error::shape(
            "reconstruction",
            &[measured.d1, measured.d2],
            &[model.d1, model.d2],
        ));
    }
    if model.poly.coils != measured.coils {
        return Err(Error::invalid(format!(
            "model has {} coils, measurement has {}",
            model.poly.coils, measured.coils
        )));
    }
    let (d1, d2) = (model.d1, model.d2);
    let image = network_image(&model.inr, d1, d2)?;
    let sens_maps = evaluate_maps(&model.poly, &build_basis(&make_grid(d1, d2)?, model.poly.order))?;
    let predicted = KSpaceVolume {
        coils: measured.coils,
        d1,
        d2,
        data: coil_kspace(&image, &sens_maps)?,
        mask: measured.mask.clone(),
    };
    let composite = if use_kc {
        kspace_consistency(&predicted, measured)?
    } else {
        predicted
    };
    let coil_images = inverse_per_coil(&composite);
    let combined = coil_combine(&coil_images)?;
    Ok(ReconResult {
        combined,
        coil_images,
        sens_maps,
        network_image: image,
        composite,
    })
}

/// `F⁻¹` of every coil of `kspace`, without masking.
pub fn inverse_per_coil(kspace: &KSpaceVolume) -> Vec<ComplexImage> {
    let plan = Fft2::<f64>::plan(kspace.d1, kspace.d2);
    (0..kspace.coils)
        .map(|j| {
            let mut data = kspace.coil(j).to_vec();
            plan.process(&mut data, true);
            ComplexImage {
                d1: kspace.d1,
                d2: kspace.d2,
                data,
            }
        })
        .collect()
}

/// Walsh adaptive combination. Each pixel's coil vector is projected on the
/// dominant eigenvector of the coil covariance summed over a 5×5
/// replicate-padded window. The eigenvector comes from power iteration
/// started at the first basis vector and is phased so that its first
/// nonzero entry is real and positive.
pub fn coil_combine(coils: &[ComplexImage]) -> Result<ComplexImage> {
    let first = coils.first().ok_or_else(|| Error::invalid("coil combination needs at least one coil"))?;
    let (d1, d2) = (first.d1, first.d2);
    if let Some(bad) = coils.iter().find(|c| (c.d1, c.d2) != (d1, d2)) {
        return Err(Error::shape("coil images", &[d1, d2], &[bad.d1, bad.d2]));
    }
    let c = coils.len();
    let p = d1 * d2;
    let vector = |k: usize| -> Vec<Complex64> { coils.iter().map(|img| img.data[k]).collect() };

    // Per-pixel outer products v·vᴴ, then window sums along each axis.
    let mut cov = vec![Complex64::new(0.0, 0.0); p * c * c];
    for k in 0..p {
        let v = vector(k);
        let block = &mut cov[k * c * c..(k + 1) * c * c];
        for a in 0..c {
            for b in 0..c {
                block[a * c + b] = v[a] * v[b].conj();
            }
        }
    }
    let cov = window_sum(&window_sum(&cov, d1, d2, c * c, true), d1, d2, c * c, false);

    let mut out = ComplexImage::zeros(d1, d2);
    for k in 0..p {
        let r = &cov[k * c * c..(k + 1) * c * c];
        if let Some(u) = dominant_eigenvector(r, c) {
            let v = vector(k);
            out.data[k] = u.iter().zip(&v).map(|(ui, vi)| ui.conj() * vi).sum();
        }
    }
    Ok(out)
}

/// Sums `width`-long pixel blocks over the window along one axis, clamping
/// indices at the border.
fn window_sum(data: &[Complex64], d1: usize, d2: usize, width: usize, along_rows: bool) -> Vec<Complex64> {
    let half = (COMBINE_WINDOW / 2) as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for i in 0..d1 {
        for j in 0..d2 {
            let dst = (i * d2 + j) * width;
            for off in -half..=half {
                let (si, sj) = if along_rows {
                    ((i as isize + off).clamp(0, d1 as isize - 1) as usize, j)
                } else {
                    (i, (j as isize + off).clamp(0, d2 as isize - 1) as usize)
                };
                let src = (si * d2 + sj) * width;
                for e in 0..width {
                    out[dst + e] += data[src + e];
                }
            }
        }
    }
    out
}

fn mat_vec(r: &[Complex64], c: usize, u: &[Complex64]) -> Vec<Complex64> {
    (0..c).map(|a| (0..c).map(|b| r[a * c + b] * u[b]).sum()).collect()
}

fn norm(u: &[Complex64]) -> f64 {
    u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Unit dominant eigenvector of the Hermitian `c×c` matrix `r`, or `None`
/// when `r` is zero. If the first basis vector lies in the null space, the
/// iteration restarts from the basis vector of the largest diagonal entry.
fn dominant_eigenvector(r: &[Complex64], c: usize) -> Option<Vec<Complex64>> {
    let trace: f64 = (0..c).map(|a| r[a * c + a].re).sum();
    if !(trace > 0.0) {
        return None;
    }
    let basis = |i: usize| {
        let mut e = vec![Complex64::new(0.0, 0.0); c];
        e[i] = Complex64::new(1.0, 0.0);
        e
    };
    let mut u = basis(0);
    if norm(&mat_vec(r, c, &u)) == 0.0 {
        let largest = (0..c)
            .max_by(|&a, &b| r[a * c + a].re.total_cmp(&r[b * c + b].re))
            .unwrap();
        u = basis(largest);
    }
    for _ in 0..POWER_ITERATIONS {
        let w = mat_vec(r, c, &u);
        let n = norm(&w);
        if n == 0.0 {
            return None;
        }
        u = w.into_iter().map(|z| z / n).collect();
    }
    let tiny = 1e-12 * norm(&u);
    if let Some(lead) = u.iter().find(|z| z.norm() > tiny).copied() {
        let phase = lead.conj() / lead.norm();
        for z in &mut u {
            *z *= phase;
        }
    }
    Some(u)
}

/// The network sampled on a `scale`-times denser grid over the same field
/// of view. No k-space consistency is applied.
pub fn query_upsampled(inr: &InrParameters<f64>, scale: usize, d1: usize, d2: usize) -> Result<ComplexImage> {
    let grid = make_dense_grid(d1, d2, scale)?;
    let (re, im) = evaluate(inr, &grid)?;
    ComplexImage::from_parts(grid.d1(), grid.d2(), &re, &im)
}
