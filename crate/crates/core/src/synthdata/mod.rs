//! Synthetic test data: an ellipse phantom with smooth phase, simulated
//! coil sensitivities, Cartesian line masks and noisy acquisition.

mod kspc;

pub use kspc::{read_kspc, write_kspc};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coords::make_grid;
use crate::error::{Error, Result};
use crate::image::{ComplexImage, SensitivityMaps};
use crate::mrop::{apply_forward, KSpaceVolume, SamplingMask};
use crate::tensorgrad::fft::Fft2;

/// One ellipse of the phantom. Centers and semi-axes are in the `[-1, 1]²`
/// field of view with `u` pointing right (along the second image axis) and
/// `v` pointing up (against the first). The angle is in degrees,
/// counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (du, dv) = (u - self.center[0], v - self.center[1]);
        let a = (du * c + dv * s) / self.axes[0];
        let b = (dv * c - du * s) / self.axes[1];
        a * a + b * b <= 1.0
    }
}

/// The modified Shepp-Logan head: `(intensity, a, b, u0, v0, angle)`.
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

pub fn shepp_logan() -> Vec<Ellipse> {
    SHEPP_LOGAN
        .iter()
        .map(|r| Ellipse {
            center: [r[3], r[4]],
            axes: [r[1], r[2]],
            angle: r[5],
            intensity: r[0],
        })
        .collect()
}

/// Either a named ellipse set or an explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EllipseSet {
    Named(String),
    List(Vec<Ellipse>),
}

impl EllipseSet {
    pub fn resolve(&self) -> Result<Vec<Ellipse>> {
        match self {
            EllipseSet::Named(name) if name == "shepp-logan" => Ok(shepp_logan()),
            EllipseSet::Named(name) => Err(Error::invalid(format!("unknown ellipse set `{name}`"))),
            EllipseSet::List(list) => Ok(list.clone()),
        }
    }
}

/// Phase term `coef · x^p · y^q` in grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTerm {
    pub p: u32,
    pub q: u32,
    pub coef: f64,
}

fn default_phase() -> Vec<PhaseTerm> {
    vec![
        PhaseTerm { p: 1, q: 0, coef: 0.6 },
        PhaseTerm { p: 0, q: 1, coef: -0.4 },
        PhaseTerm { p: 1, q: 1, coef: 0.3 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub d1: usize,
    pub d2: usize,
    pub ellipses: EllipseSet,
    #[serde(default = "default_phase")]
    pub phase: Vec<PhaseTerm>,
    /// Per-component k-space noise standard deviation.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn shepp_logan(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            ellipses: EllipseSet::Named("shepp-logan".into()),
            phase: default_phase(),
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 < 2 || self.d2 < 2 {
            return Err(Error::invalid(format!("phantom needs at least 2×2 pixels, got {}×{}", self.d1, self.d2)));
        }
        for e in self.ellipses.resolve()? {
            if !(e.axes[0] > 0.0 && e.axes[1] > 0.0) {
                return Err(Error::invalid(format!("ellipse axes must be positive, got {:?}", e.axes)));
            }
            if !e.intensity.is_finite() || !e.angle.is_finite() || !e.center.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid("ellipse parameters must be finite"));
            }
        }
        if !self.phase.iter().all(|t| t.coef.is_finite()) {
            return Err(Error::invalid("phase coefficients must be finite"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = phi - tau * (phi / tau).round();
    if w <= -std::f64::consts::PI {
        w + tau
    } else {
        w
    }
}

/// Ground-truth image: ellipse sum clamped to `[0, 1]` for the magnitude,
/// times `exp(i·φ)` for the polynomial phase `φ`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ComplexImage> {
    let magnitude = phantom_magnitude(spec)?;
    let grid = make_grid(spec.d1, spec.d2)?;
    let data = grid
        .coords()
        .iter()
        .zip(magnitude)
        .map(|(&[x, y], m)| {
            let phi: f64 = spec
                .phase
                .iter()
                .map(|t| t.coef * x.powi(t.p as i32) * y.powi(t.q as i32))
                .sum();
            Complex64::from_polar(m, wrap_phase(phi))
        })
        .collect();
    ComplexImage::new(spec.d1, spec.d2, data)
}

/// The phantom's magnitude alone, row-major.
pub fn phantom_magnitude(spec: &PhantomSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let ellipses = spec.ellipses.resolve()?;
    let grid = make_grid(spec.d1, spec.d2)?;
    Ok(grid
        .coords()
        .iter()
        .map(|&[x, y]| {
            let m: f64 = ellipses.iter().filter(|e| e.contains(y, -x)).map(|e| e.intensity).sum();
            m.clamp(0.0, 1.0)
        })
        .collect())
}

/// Distance of the coil centres from the field-of-view centre.
const COIL_RADIUS: f64 = 1.5;
/// Standard deviation of each coil's Gaussian profile.
const COIL_WIDTH: f64 = 1.5;

/// `c` smooth coil profiles. Coil `j` is a unit-peak Gaussian centred
/// outside the field of view at angle `α + 2πj/c`, times a linear phase
/// `exp(i(a·x + b·y + φ0))` with `a, b ∈ [-1, 1]`. The offset `α` and the
/// phase terms are drawn from `seed`.
pub fn simulate_coils(c: usize, d1: usize, d2: usize, seed: u64) -> Result<SensitivityMaps> {
    if c == 0 {
        return Err(Error::invalid("need at least one coil"));
    }
    let grid = make_grid(d1, d2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(c * d1 * d2);
    for j in 0..c {
        let theta = alpha + std::f64::consts::TAU * j as f64 / c as f64;
        let (cx, cy) = (COIL_RADIUS * theta.cos(), COIL_RADIUS * theta.sin());
        let a = rng.random_range(-1.0..=1.0);
        let b = rng.random_range(-1.0..=1.0);
        let phi0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        data.extend(grid.coords().iter().map(|&[x, y]| {
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            Complex64::from_polar((-r2 / (2.0 * COIL_WIDTH * COIL_WIDTH)).exp(), a * x + b * y + phi0)
        }));
    }
    SensitivityMaps::new(c, d1, d2, data)
}

/// Cartesian undersampling: every `r`-th phase-encode line from centered
/// index 0, plus `acs` contiguous lines around the centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub d_fe: usize,
    pub d_pe: usize,
    pub r: usize,
    pub acs: usize,
}

pub fn make_mask(spec: &MaskSpec) -> Result<SamplingMask> {
    let MaskSpec { d_fe, d_pe, r, acs } = *spec;
    if d_fe == 0 || d_pe == 0 {
        return Err(Error::invalid(format!("mask dimensions must be positive, got {d_fe}×{d_pe}")));
    }
    if r < 1 || r > d_pe {
        return Err(Error::invalid(format!("acceleration R must lie in 1..={d_pe}, got {r}")));
    }
    let start = (d_pe / 2).checked_sub(acs / 2);
    let start = match start {
        Some(s) if s + acs <= d_pe => s,
        _ => return Err(Error::invalid(format!("ACS block of {acs} lines does not fit in {d_pe}"))),
    };
    let lines = (0..d_pe).step_by(r).chain(start..start + acs).collect();
    SamplingMask::new(d_fe, d_pe, lines)
}

/// Kept phase-encode lines over all lines.
pub fn undersampling_rate(mask: &SamplingMask) -> f64 {
    mask.kept_count() as f64 / mask.d2() as f64
}

/// `S_j = M·(F(C_j·I) + n_j)` with i.i.d. Gaussian noise of standard
/// deviation `noise_std` in each component, drawn over the full grid in
/// coil, row, column order.
pub fn acquire(
    truth: &ComplexImage,
    coils: &SensitivityMaps,
    mask: &SamplingMask,
    noise_std: f64,
    seed: u64,
) -> Result<KSpaceVolume> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let mut volume = apply_forward(truth, coils, mask)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy = crate::mrop::coil_kspace(truth, coils)?;
        for v in &mut noisy {
            *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
        mask.apply(&mut noisy);
        volume.data = noisy;
    }
    Ok(volume)
}

/// Zero-filled baseline: adjoint reconstruction with the given maps.
pub fn zero_filled(kspace: &KSpaceVolume, maps: &SensitivityMaps) -> Result<ComplexImage> {
    crate::mrop::adjoint_model(kspace, maps)
}

/// Ground truth as seen through the coils: `|I|·√(Σ_j |C_j|²)`. This is what
/// both coil combination of fully sampled data and the adjoint with
/// normalized maps return, so reconstructions are scored against it.
pub fn reference_magnitude(truth: &ComplexImage, maps: &SensitivityMaps) -> Result<Vec<f64>> {
    if (truth.d1, truth.d2) != (maps.d1, maps.d2) {
        return Err(Error::shape("reference image", &[maps.d1, maps.d2], &[truth.d1, truth.d2]));
    }
    let p = truth.d1 * truth.d2;
    Ok((0..p)
        .map(|k| {
            let rss = (0..maps.coils).map(|j| maps.data[j * p + k].norm_sqr()).sum::<f64>().sqrt();
            truth.data[k].norm() * rss
        })
        .collect())
}

/// Root-sum-of-squares of the per-coil inverse FFTs, a calibration-free
/// zero-filled magnitude.
pub fn zero_filled_rss(kspace: &KSpaceVolume) -> Vec<f64> {
    let p = kspace.d1 * kspace.d2;
    let mut data = kspace.data.clone();
    kspace.mask.apply(&mut data);
    Fft2::<f64>::plan(kspace.d1, kspace.d2).process(&mut data, true);
    (0..p)
        .map(|k| (0..kspace.coils).map(|j| data[j * p + k].norm_sqr()).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrop::forward_model;
    use crate::tensorgrad::{ComplexNode, RealTensor, Tape};
    use proptest::prelude::*;

    #[test]
    fn empty_and_single_ellipse() {
        let mut spec = PhantomSpec {
            ellipses: EllipseSet::List(vec![]),
            ..PhantomSpec::shepp_logan(9, 9)
        };
        assert!(make_phantom(&spec).unwrap().data.iter().all(|z| z.norm() == 0.0));
        spec.ellipses = EllipseSet::List(vec![Ellipse {
            center: [0.0, 0.0],
            axes: [0.5, 0.3],
            angle: 30.0,
            intensity: 0.7,
        }]);
        let img = make_phantom(&spec).unwrap();
        assert!((img.data[4 * 9 + 4].norm() - 0.7).abs() < 1e-15);
        assert_eq!(img.data[0].norm(), 0.0);
    }

    #[test]
    fn shepp_logan_matches_membership_oracle() {
        let spec = PhantomSpec::shepp_logan(64, 64);
        let mags = phantom_magnitude(&spec).unwrap();
        let step = 2.0 / 63.0;
        for i in 0..64 {
            for j in 0..64 {
                let x = if i == 63 { 1.0 } else { -1.0 + i as f64 * step };
                let y = if j == 63 { 1.0 } else { -1.0 + j as f64 * step };
                let mut m = 0.0f64;
                for r in SHEPP_LOGAN {
                    let t = r[5].to_radians();
                    let (du, dv) = (y - r[3], -x - r[4]);
                    let along = du * t.cos() + dv * t.sin();
                    let across = dv * t.cos() - du * t.sin();
                    if (along / r[1]).powi(2) + (across / r[2]).powi(2) <= 1.0 {
                        m += r[0];
                    }
                }
                assert_eq!(mags[i * 64 + j], m.clamp(0.0, 1.0), "pixel {i},{j}");
            }
        }
        assert!(mags.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert!(mags.iter().any(|&m| m > 0.9));
        let img = make_phantom(&spec).unwrap();
        for (z, m) in img.data.iter().zip(&mags) {
            assert!((z.norm() - m).abs() < 1e-15);
        }
        for (p, m) in img.phase().iter().zip(&mags) {
            assert!(*m == 0.0 || (*p > -std::f64::consts::PI && *p <= std::f64::consts::PI));
        }
    }

    #[test]
    fn phantom_spec_json() {
        let spec = PhantomSpec::from_json(r#"{"d1": 32, "d2": 32, "ellipses": "shepp-logan", "seed": 3}"#).unwrap();
        assert_eq!(spec.phase, default_phase());
        let err = PhantomSpec::from_json(r#"{"d2": 32, "ellipses": "shepp-logan"}"#).unwrap_err();
        assert!(err.to_string().contains("d1"));
        assert!(PhantomSpec::from_json(r#"{"d1": 32, "d2": 32, "ellipses": "cube"}"#).is_err());
    }

    #[test]
    fn wrap_phase_range() {
        assert_eq!(wrap_phase(std::f64::consts::PI), std::f64::consts::PI);
        assert_eq!(wrap_phase(-std::f64::consts::PI), std::f64::consts::PI);
        assert!((wrap_phase(7.0) - (7.0 - std::f64::consts::TAU)).abs() < 1e-15);
    }

    #[test]
    fn coils_are_smooth_and_cover_the_field() {
        let one = simulate_coils(1, 64, 64, 7).unwrap();
        let d = 64.0;
        for i in 0..64 {
            for j in 0..64 {
                let z = one.data[i * 64 + j];
                if i + 1 < 64 {
                    assert!((one.data[(i + 1) * 64 + j] - z).norm() < 5.0 / d);
                }
                if j + 1 < 64 {
                    assert!((one.data[i * 64 + j + 1] - z).norm() < 5.0 / d);
                }
            }
        }
        assert_eq!(one, simulate_coils(1, 64, 64, 7).unwrap());
        let eight = simulate_coils(8, 128, 128, 1).unwrap();
        let p = 128 * 128;
        for k in 0..p {
            let rss = (0..8).map(|c| eight.data[c * p + k].norm_sqr()).sum::<f64>().sqrt();
            assert!(rss >= 0.1);
        }
    }

    #[test]
    fn mask_examples() {
        let m = make_mask(&MaskSpec { d_fe: 4, d_pe: 10, r: 2, acs: 2 }).unwrap();
        assert_eq!(m.kept_lines(), &[0, 2, 4, 5, 6, 8]);
        assert!((undersampling_rate(&m) - 0.6).abs() < 1e-15);
        let knee = make_mask(&MaskSpec { d_fe: 1, d_pe: 368, r: 4, acs: 24 }).unwrap();
        assert_eq!(knee.kept_count(), 110);
        let brain = make_mask(&MaskSpec { d_fe: 1, d_pe: 236, r: 5, acs: 4 }).unwrap();
        assert_eq!(brain.kept_count(), 52);
        assert_eq!(undersampling_rate(&SamplingMask::full(3, 7)), 1.0);
        assert!(make_mask(&MaskSpec { d_fe: 1, d_pe: 10, r: 2, acs: 11 }).is_err());
        assert!(make_mask(&MaskSpec { d_fe: 1, d_pe: 10, r: 0, acs: 2 }).is_err());
        assert!(make_mask(&MaskSpec { d_fe: 1, d_pe: 10, r: 11, acs: 2 }).is_err());
    }

    #[test]
    fn noiseless_acquisition_matches_forward_model() {
        let truth = make_phantom(&PhantomSpec::shepp_logan(16, 16)).unwrap();
        let maps = simulate_coils(3, 16, 16, 2).unwrap();
        let mask = make_mask(&MaskSpec { d_fe: 16, d_pe: 16, r: 3, acs: 4 }).unwrap();
        let s = acquire(&truth, &maps, &mask, 0.0, 0).unwrap();
        assert!(s.respects_mask());

        let mut tape = Tape::<f64>::new();
        let plane = |tape: &mut Tape<f64>, v: Vec<f64>| tape.constant(RealTensor::new(&[16, 16], v).unwrap());
        let image = ComplexNode { re: plane(&mut tape, truth.re()), im: plane(&mut tape, truth.im()) };
        let sens: Vec<_> = (0..3)
            .map(|j| {
                let c = maps.coil_image(j);
                ComplexNode { re: plane(&mut tape, c.re()), im: plane(&mut tape, c.im()) }
            })
            .collect();
        let pred = forward_model(image, &sens, &mask, &mut tape).unwrap();
        for (j, n) in pred.iter().enumerate() {
            let (re, im) = (tape.value(n.re).data(), tape.value(n.im).data());
            for (k, z) in s.coil(j).iter().enumerate() {
                assert_eq!(z.re.to_bits(), re[k].to_bits());
                assert_eq!(z.im.to_bits(), im[k].to_bits());
            }
        }

        let full = acquire(&truth, &SensitivityMaps::ones(1, 16, 16), &SamplingMask::full(16, 16), 0.0, 0).unwrap();
        let mut f = truth.data.clone();
        Fft2::<f64>::plan(16, 16).process(&mut f, false);
        assert_eq!(full.data, f);
    }

    #[test]
    fn noise_has_requested_spread() {
        let blank = ComplexImage::zeros(128, 128);
        let s = acquire(&blank, &SensitivityMaps::ones(2, 128, 128), &SamplingMask::full(128, 128), 0.05, 9).unwrap();
        let vals: Vec<f64> = s.data.iter().flat_map(|z| [z.re, z.im]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!((std / 0.05 - 1.0).abs() < 0.05, "std {std}");
        assert_eq!(s, acquire(&blank, &SensitivityMaps::ones(2, 128, 128), &SamplingMask::full(128, 128), 0.05, 9).unwrap());
        let masked = acquire(&ComplexImage::zeros(8, 8), &SensitivityMaps::ones(1, 8, 8), &SamplingMask::new(8, 8, vec![1]).unwrap(), 0.1, 1).unwrap();
        assert!(masked.respects_mask());
    }

    #[test]
    fn zero_filled_matches_adjoint() {
        let truth = make_phantom(&PhantomSpec::shepp_logan(16, 16)).unwrap();
        let maps = simulate_coils(2, 16, 16, 4).unwrap();
        let mask = make_mask(&MaskSpec { d_fe: 16, d_pe: 16, r: 2, acs: 4 }).unwrap();
        let s = acquire(&truth, &maps, &mask, 0.0, 0).unwrap();
        assert_eq!(zero_filled(&s, &maps).unwrap(), crate::mrop::adjoint_model(&s, &maps).unwrap());
        let rss = zero_filled_rss(&acquire(&truth, &SensitivityMaps::ones(1, 16, 16), &SamplingMask::full(16, 16), 0.0, 0).unwrap());
        for (a, b) in rss.iter().zip(truth.magnitude()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_contains_uniform_and_acs_lines(d in 4usize..300, r in 1usize..8, acs_frac in 0.0f64..1.0) {
            let r = r.min(d);
            let acs = ((d as f64) * acs_frac) as usize;
            let m = make_mask(&MaskSpec { d_fe: 2, d_pe: d, r, acs }).unwrap();
            let lines = m.kept_lines();
            for l in (0..d).step_by(r) {
                prop_assert!(lines.contains(&l));
            }
            let start = d / 2 - acs / 2;
            for l in start..start + acs {
                prop_assert!(lines.contains(&l));
            }
            prop_assert_eq!(lines.len(), (0..d).filter(|l| l % r == 0 || (start..start + acs).contains(l)).count());
        }
    }
}
