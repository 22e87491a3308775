//! Polynomial coil sensitivities: per coil, separate real and imaginary
//! polynomials `Σ φ_pq x^p y^q` for `0 ≤ p, q ≤ N`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::coords::CoordinateGrid;
use crate::error::{Error, Result};
use crate::image::SensitivityMaps;
use crate::tensorgrad::{ComplexNode, NodeId, Real, RealTensor, Tape};

/// Coefficients stored as `[c, 2, (N+1)²]`; part 0 is real, part 1
/// imaginary, and monomial `(p, q)` sits at column `p·(N+1) + q`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyCoefficients<T> {
    pub coils: usize,
    pub order: usize,
    pub coeffs: RealTensor<T>,
}

pub fn monomial_count(order: usize) -> usize {
    (order + 1) * (order + 1)
}

impl<T: Real> PolyCoefficients<T> {
    pub fn zeros(coils: usize, order: usize) -> Self {
        Self {
            coils,
            order,
            coeffs: RealTensor::zeros(&[coils, 2, monomial_count(order)]),
        }
    }

    pub fn new(coils: usize, order: usize, coeffs: RealTensor<T>) -> Result<Self> {
        let want = [coils, 2, monomial_count(order)];
        if coeffs.shape() != want {
            return Err(Error::shape("polynomial coefficients", &want, coeffs.shape()));
        }
        Ok(Self { coils, order, coeffs })
    }

    fn index(&self, coil: usize, part: usize, p: usize, q: usize) -> usize {
        let k = monomial_count(self.order);
        (coil * 2 + part) * k + p * (self.order + 1) + q
    }

    pub fn get(&self, coil: usize, part: usize, p: usize, q: usize) -> T {
        self.coeffs.data()[self.index(coil, part, p, q)]
    }

    pub fn set(&mut self, coil: usize, part: usize, p: usize, q: usize, value: T) {
        let i = self.index(coil, part, p, q);
        self.coeffs.data_mut()[i] = value;
    }

    pub fn cast<U: Real>(&self) -> PolyCoefficients<U> {
        PolyCoefficients {
            coils: self.coils,
            order: self.order,
            coeffs: RealTensor::new(
                self.coeffs.shape(),
                self.coeffs.data().iter().map(|v| U::lit(v.as_f64())).collect(),
            )
            .expect("same shape"),
        }
    }
}

/// I.i.d. `Normal(0, 1/(N+1)²)` coefficients.
pub fn init_poly<T: Real>(coils: usize, order: usize, seed: u64) -> Result<PolyCoefficients<T>> {
    if coils == 0 {
        return Err(Error::invalid("need at least one coil"));
    }
    let sigma = 1.0 / (order + 1) as f64;
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = coils * 2 * monomial_count(order);
    let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    PolyCoefficients::new(coils, order, RealTensor::from_f64(&[coils, 2, monomial_count(order)], &data)?)
}

/// Monomials `x^p y^q` on every grid pixel, row-major `[d1·d2, (N+1)²]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonomialBasis {
    pub d1: usize,
    pub d2: usize,
    pub order: usize,
    pub data: Vec<f64>,
}

impl MonomialBasis {
    pub fn columns(&self) -> usize {
        monomial_count(self.order)
    }

    pub fn get(&self, row: usize, p: usize, q: usize) -> f64 {
        self.data[row * self.columns() + p * (self.order + 1) + q]
    }

    /// The basis as a `[d1, d2, (N+1)²]` tensor.
    pub fn to_tensor<T: Real>(&self) -> RealTensor<T> {
        RealTensor::from_f64(&[self.d1, self.d2, self.columns()], &self.data).expect("basis shape")
    }
}

fn powers(v: f64, order: usize) -> Vec<f64> {
    let mut out = vec![1.0; order + 1];
    for p in 1..=order {
        out[p] = out[p - 1] * v;
    }
    out
}

pub fn build_basis(grid: &CoordinateGrid, order: usize) -> MonomialBasis {
    let k = monomial_count(order);
    let mut data = Vec::with_capacity(grid.len() * k);
    for c in grid.coords() {
        let (xp, yq) = (powers(c[0], order), powers(c[1], order));
        for x in &xp {
            data.extend(yq.iter().map(|y| x * y));
        }
    }
    MonomialBasis {
        d1: grid.d1(),
        d2: grid.d2(),
        order,
        data,
    }
}

/// Records the maps of every coil on `tape`, one `d1×d2` pair per coil.
/// `coeffs` must be a `[c, 2, (N+1)²]` node and `basis` a `[d1, d2, (N+1)²]` one.
pub fn eval_sensitivities<T: Real>(coeffs: NodeId, basis: NodeId, tape: &mut Tape<T>) -> Result<Vec<ComplexNode>> {
    let cs = tape.shape(coeffs).to_vec();
    let bs = tape.shape(basis).to_vec();
    if cs.len() != 3 || cs[1] != 2 || bs.len() != 3 || cs[2] != bs[2] {
        return Err(Error::shape("sensitivity evaluation", &bs, &cs));
    }
    let maps = tape.basis_apply(basis, coeffs)?;
    let mut out = Vec::with_capacity(cs[0]);
    for j in 0..cs[0] {
        let coil = tape.select(maps, j)?;
        out.push(ComplexNode {
            re: tape.select(coil, 0)?,
            im: tape.select(coil, 1)?,
        });
    }
    Ok(out)
}

/// Concrete maps, computed exactly as the recorded graph computes them.
pub fn evaluate_maps(coeffs: &PolyCoefficients<f64>, basis: &MonomialBasis) -> Result<SensitivityMaps> {
    if coeffs.order != basis.order {
        return Err(Error::invalid(format!(
            "coefficient order {} does not match basis order {}",
            coeffs.order, basis.order
        )));
    }
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(coeffs.coeffs.clone());
    let b = tape.constant(basis.to_tensor());
    let nodes = eval_sensitivities(c, b, &mut tape)?;
    let mut data = Vec::with_capacity(coeffs.coils * basis.d1 * basis.d2);
    for n in nodes {
        let (re, im) = (tape.value(n.re).data(), tape.value(n.im).data());
        data.extend(re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)));
    }
    SensitivityMaps::new(coeffs.coils, basis.d1, basis.d2, data)
}

/// Divides every pixel by the root-sum-of-squares over coils. Pixels where
/// that is zero are left unchanged; their count is returned.
pub fn normalize_maps(maps: &SensitivityMaps) -> (SensitivityMaps, usize) {
    let p = maps.d1 * maps.d2;
    let mut out = maps.clone();
    let mut degenerate = 0;
    for k in 0..p {
        let rss = (0..maps.coils).map(|j| maps.data[j * p + k].norm_sqr()).sum::<f64>().sqrt();
        if rss > 0.0 {
            for j in 0..maps.coils {
                out.data[j * p + k] /= rss;
            }
        } else {
            degenerate += 1;
        }
    }
    (out, degenerate)
}
