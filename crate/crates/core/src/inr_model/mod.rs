//! Coordinate networks for the real and imaginary image components.
//!
//! Each branch is a fully connected network `input → width → … → width → 1`
//! with the configured activation after every layer except the last.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coords::{positional_encode, CoordinateGrid};
use crate::error::{Error, Result};
use crate::tensorgrad::{affine_forward, ComplexNode, NodeId, Real, RealTensor, Tape, AFFINE_ROW_BLOCK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    Relu,
}

/// Layer sizes of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of activated layers of width `hidden_width`.
    pub hidden_layers: usize,
}

impl Architecture {
    /// Six hidden layers of 256 units on 2D coordinates.
    pub const DEFAULT: Architecture = Architecture {
        input_dim: 2,
        hidden_width: 256,
        hidden_layers: 6,
    };

    pub fn new(input_dim: usize, hidden_width: usize, hidden_layers: usize) -> Self {
        Self {
            input_dim,
            hidden_width,
            hidden_layers,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_dim, self.hidden_width)];
        dims.extend((1..self.hidden_layers).map(|_| (self.hidden_width, self.hidden_width)));
        dims.push((self.hidden_width, 1));
        dims
    }

    pub fn params_per_branch(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `[fan_out, fan_in]`
    pub weight: RealTensor<T>,
    /// `[fan_out]`
    pub bias: RealTensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InrParameters<T> {
    pub activation: Activation,
    pub w0: f64,
    /// Bands of the positional encoding applied to coordinates, if any.
    pub encoding_bands: Option<usize>,
    pub real: Vec<Layer<T>>,
    pub imag: Vec<Layer<T>>,
}

fn uniform_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bound: f64, scale: f64) -> Layer<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite init bound");
    let w = (0..fan_in * fan_out).map(|_| dist.sample(rng) * scale).collect();
    Layer {
        weight: RealTensor::new(&[fan_out, fan_in], w).expect("layer shape"),
        bias: RealTensor::zeros(&[fan_out]),
    }
}

fn init_branches(arch: &Architecture, seed: u64, layer: impl Fn(&mut ChaCha8Rng, usize, usize, usize) -> Layer<f64>) -> (Vec<Layer<f64>>, Vec<Layer<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branch = |rng: &mut ChaCha8Rng| {
        arch.layer_dims()
            .iter()
            .enumerate()
            .map(|(k, &(fi, fo))| layer(rng, k, fi, fo))
            .collect::<Vec<_>>()
    };
    let real = branch(&mut rng);
    let imag = branch(&mut rng);
    (real, imag)
}

/// SIREN initialization: first-layer weights `U(-1/n, 1/n)·w0`, all other
/// weights `U(-√(6/n), √(6/n))` with `n` the fan-in; biases zero.
pub fn init_siren<T: Real>(arch: Architecture, w0: f64, seed: u64) -> Result<InrParameters<T>> {
    arch.validate()?;
    if !(w0 > 0.0 && w0.is_finite()) {
        return Err(Error::invalid(format!("w0 must be positive, got {w0}")));
    }
    let (real, imag) = init_branches(&arch, seed, |rng, k, fi, fo| {
        let n = fi as f64;
        if k == 0 {
            uniform_layer(rng, fi, fo, 1.0 / n, w0)
        } else {
            uniform_layer(rng, fi, fo, (6.0 / n).sqrt(), 1.0)
        }
    });
    Ok(InrParameters {
        activation: Activation::Sine,
        w0,
        encoding_bands: None,
        real,
        imag,
    }
    .cast())
}

/// ReLU network with He-style `U(-√(6/n), √(6/n))` weights on every layer.
pub fn init_relu_mlp<T: Real>(arch: Architecture, seed: u64) -> Result<InrParameters<T>> {
    arch.validate()?;
    let (real, imag) = init_branches(&arch, seed, |rng, _, fi, fo| {
        uniform_layer(rng, fi, fo, (6.0 / fi as f64).sqrt(), 1.0)
    });
    Ok(InrParameters {
        activation: Activation::Relu,
        w0: 1.0,
        encoding_bands: None,
        real,
        imag,
    }
    .cast())
}

impl<T: Real> InrParameters<T> {
    /// Feeds positionally encoded coordinates instead of raw ones.
    pub fn with_positional_encoding(mut self, bands: usize) -> Result<Self> {
        if self.input_dim() != 4 * bands {
            return Err(Error::invalid(format!(
                "positional encoding with {bands} bands gives {} features but the network takes {}",
                4 * bands,
                self.input_dim()
            )));
        }
        self.encoding_bands = Some(bands);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.real[0].weight.shape()[1]
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden_width: self.real[0].weight.shape()[0],
            hidden_layers: self.real.len() - 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Weight and bias tensors, real branch first, in layer order.
    pub fn tensors(&self) -> Vec<&RealTensor<T>> {
        self.real
            .iter()
            .chain(&self.imag)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor<T>> {
        self.real
            .iter_mut()
            .chain(self.imag.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`InrParameters::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (branch, layers) in [("real", &self.real), ("imag", &self.imag)] {
            for k in 0..layers.len() {
                names.push(format!("{branch}.layer{k}.weight"));
                names.push(format!("{branch}.layer{k}.bias"));
            }
        }
        names
    }

    pub fn cast<U: Real>(&self) -> InrParameters<U> {
        let conv = |t: &RealTensor<T>| {
            RealTensor::new(t.shape(), t.data().iter().map(|v| U::lit(v.as_f64())).collect())
                .expect("same shape")
        };
        let layers = |ls: &[Layer<T>]| {
            ls.iter()
                .map(|l| Layer {
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect()
        };
        InrParameters {
            activation: self.activation,
            w0: self.w0,
            encoding_bands: self.encoding_bands,
            real: layers(&self.real),
            imag: layers(&self.imag),
        }
    }

    /// Network input for `grid`: raw coordinates or their encoding.
    pub fn network_input(&self, grid: &CoordinateGrid) -> Result<RealTensor<T>> {
        let input = match self.encoding_bands {
            Some(bands) => positional_encode(grid, bands)?,
            None => grid.to_tensor(),
        };
        if input.shape()[1] != self.input_dim() {
            return Err(Error::shape(
                "network input",
                &[grid.len(), self.input_dim()],
                input.shape(),
            ));
        }
        Ok(input)
    }
}

/// Leaf ids of the parameters, in [`InrParameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct InrLeaves(pub Vec<NodeId>);

/// Records both branches on `tape` and returns the `d1×d2` image planes.
pub fn eval_image<T: Real>(
    params: &InrParameters<T>,
    grid: &CoordinateGrid,
    tape: &mut Tape<T>,
) -> Result<(ComplexNode, InrLeaves)> {
    let input = params.network_input(grid)?;
    eval_image_on(params, input, grid.d1(), grid.d2(), tape)
}

/// [`eval_image`] on a precomputed network input of `d1·d2` rows.
pub fn eval_image_on<T: Real>(
    params: &InrParameters<T>,
    input: RealTensor<T>,
    d1: usize,
    d2: usize,
    tape: &mut Tape<T>,
) -> Result<(ComplexNode, InrLeaves)> {
    let want = [d1 * d2, params.input_dim()];
    if input.shape() != want {
        return Err(Error::shape("network input", &want, input.shape()));
    }
    let x = tape.constant(input);
    let names = params.tensor_names();
    let mut leaves = Vec::new();
    let mut planes = Vec::new();
    let mut name_iter = names.into_iter();
    for layers in [&params.real, &params.imag] {
        let mut h = x;
        for (k, layer) in layers.iter().enumerate() {
            let w = tape.leaf(name_iter.next().unwrap(), layer.weight.clone());
            let b = tape.leaf(name_iter.next().unwrap(), layer.bias.clone());
            leaves.extend([w, b]);
            h = tape.affine(h, w, b)?;
            if k + 1 < layers.len() {
                h = match params.activation {
                    Activation::Sine => tape.sin(h)?,
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        planes.push(tape.reshape(h, &[d1, d2])?);
    }
    Ok((
        ComplexNode {
            re: planes[0],
            im: planes[1],
        },
        InrLeaves(leaves),
    ))
}

/// Rows per chunk in [`evaluate`]; a multiple of the dense-layer row block
/// so chunked evaluation reproduces the recorded forward pass bit for bit.
const EVAL_CHUNK: usize = 8 * AFFINE_ROW_BLOCK;

fn branch_forward<T: Real>(layers: &[Layer<T>], activation: Activation, input: &[T], fan_in: usize) -> Vec<T> {
    let mut h = input.to_vec();
    let mut width = fan_in;
    for (k, layer) in layers.iter().enumerate() {
        let fan_out = layer.bias.len();
        let rows = h.len() / width;
        let mut y = vec![T::zero(); rows * fan_out];
        affine_forward(&h, width, layer.weight.data(), layer.bias.data(), &mut y);
        if k + 1 < layers.len() {
            match activation {
                Activation::Sine => {
                    let mut cos = vec![T::zero(); y.len()];
                    let pre = y.clone();
                    T::sin_cos_slice(&pre, &mut y, &mut cos);
                }
                Activation::Relu => {
                    for v in &mut y {
                        if !(*v > T::zero()) {
                            *v = T::zero();
                        }
                    }
                }
            }
        }
        h = y;
        width = fan_out;
    }
    h
}

/// Evaluates both branches on `grid` without recording, in row chunks.
/// Returns `(re, im)` planes of length `d1·d2`.
pub fn evaluate<T: Real>(params: &InrParameters<T>, grid: &CoordinateGrid) -> Result<(Vec<T>, Vec<T>)> {
    let input = params.network_input(grid)?;
    let fan_in = params.input_dim();
    let mut re = Vec::with_capacity(grid.len());
    let mut im = Vec::with_capacity(grid.len());
    for chunk in input.data().chunks(EVAL_CHUNK * fan_in) {
        re.extend(branch_forward(&params.real, params.activation, chunk, fan_in));
        im.extend(branch_forward(&params.imag, params.activation, chunk, fan_in));
    }
    Ok((re, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::make_grid;

    #[test]
    fn default_parameter_count() {
        let by_hand = (2 * 256 + 256) + 5 * (256 * 256 + 256) + (256 + 1);
        assert_eq!(by_hand, 329_985);
        assert_eq!(Architecture::DEFAULT.params_per_branch(), by_hand);
        let p = init_siren::<f32>(Architecture::DEFAULT, 31.0, 0).unwrap();
        assert_eq!(p.param_count(), 2 * by_hand);
        assert_eq!(p.real.len(), 7);
    }

    #[test]
    fn siren_bounds_are_hard() {
        let p = init_siren::<f64>(Architecture::DEFAULT, 31.0, 3).unwrap();
        for layers in [&p.real, &p.imag] {
            let first = &layers[0].weight;
            assert!(first.data().iter().all(|w| w.abs() <= 31.0 / 2.0));
            assert!(first.data().iter().any(|w| w.abs() > 10.0));
            for l in &layers[1..] {
                let n = l.weight.shape()[1] as f64;
                let bound = (6.0 / n).sqrt();
                assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
                assert!(l.bias.data().iter().all(|b| *b == 0.0));
            }
        }
        let hidden_bound = (6.0f64 / 256.0).sqrt();
        assert!((hidden_bound - 0.1531).abs() < 1e-4);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let arch = Architecture::new(2, 16, 3);
        let a = init_siren::<f32>(arch, 20.0, 9).unwrap();
        let b = init_siren::<f32>(arch, 20.0, 9).unwrap();
        let c = init_siren::<f32>(arch, 20.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.real, a.imag);
    }

    #[test]
    fn relu_init() {
        let arch = Architecture::new(24, 32, 3);
        let p = init_relu_mlp::<f64>(arch, 1).unwrap();
        assert_eq!(p.activation, Activation::Relu);
        for l in p.real.iter().chain(&p.imag) {
            let bound = (6.0 / l.weight.shape()[1] as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.is_finite() && w.abs() <= bound));
        }
        assert!(p.clone().with_positional_encoding(6).is_ok());
        assert!(p.with_positional_encoding(5).is_err());
    }

    #[test]
    fn zero_network_gives_zero_image() {
        let arch = Architecture::new(2, 8, 2);
        let mut p = init_siren::<f64>(arch, 10.0, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let grid = make_grid(4, 5).unwrap();
        let mut tape = Tape::new();
        let (img, _) = eval_image(&p, &grid, &mut tape).unwrap();
        assert!(tape.value(img.re).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(img.im).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(img.re), &[4, 5]);
    }

    #[test]
    fn linear_output_layer_reproduces_x_coordinate() {
        // x + 2 > 0 on the grid, so the ReLU passes it through unchanged.
        let arch = Architecture::new(2, 1, 1);
        let mut p = init_relu_mlp::<f64>(arch, 0).unwrap();
        for layers in [&mut p.real, &mut p.imag] {
            layers[0].weight = RealTensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
            layers[0].bias = RealTensor::new(&[1], vec![2.0]).unwrap();
            layers[1].weight = RealTensor::new(&[1, 1], vec![1.0]).unwrap();
            layers[1].bias = RealTensor::new(&[1], vec![-2.0]).unwrap();
        }
        let grid = make_grid(3, 4).unwrap();
        let mut tape = Tape::new();
        let (img, _) = eval_image(&p, &grid, &mut tape).unwrap();
        let xs: Vec<f64> = grid.coords().iter().map(|c| c[0]).collect();
        assert_eq!(tape.value(img.re).data(), &xs[..]);
    }

    #[test]
    fn recorded_and_chunked_evaluation_agree_bitwise() {
        let arch = Architecture::new(2, 32, 3);
        let p = init_siren::<f32>(arch, 25.0, 4).unwrap();
        // Larger than one evaluation chunk.
        let grid = make_grid(80, 70).unwrap();
        let mut tape = Tape::new();
        let (img, _) = eval_image(&p, &grid, &mut tape).unwrap();
        let (re, im) = evaluate(&p, &grid).unwrap();
        assert_eq!(tape.value(img.re).data(), &re[..]);
        assert_eq!(tape.value(img.im).data(), &im[..]);
    }

    #[test]
    fn input_dimension_mismatch_rejected() {
        let p = init_relu_mlp::<f64>(Architecture::new(24, 8, 2), 0).unwrap();
        let grid = make_grid(4, 4).unwrap();
        let mut tape = Tape::new();
        assert!(eval_image(&p, &grid, &mut tape).is_err());
    }
}
