use std::collections::HashMap;
use std::sync::Arc;

use rustfft::FftPlanner;

use crate::error::{Error, Result};

use super::fft::{pack, unpack, Fft2};
use super::{Real, RealTensor};

/// Rows per GEMM call in the dense-layer forward pass. Results for a row
/// never depend on how many other rows share the call, so evaluating a
/// grid in chunks that are multiples of this is bit-identical to one pass.
pub const AFFINE_ROW_BLOCK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A complex quantity carried as a pair of real nodes of equal shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexNode {
    pub re: NodeId,
    pub im: NodeId,
}

/// Operations the tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<T> {
    /// `x·Wᵀ + b` for `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
    Affine,
    Sin,
    Relu,
    Add,
    Sub,
    ScalarMul(T),
    Mul,
    /// Unitary forward transform of `(re, im)` over the last two axes;
    /// the output stacks the real and imaginary parts on a new axis 0.
    Fft2,
    Ifft2,
    /// Index along axis 0.
    Select(usize),
    /// Zeroes entries whose last-axis index is not kept.
    MaskSelect(Arc<[bool]>),
    /// `Σ|x|`, with subgradient `sign(x)` and `sign(0) = 0`.
    AbsL1Sum,
    Sum,
    /// Forward difference along the second-to-last axis; the last row is 0.
    ForwardDiffX,
    /// Forward difference along the last axis; the last column is 0.
    ForwardDiffY,
    Reshape(Vec<usize>),
    /// `basis: [d1, d2, K]`, `coeffs: [..., K]` → `[..., d1, d2]`.
    MonomialBasisApply,
}

#[derive(Clone, Debug)]
enum Origin<T> {
    Leaf(String),
    Constant,
    Op(OpKind<T>),
}

struct Node<T> {
    origin: Origin<T>,
    inputs: Vec<NodeId>,
    value: RealTensor<T>,
    saved: Vec<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_leaf: HashMap<NodeId, RealTensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: NodeId) -> Option<&RealTensor<T>> {
        self.by_leaf.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Append-only record of a computation, differentiated in reverse.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    planner: FftPlanner<T>,
    ffts: HashMap<(usize, usize), Arc<Fft2<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            planner: FftPlanner::new(),
            ffts: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable parameter.
    pub fn leaf(&mut self, name: impl Into<String>, value: RealTensor<T>) -> NodeId {
        self.push(Origin::Leaf(name.into()), Vec::new(), value, Vec::new(), true)
    }

    pub fn constant(&mut self, value: RealTensor<T>) -> NodeId {
        self.push(Origin::Constant, Vec::new(), value, Vec::new(), false)
    }

    pub fn value(&self, id: NodeId) -> &RealTensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.origin, Origin::Leaf(_)))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].origin {
            Origin::Leaf(name) => Some(name),
            _ => None,
        }
    }

    /// Replaces the value of a leaf or constant. Call [`Tape::replay`] to
    /// refresh downstream nodes.
    pub fn set_value(&mut self, id: NodeId, value: RealTensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if matches!(node.origin, Origin::Op(_)) {
            return Err(Error::invalid("only leaves and constants can be reassigned"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_value", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every recorded operation from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let kind = match &self.nodes[i].origin {
                Origin::Op(k) => k.clone(),
                _ => continue,
            };
            let inputs = self.nodes[i].inputs.clone();
            let (value, saved) = self.eval(&kind, &inputs)?;
            let node = &mut self.nodes[i];
            node.value = value;
            node.saved = saved;
        }
        Ok(())
    }

    /// Records `kind` applied to `inputs`, computing its value eagerly.
    pub fn record(&mut self, kind: OpKind<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("unknown node {}", bad.0)));
        }
        let (value, saved) = self.eval(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Origin::Op(kind), inputs.to_vec(), value, saved, requires_grad))
    }

    fn push(
        &mut self,
        origin: Origin<T>,
        inputs: Vec<NodeId>,
        value: RealTensor<T>,
        saved: Vec<T>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            origin,
            inputs,
            value,
            saved,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn fft_plan(&mut self, d1: usize, d2: usize) -> Arc<Fft2<T>> {
        let planner = &mut self.planner;
        self.ffts
            .entry((d1, d2))
            .or_insert_with(|| Arc::new(Fft2::new(planner, d1, d2)))
            .clone()
    }

    // Typed wrappers --------------------------------------------------------

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Affine, &[x, w, b])
    }
    pub fn sin(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sin, &[x])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu, &[x])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.record(OpKind::ScalarMul(factor), &[a])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.record(OpKind::Select(index), &[x])
    }
    pub fn mask_select(&mut self, x: NodeId, keep: Arc<[bool]>) -> Result<NodeId> {
        self.record(OpKind::MaskSelect(keep), &[x])
    }
    pub fn abs_l1_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::AbsL1Sum, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[x])
    }
    pub fn diff_x(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::ForwardDiffX, &[x])
    }
    pub fn diff_y(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::ForwardDiffY, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(OpKind::Reshape(shape.to_vec()), &[x])
    }
    pub fn basis_apply(&mut self, basis: NodeId, coeffs: NodeId) -> Result<NodeId> {
        self.record(OpKind::MonomialBasisApply, &[basis, coeffs])
    }

    /// `a·b` on complex pairs: four real products and two sums.
    pub fn complex_mul(&mut self, a: ComplexNode, b: ComplexNode) -> Result<ComplexNode> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let ri = self.mul(a.re, b.im)?;
        let ir = self.mul(a.im, b.re)?;
        Ok(ComplexNode {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    /// Unitary FFT (or inverse) of a complex pair, returned as a pair.
    pub fn fft2(&mut self, z: ComplexNode, inverse: bool) -> Result<ComplexNode> {
        let kind = if inverse { OpKind::Ifft2 } else { OpKind::Fft2 };
        let packed = self.record(kind, &[z.re, z.im])?;
        Ok(ComplexNode {
            re: self.select(packed, 0)?,
            im: self.select(packed, 1)?,
        })
    }

    // Forward evaluation ----------------------------------------------------

    fn eval(&mut self, kind: &OpKind<T>, ids: &[NodeId]) -> Result<(RealTensor<T>, Vec<T>)> {
        let arity = match kind {
            OpKind::Affine => 3,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Fft2 | OpKind::Ifft2 => 2,
            OpKind::MonomialBasisApply => 2,
            _ => 1,
        };
        if ids.len() != arity {
            return Err(Error::invalid(format!(
                "{kind:?} takes {arity} inputs, got {}",
                ids.len()
            )));
        }
        if let OpKind::Fft2 | OpKind::Ifft2 = kind {
            let s = self.nodes[ids[0].0].value.shape().to_vec();
            if s.len() < 2 {
                return Err(Error::invalid("fft2 needs at least two axes"));
            }
            let plan = self.fft_plan(s[s.len() - 2], s[s.len() - 1]);
            let re = &self.nodes[ids[0].0].value;
            let im = &self.nodes[ids[1].0].value;
            if re.shape() != im.shape() {
                return Err(Error::shape("fft2", re.shape(), im.shape()));
            }
            let mut z = pack(re.data(), im.data());
            plan.process(&mut z, matches!(kind, OpKind::Ifft2));
            let mut shape = vec![2];
            shape.extend_from_slice(&s);
            return Ok((RealTensor::new(&shape, unpack(&z))?, Vec::new()));
        }
        let x: Vec<&RealTensor<T>> = ids.iter().map(|id| &self.nodes[id.0].value).collect();
        eval_op(kind, &x)
    }

    // Reverse pass ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid(format!("unknown node {}", loss.0)))?;
        if loss_node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "loss must be scalar, node {} has shape {:?}",
                loss.0,
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<RealTensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(RealTensor::filled(loss_node.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let is_op = matches!(self.nodes[i].origin, Origin::Op(_));
            if !is_op || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.backward_node(i, &g)?;
            for (input, cg) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Origin::Leaf(_) = node.origin {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| RealTensor::zeros(node.value.shape()));
                by_leaf.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn backward_node(&mut self, i: usize, g: &RealTensor<T>) -> Result<Vec<(NodeId, RealTensor<T>)>> {
        let kind = match &self.nodes[i].origin {
            Origin::Op(k) => k.clone(),
            _ => unreachable!(),
        };
        let inputs = self.nodes[i].inputs.clone();
        let wants = |t: &Self, k: usize| t.nodes[inputs[k].0].requires_grad;
        let mut out = Vec::new();

        match kind {
            OpKind::Fft2 | OpKind::Ifft2 => {
                let s = self.nodes[inputs[0].0].value.shape().to_vec();
                let plan = self.fft_plan(s[s.len() - 2], s[s.len() - 1]);
                let half = g.len() / 2;
                let mut z = pack(&g.data()[..half], &g.data()[half..]);
                // Adjoint of the unitary forward transform is the inverse.
                plan.process(&mut z, matches!(kind, OpKind::Fft2));
                let flat = unpack(&z);
                let (re, im) = flat.split_at(half);
                if wants(self, 0) {
                    out.push((inputs[0], RealTensor::new(&s, re.to_vec())?));
                }
                if wants(self, 1) {
                    out.push((inputs[1], RealTensor::new(&s, im.to_vec())?));
                }
                return Ok(out);
            }
            _ => {}
        }

        let node = &self.nodes[i];
        let xs: Vec<&RealTensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let want: Vec<bool> = inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
        let gd = g.data();

        match kind {
            OpKind::Affine => {
                let (x, w) = (xs[0], xs[1]);
                let rows = x.shape()[0];
                let fan_in = x.shape()[1];
                let fan_out = w.shape()[0];
                if want[0] {
                    let mut dx = RealTensor::zeros(x.shape());
                    T::gemm(
                        rows,
                        fan_out,
                        fan_in,
                        gd,
                        (fan_out as isize, 1),
                        w.data(),
                        (fan_in as isize, 1),
                        T::zero(),
                        dx.data_mut(),
                        (fan_in as isize, 1),
                    );
                    out.push((inputs[0], dx));
                }
                if want[1] {
                    let mut dw = RealTensor::zeros(w.shape());
                    T::gemm(
                        fan_out,
                        rows,
                        fan_in,
                        gd,
                        (1, fan_out as isize),
                        x.data(),
                        (fan_in as isize, 1),
                        T::zero(),
                        dw.data_mut(),
                        (fan_in as isize, 1),
                    );
                    out.push((inputs[1], dw));
                }
                if want[2] {
                    let mut db = vec![T::zero(); fan_out];
                    for row in gd.chunks_exact(fan_out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc = *acc + *v;
                        }
                    }
                    out.push((inputs[2], RealTensor::new(&[fan_out], db)?));
                }
            }
            OpKind::Sin => {
                let d = gd.iter().zip(&node.saved).map(|(g, c)| *g * *c).collect();
                out.push((inputs[0], RealTensor::new(xs[0].shape(), d)?));
            }
            OpKind::Relu => {
                let d = gd
                    .iter()
                    .zip(xs[0].data())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                out.push((inputs[0], RealTensor::new(xs[0].shape(), d)?));
            }
            OpKind::Add | OpKind::Sub => {
                if want[0] {
                    out.push((inputs[0], g.clone()));
                }
                if want[1] {
                    let d = if kind == OpKind::Add {
                        g.clone()
                    } else {
                        RealTensor::new(g.shape(), gd.iter().map(|v| -*v).collect())?
                    };
                    out.push((inputs[1], d));
                }
            }
            OpKind::ScalarMul(s) => {
                let d = gd.iter().map(|v| *v * s).collect();
                out.push((inputs[0], RealTensor::new(g.shape(), d)?));
            }
            OpKind::Mul => {
                for (k, other) in [(0, 1), (1, 0)] {
                    if want[k] {
                        let d = gd.iter().zip(xs[other].data()).map(|(g, o)| *g * *o).collect();
                        out.push((inputs[k], RealTensor::new(g.shape(), d)?));
                    }
                }
            }
            OpKind::Select(index) => {
                let src = xs[0];
                let mut d = RealTensor::zeros(src.shape());
                let n = g.len();
                d.data_mut()[index * n..(index + 1) * n].copy_from_slice(gd);
                out.push((inputs[0], d));
            }
            OpKind::MaskSelect(keep) => {
                let mut d = g.clone();
                apply_line_mask(d.data_mut(), &keep);
                out.push((inputs[0], d));
            }
            OpKind::AbsL1Sum => {
                let g0 = gd[0];
                let d = xs[0].data().iter().map(|x| sign(*x) * g0).collect();
                out.push((inputs[0], RealTensor::new(xs[0].shape(), d)?));
            }
            OpKind::Sum => {
                out.push((inputs[0], RealTensor::filled(xs[0].shape(), gd[0])));
            }
            OpKind::ForwardDiffX | OpKind::ForwardDiffY => {
                let s = xs[0].shape();
                let (d1, d2) = (s[s.len() - 2], s[s.len() - 1]);
                let mut d = RealTensor::zeros(s);
                let along_x = kind == OpKind::ForwardDiffX;
                for (gp, dp) in gd.chunks_exact(d1 * d2).zip(d.data_mut().chunks_exact_mut(d1 * d2)) {
                    for a in 0..d1 {
                        for b in 0..d2 {
                            let here = a * d2 + b;
                            let next = if along_x {
                                (a + 1 < d1).then(|| here + d2)
                            } else {
                                (b + 1 < d2).then(|| here + 1)
                            };
                            if let Some(next) = next {
                                dp[next] = dp[next] + gp[here];
                                dp[here] = dp[here] - gp[here];
                            }
                        }
                    }
                }
                out.push((inputs[0], d));
            }
            OpKind::Reshape(_) => {
                out.push((inputs[0], g.clone().with_shape(xs[0].shape())));
            }
            OpKind::MonomialBasisApply => {
                let (basis, coeffs) = (xs[0], xs[1]);
                let kdim = *basis.shape().last().unwrap();
                let p = basis.len() / kdim;
                let m = coeffs.len() / kdim;
                if want[1] {
                    let mut dc = RealTensor::zeros(coeffs.shape());
                    T::gemm(
                        m,
                        p,
                        kdim,
                        gd,
                        (p as isize, 1),
                        basis.data(),
                        (kdim as isize, 1),
                        T::zero(),
                        dc.data_mut(),
                        (kdim as isize, 1),
                    );
                    out.push((inputs[1], dc));
                }
                if want[0] {
                    let mut db = RealTensor::zeros(basis.shape());
                    T::gemm(
                        p,
                        m,
                        kdim,
                        gd,
                        (1, p as isize),
                        coeffs.data(),
                        (kdim as isize, 1),
                        T::zero(),
                        db.data_mut(),
                        (kdim as isize, 1),
                    );
                    out.push((inputs[0], db));
                }
            }
            OpKind::Fft2 | OpKind::Ifft2 => unreachable!(),
        }
        Ok(out)
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn apply_line_mask<T: Real>(data: &mut [T], keep: &[bool]) {
    for row in data.chunks_exact_mut(keep.len()) {
        for (v, k) in row.iter_mut().zip(keep) {
            if !*k {
                *v = T::zero();
            }
        }
    }
}

fn same_shape<T: Real>(op: &'static str, a: &RealTensor<T>, b: &RealTensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn map<T: Real>(x: &RealTensor<T>, f: impl Fn(T) -> T) -> Result<RealTensor<T>> {
    RealTensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect())
}

fn zip<T: Real>(a: &RealTensor<T>, b: &RealTensor<T>, f: impl Fn(T, T) -> T) -> Result<RealTensor<T>> {
    RealTensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

/// Dense layer forward pass, `x·Wᵀ + b`, in fixed row blocks.
pub(crate) fn affine_forward<T: Real>(x: &[T], fan_in: usize, w: &[T], b: &[T], out: &mut [T]) {
    let fan_out = b.len();
    for (xb, yb) in x
        .chunks(AFFINE_ROW_BLOCK * fan_in)
        .zip(out.chunks_mut(AFFINE_ROW_BLOCK * fan_out))
    {
        let rows = xb.len() / fan_in;
        for row in yb.chunks_exact_mut(fan_out) {
            row.copy_from_slice(b);
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            xb,
            (fan_in as isize, 1),
            w,
            (1, fan_in as isize),
            T::one(),
            yb,
            (fan_out as isize, 1),
        );
    }
}

fn eval_op<T: Real>(kind: &OpKind<T>, x: &[&RealTensor<T>]) -> Result<(RealTensor<T>, Vec<T>)> {
    let none = Vec::new();
    Ok(match kind {
        OpKind::Affine => {
            let (inp, w, b) = (x[0], x[1], x[2]);
            if inp.shape().len() != 2 || w.shape().len() != 2 || b.shape().len() != 1 {
                return Err(Error::invalid(format!(
                    "affine expects x [rows, in], W [out, in], b [out]; got {:?}, {:?}, {:?}",
                    inp.shape(),
                    w.shape(),
                    b.shape()
                )));
            }
            let (rows, fan_in) = (inp.shape()[0], inp.shape()[1]);
            let fan_out = w.shape()[0];
            if w.shape()[1] != fan_in {
                return Err(Error::shape("affine weight", &[fan_out, fan_in], w.shape()));
            }
            if b.shape()[0] != fan_out {
                return Err(Error::shape("affine bias", &[fan_out], b.shape()));
            }
            let mut y = RealTensor::zeros(&[rows, fan_out]);
            affine_forward(inp.data(), fan_in, w.data(), b.data(), y.data_mut());
            (y, none)
        }
        OpKind::Sin => {
            let mut s = RealTensor::zeros(x[0].shape());
            let mut c = vec![T::zero(); x[0].len()];
            T::sin_cos_slice(x[0].data(), s.data_mut(), &mut c);
            (s, c)
        }
        OpKind::Relu => (map(x[0], |v| if v > T::zero() { v } else { T::zero() })?, none),
        OpKind::Add => {
            same_shape("add", x[0], x[1])?;
            (zip(x[0], x[1], |a, b| a + b)?, none)
        }
        OpKind::Sub => {
            same_shape("sub", x[0], x[1])?;
            (zip(x[0], x[1], |a, b| a - b)?, none)
        }
        OpKind::Mul => {
            same_shape("mul", x[0], x[1])?;
            (zip(x[0], x[1], |a, b| a * b)?, none)
        }
        OpKind::ScalarMul(s) => (map(x[0], |v| v * *s)?, none),
        OpKind::Select(index) => {
            let s = x[0].shape();
            if s.is_empty() || *index >= s[0] {
                return Err(Error::invalid(format!("select index {index} out of range for shape {s:?}")));
            }
            let n = x[0].len() / s[0];
            let data = x[0].data()[index * n..(index + 1) * n].to_vec();
            (RealTensor::new(&s[1..], data)?, none)
        }
        OpKind::MaskSelect(keep) => {
            let s = x[0].shape();
            if s.last() != Some(&keep.len()) {
                return Err(Error::shape(
                    "mask_select",
                    &[keep.len()],
                    &[s.last().copied().unwrap_or(0)],
                ));
            }
            let mut y = x[0].clone();
            apply_line_mask(y.data_mut(), keep);
            (y, none)
        }
        OpKind::AbsL1Sum => {
            let s = x[0].data().iter().fold(T::zero(), |acc, v| acc + v.abs());
            (RealTensor::scalar(s), none)
        }
        OpKind::Sum => {
            let s = x[0].data().iter().fold(T::zero(), |acc, v| acc + *v);
            (RealTensor::scalar(s), none)
        }
        OpKind::ForwardDiffX | OpKind::ForwardDiffY => {
            let s = x[0].shape();
            if s.len() < 2 {
                return Err(Error::invalid("forward differences need at least two axes"));
            }
            let (d1, d2) = (s[s.len() - 2], s[s.len() - 1]);
            let along_x = *kind == OpKind::ForwardDiffX;
            let mut y = RealTensor::zeros(s);
            for (src, dst) in x[0]
                .data()
                .chunks_exact(d1 * d2)
                .zip(y.data_mut().chunks_exact_mut(d1 * d2))
            {
                for a in 0..d1 {
                    for b in 0..d2 {
                        let here = a * d2 + b;
                        if along_x && a + 1 < d1 {
                            dst[here] = src[here + d2] - src[here];
                        } else if !along_x && b + 1 < d2 {
                            dst[here] = src[here + 1] - src[here];
                        }
                    }
                }
            }
            (y, none)
        }
        OpKind::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != x[0].len() {
                return Err(Error::shape("reshape", shape, x[0].shape()));
            }
            (x[0].clone().with_shape(shape), none)
        }
        OpKind::MonomialBasisApply => {
            let (basis, coeffs) = (x[0], x[1]);
            let bs = basis.shape();
            if bs.len() != 3 {
                return Err(Error::invalid(format!("basis must be [d1, d2, K], got {bs:?}")));
            }
            let kdim = bs[2];
            if coeffs.shape().last() != Some(&kdim) {
                return Err(Error::shape(
                    "basis_apply coefficients",
                    &[kdim],
                    &[coeffs.shape().last().copied().unwrap_or(0)],
                ));
            }
            let p = bs[0] * bs[1];
            let m = coeffs.len() / kdim;
            let mut shape = coeffs.shape()[..coeffs.shape().len() - 1].to_vec();
            shape.extend_from_slice(&bs[..2]);
            let mut y = RealTensor::zeros(&shape);
            T::gemm(
                m,
                kdim,
                p,
                coeffs.data(),
                (kdim as isize, 1),
                basis.data(),
                (1, kdim as isize),
                T::zero(),
                y.data_mut(),
                (p as isize, 1),
            );
            (y, none)
        }
        OpKind::Fft2 | OpKind::Ifft2 => unreachable!("handled by Tape::eval"),
    })
}
