//! Losses, the two Adam optimizers and the full-grid training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coilmodel::{build_basis, eval_sensitivities, init_poly, PolyCoefficients};
use crate::coords::make_grid;
use crate::error::{Error, Result};
use crate::inr_model::{
    eval_image_on, init_relu_mlp, init_siren, Activation, Architecture, Checkpoint, InrLeaves, InrParameters,
};
use crate::mrop::{forward_model, KSpaceVolume};
use crate::tensorgrad::{ComplexNode, NodeId, Real, RealTensor, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Named ablations of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoTv,
    NoKc,
    Relu,
    ReluPe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoTv, Variant::NoKc, Variant::Relu, Variant::ReluPe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTv => "no-tv",
            Variant::NoKc => "no-kc",
            Variant::Relu => "relu",
            Variant::ReluPe => "relu-pe",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Every tunable of one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub w0: f64,
    pub lambda: f64,
    pub iters: usize,
    pub lr_inr: f64,
    pub lr_inr_decay: f64,
    pub lr_poly: f64,
    pub lr_poly_decay: f64,
    pub decay_every: usize,
    pub poly_order: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub use_pe: bool,
    pub pe_bands: usize,
    pub use_tv: bool,
    pub use_kc: bool,
    pub seed_inr: u64,
    pub seed_poly: u64,
    pub precision: Precision,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            w0: 31.0,
            lambda: 3.8,
            iters: 1500,
            lr_inr: 1e-4,
            lr_inr_decay: 0.8,
            lr_poly: 0.1,
            lr_poly_decay: 0.5,
            decay_every: 500,
            poly_order: 15,
            hidden_layers: 6,
            hidden_width: 256,
            activation: Activation::Sine,
            use_pe: false,
            pe_bands: 6,
            use_tv: true,
            use_kc: true,
            seed_inr: 0,
            seed_poly: 0,
            precision: Precision::Single,
        }
    }
}

impl ReconConfig {
    /// Four hidden layers of width 128, for quick runs.
    pub fn smoke() -> Self {
        Self {
            hidden_layers: 4,
            hidden_width: 128,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full => {}
            Variant::NoTv => self.use_tv = false,
            Variant::NoKc => self.use_kc = false,
            Variant::Relu => self.activation = Activation::Relu,
            Variant::ReluPe => {
                self.activation = Activation::Relu;
                self.use_pe = true;
            }
        }
        self
    }

    pub fn architecture(&self) -> Architecture {
        let input = if self.use_pe { 4 * self.pe_bands } else { 2 };
        Architecture::new(input, self.hidden_width, self.hidden_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.iters == 0 {
            return bad("iters must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        for (name, lr) in [("lr_inr", self.lr_inr), ("lr_poly", self.lr_poly)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {lr}"));
            }
        }
        for (name, f) in [("lr_inr_decay", self.lr_inr_decay), ("lr_poly_decay", self.lr_poly_decay)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if self.activation == Activation::Sine && !(self.w0 > 0.0 && self.w0.is_finite()) {
            return bad(format!("w0 must be positive, got {}", self.w0));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return bad("network needs at least one hidden layer of positive width".into());
        }
        if self.use_pe && self.pe_bands == 0 {
            return bad("positional encoding needs at least one band".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Component-wise L1 of `predicted − measured` over every coil and entry.
/// `predicted` holds the masked model k-space, so unkept entries are zero
/// on both sides.
pub fn dc_loss<T: Real>(predicted: &[ComplexNode], measured: &KSpaceVolume, tape: &mut Tape<T>) -> Result<NodeId> {
    if predicted.len() != measured.coils {
        return Err(Error::invalid(format!(
            "{} predicted coils for {} measured",
            predicted.len(),
            measured.coils
        )));
    }
    let shape = [measured.d1, measured.d2];
    let mut total = None;
    for (j, pred) in predicted.iter().enumerate() {
        let coil = measured.coil(j);
        let re = RealTensor::new(&shape, coil.iter().map(|z| T::lit(z.re)).collect())?;
        let im = RealTensor::new(&shape, coil.iter().map(|z| T::lit(z.im)).collect())?;
        for (p, m) in [(pred.re, re), (pred.im, im)] {
            let m = tape.constant(m);
            let r = tape.sub(p, m)?;
            let l = tape.abs_l1_sum(r)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
    }
    Ok(total.expect("at least one coil"))
}

/// Anisotropic TV: `Σ |Δx re| + |Δy re| + |Δx im| + |Δy im|` with forward
/// differences and a zero difference at the last row and column.
pub fn tv_loss<T: Real>(image: ComplexNode, tape: &mut Tape<T>) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(4);
    for part in [image.re, image.im] {
        let dx = tape.diff_x(part)?;
        let dy = tape.diff_y(part)?;
        terms.push(tape.abs_l1_sum(dx)?);
        terms.push(tape.abs_l1_sum(dy)?);
    }
    let a = tape.add(terms[0], terms[1])?;
    let b = tape.add(terms[2], terms[3])?;
    tape.add(a, b)
}

/// `dc + λ·tv`, or `dc` alone when `tv` is `None`.
pub fn total_loss<T: Real>(dc: NodeId, tv: Option<NodeId>, lambda: f64, tape: &mut Tape<T>) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    match tv {
        Some(tv) => {
            let weighted = tape.scale(tv, T::lit(lambda))?;
            tape.add(dc, weighted)
        }
        None => Ok(dc),
    }
}

/// `initial · factor^⌊t/every⌋`.
pub fn lr_schedule(initial: f64, factor: f64, every: usize, t: usize) -> f64 {
    initial * factor.powi((t / every) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

fn first_non_finite<T: Real>(values: &[T]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

/// One bias-corrected Adam update of `param` at step `t ≥ 1`:
/// `p ← p − lr/(1−β1ᵗ) · m / (√v/√(1−β2ᵗ) + ε)`.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    t: usize,
    hyper: AdamHyper,
    leaf: &str,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step count starts at 1"));
    }
    if param.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::shape("adam step", &[param.len()], &[grad.len()]));
    }
    if let Some(index) = first_non_finite(grad) {
        return Err(Error::NonFiniteGradient {
            leaf: leaf.to_string(),
            index,
        });
    }
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let one_b1 = T::lit(1.0 - hyper.beta1);
    let one_b2 = T::lit(1.0 - hyper.beta2);
    let step = T::lit(lr / (1.0 - hyper.beta1.powi(t as i32)));
    let bc2_sqrt = T::lit((1.0 - hyper.beta2.powi(t as i32)).sqrt());
    let eps = T::lit(hyper.eps);
    for (((p, g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + one_b1 * *g;
        *v = b2 * *v + one_b2 * *g * *g;
        let denom = v.sqrt() / bc2_sqrt + eps;
        *p = *p - step * (*m / denom);
    }
    Ok(())
}

/// Adam over a fixed list of tensors sharing one learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub hyper: AdamHyper,
    pub states: Vec<AdamState<T>>,
    pub t: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            hyper: AdamHyper::default(),
            states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
            t: 0,
        }
    }

    /// Updates every tensor; on a non-finite gradient nothing is changed.
    pub fn step(&mut self, params: Vec<&mut RealTensor<T>>, grads: &[&RealTensor<T>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::invalid("optimizer tensor count changed"));
        }
        for (g, name) in grads.iter().zip(names) {
            if let Some(index) = first_non_finite(g.data()) {
                return Err(Error::NonFiniteGradient {
                    leaf: name.clone(),
                    index,
                });
            }
        }
        self.t += 1;
        for (((p, g), s), name) in params.into_iter().zip(grads).zip(&mut self.states).zip(names) {
            adam_step(p.data_mut(), g.data(), s, lr, self.t, self.hyper, name)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub dc: f64,
    pub tv: f64,
    pub total: f64,
    pub lr_inr: f64,
    pub lr_poly: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,L_DC,L_TV,L_tot,lr_inr,lr_poly,seconds\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:.6}",
                r.iteration, r.dc, r.tv, r.total, r.lr_inr, r.lr_poly, r.seconds
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Keeps freed training buffers mapped so each iteration does not fault
/// its tensors back in from the kernel.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn retain_freed_memory() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn retain_freed_memory() {}

/// Node ids of one recorded training objective.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub image: ComplexNode,
    pub leaves: InrLeaves,
    pub coeffs: NodeId,
    pub dc: NodeId,
    pub tv: NodeId,
    pub total: NodeId,
}

/// Records the full objective on `tape`: network image, polynomial maps,
/// masked forward model, both losses and their weighted sum. The TV term
/// is always recorded but only enters `total` when `cfg.use_tv` is set.
pub fn record_loss<T: Real>(
    inr: &InrParameters<T>,
    poly: &PolyCoefficients<T>,
    input: RealTensor<T>,
    basis: RealTensor<T>,
    measured: &KSpaceVolume,
    cfg: &ReconConfig,
    tape: &mut Tape<T>,
) -> Result<LossGraph> {
    let (image, leaves) = eval_image_on(inr, input, measured.d1, measured.d2, tape)?;
    let coeffs = tape.leaf("poly.coeffs", poly.coeffs.clone());
    let basis = tape.constant(basis);
    let sens = eval_sensitivities(coeffs, basis, tape)?;
    let pred = forward_model(image, &sens, &measured.mask, tape)?;
    let dc = dc_loss(&pred, measured, tape)?;
    let tv = tv_loss(image, tape)?;
    let total = total_loss(dc, cfg.use_tv.then_some(tv), cfg.lambda, tape)?;
    Ok(LossGraph {
        image,
        leaves,
        coeffs,
        dc,
        tv,
        total,
    })
}

/// Fresh parameters for `cfg`, in `T`.
pub fn init_params<T: Real>(cfg: &ReconConfig, coils: usize) -> Result<(InrParameters<T>, PolyCoefficients<T>)> {
    let arch = cfg.architecture();
    let mut inr = match cfg.activation {
        Activation::Sine => init_siren::<T>(arch, cfg.w0, cfg.seed_inr)?,
        Activation::Relu => init_relu_mlp::<T>(arch, cfg.seed_inr)?,
    };
    if cfg.use_pe {
        inr = inr.with_positional_encoding(cfg.pe_bands)?;
    }
    Ok((inr, init_poly::<T>(coils, cfg.poly_order, cfg.seed_poly)?))
}

fn checkpoint_of<T: Real>(d1: usize, d2: usize, inr: &InrParameters<T>, poly: &PolyCoefficients<T>) -> Checkpoint {
    Checkpoint {
        d1,
        d2,
        inr: inr.cast(),
        poly: poly.cast(),
    }
}

/// Jointly fits the image network and coil polynomials to `measured`.
pub fn train(measured: &KSpaceVolume, cfg: &ReconConfig) -> Result<TrainedModel> {
    match cfg.precision {
        Precision::Single => train_as::<f32>(measured, cfg, None),
        Precision::Double => train_as::<f64>(measured, cfg, None),
    }
}

/// [`train`] in precision `T`, optionally starting from given parameters.
pub fn train_as<T: Real>(
    measured: &KSpaceVolume,
    cfg: &ReconConfig,
    start: Option<(InrParameters<T>, PolyCoefficients<T>)>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if measured.mask.kept_count() == 0 {
        return Err(Error::invalid("measured k-space has no kept lines"));
    }
    retain_freed_memory();
    let (d1, d2) = (measured.d1, measured.d2);
    let grid = make_grid(d1, d2)?;
    let (mut inr, mut poly) = match start {
        Some(p) => p,
        None => init_params::<T>(cfg, measured.coils)?,
    };
    if poly.coils != measured.coils || poly.order != cfg.poly_order {
        return Err(Error::invalid("polynomial coefficients do not match the data and config"));
    }
    let input = inr.network_input(&grid)?;
    let basis = build_basis(&grid, cfg.poly_order).to_tensor::<T>();
    let inr_names = inr.tensor_names();
    let poly_names = vec!["poly.coeffs".to_string()];
    let mut adam_inr = Adam::<T>::new(&inr.tensors().iter().map(|t| t.len()).collect::<Vec<_>>());
    let mut adam_poly = Adam::<T>::new(&[poly.coeffs.len()]);
    let mut history = TrainHistory::default();
    let mut last_good = checkpoint_of(d1, d2, &inr, &poly);
    let clock = Instant::now();

    for t in 0..cfg.iters {
        let lr_inr = lr_schedule(cfg.lr_inr, cfg.lr_inr_decay, cfg.decay_every, t);
        let lr_poly = lr_schedule(cfg.lr_poly, cfg.lr_poly_decay, cfg.decay_every, t);

        let mut tape = Tape::<T>::new();
        let LossGraph {
            leaves,
            coeffs: coeff,
            dc,
            tv,
            total,
            ..
        } = record_loss(&inr, &poly, input.clone(), basis.clone(), measured, cfg, &mut tape)?;

        let value = |id: NodeId| tape.value(id).data()[0].as_f64();
        let (dc_v, tv_v, total_v) = (value(dc), value(tv), value(total));
        if !total_v.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                last_good: Box::new(last_good),
            });
        }
        last_good = checkpoint_of(d1, d2, &inr, &poly);

        let grads = tape.backward(total)?;
        drop(tape);
        let inr_grads: Vec<&RealTensor<T>> = leaves.0.iter().map(|id| grads.get(*id).expect("leaf gradient")).collect();
        adam_inr.step(inr.tensors_mut(), &inr_grads, &inr_names, lr_inr)?;
        let poly_grad = grads.get(coeff).expect("leaf gradient");
        adam_poly.step(vec![&mut poly.coeffs], &[poly_grad], &poly_names, lr_poly)?;

        history.records.push(HistoryRecord {
            iteration: t,
            dc: dc_v,
            tv: tv_v,
            total: total_v,
            lr_inr,
            lr_poly,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainedModel {
        checkpoint: checkpoint_of(d1, d2, &inr, &poly),
        history,
    })
}
