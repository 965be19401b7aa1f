//! Central finite-difference verification of the analytic gradients.
//!
//! The probe loss is `L = sum(r * outputs)` for a fixed random `r`, so the
//! output gradient is `r` itself. Probes whose perturbation flips any ReLU
//! are skipped: the difference quotient is meaningless across a kink.

use rand::Rng;

use super::model::{Mode, Model};
use super::tensor::Tensor;
use super::{ArchSpec, Batch, FusionKind, FusionVariant, Layer, NnetError};
use crate::rng;

/// Relative step: `h = STEP * max(1, |p|)`.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Name of the coordinate with the largest error.
    pub worst: String,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn probe_loss(m: &Model<f64>, batch: &Batch<f64>, r: &[f64]) -> Result<(f64, Vec<bool>), NnetError> {
    let (out, cache) = m.forward(batch, Mode::Train)?;
    Ok((out.data().iter().zip(r).map(|(a, b)| a * b).sum(), cache.relu_pattern()))
}

/// Checks every parameter and (for stateful variants) every state input of
/// `model` on `batch`, in training mode.
pub fn check_model(model: &Model<f64>, batch: &Batch<f64>, seed: u64) -> Result<GradCheckReport, NnetError> {
    let mut rg = rng::stream(seed, &[0x6772_6164]);
    let (out, cache) = model.forward(batch, Mode::Train)?;
    let r: Vec<f64> = (0..out.len()).map(|_| rg.random_range(-1.0..1.0)).collect();
    let grads = model.backward(&cache, &Tensor::new(out.shape().to_vec(), r.clone())?);
    let base_pattern = cache.relu_pattern();

    let mut rep = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0, worst: String::new() };
    let record = |rep: &mut GradCheckReport, name: String, analytic: f64, plus, minus, h: f64| {
        let ((lp, pp), (lm, pm)): ((f64, Vec<bool>), (f64, Vec<bool>)) = (plus, minus);
        if pp != base_pattern || pm != base_pattern {
            rep.skipped += 1;
            return;
        }
        let e = rel_err(analytic, (lp - lm) / (2.0 * h));
        rep.checked += 1;
        if e > rep.max_rel_err {
            rep.max_rel_err = e;
            rep.worst = name;
        }
    };

    let mut m = model.clone();
    for (pi, spec) in model.param_specs().iter().enumerate() {
        for j in 0..spec.len() {
            let p0 = m.params[pi].data()[j];
            let h = STEP * p0.abs().max(1.0);
            m.params[pi].data_mut()[j] = p0 + h;
            let plus = probe_loss(&m, batch, &r)?;
            m.params[pi].data_mut()[j] = p0 - h;
            let minus = probe_loss(&m, batch, &r)?;
            m.params[pi].data_mut()[j] = p0;
            record(&mut rep, format!("{}[{j}]", spec.name), grads.params[pi].data()[j], plus, minus, h);
        }
    }
    if model.variant.uses_state() {
        let mut bt = batch.clone();
        for j in 0..bt.states.len() {
            let s0 = bt.states.data()[j];
            let h = STEP * s0.abs().max(1.0);
            bt.states.data_mut()[j] = s0 + h;
            let plus = probe_loss(model, &bt, &r)?;
            bt.states.data_mut()[j] = s0 - h;
            let minus = probe_loss(model, &bt, &r)?;
            bt.states.data_mut()[j] = s0;
            record(&mut rep, format!("state[{j}]"), grads.state.data()[j], plus, minus, h);
        }
    }
    Ok(rep)
}

/// Small randomized architecture: one or two conv stages with random
/// kernel, stride and channel counts, each optionally followed by BN and
/// ReLU.
pub fn random_arch(seed: u64) -> ArchSpec {
    let mut r = rng::stream(seed, &[0x6172_6368]);
    let h = r.random_range(5..=8);
    let w = r.random_range(5..=8);
    let mut layers = Vec::new();
    for _ in 0..r.random_range(1..=2) {
        let k = [1, 3][r.random_range(0..2)];
        layers.push(Layer::Conv { out_ch: r.random_range(1..=3), k, stride: r.random_range(1..=2), pad: k / 2 });
        if r.random_bool(0.7) {
            layers.push(Layer::BatchNorm);
        }
        if r.random_bool(0.7) {
            layers.push(Layer::Relu);
        }
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Fc { out: r.random_range(1..=3) });
    ArchSpec { name: "random".into(), input: [r.random_range(1..=2), h, w], layers }
}

/// A random batch matching `arch` with `state_dim` state columns.
pub fn random_batch(arch: &ArchSpec, b: usize, state_dim: usize, seed: u64) -> Batch<f64> {
    let mut r = rng::stream(seed, &[0x6261_7463]);
    let [c, h, w] = arch.input;
    let img = (0..b * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    let st = (0..b * state_dim).map(|_| r.random_range(-0.5..0.5)).collect();
    Batch {
        images: Tensor::new(vec![b, c, h, w], img).expect("image shape"),
        states: Tensor::new(vec![b, state_dim], st).expect("state shape"),
    }
}

/// One randomized repetition for `kind`: random arch, random init, random
/// batch of 3.
pub fn check_variant(kind: FusionKind, seed: u64) -> Result<GradCheckReport, NnetError> {
    let arch = random_arch(seed);
    let sd = if kind == FusionKind::Stateless { 0 } else { 1 + (seed as usize % 2) };
    let v = FusionVariant { kind, state_dim: sd };
    let model = Model::<f64>::new(&arch, &v, seed)?;
    check_model(&model, &random_batch(&arch, 3, sd, seed), seed)
}
