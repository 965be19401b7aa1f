//! Parameter storage, forward pass and reverse-mode gradients.

use rand::Rng;

use super::layers::{self, BnCache};
use super::quant::{fake_quant_act, fake_quant_weights, ActRange, QParams};
use super::tensor::{Scalar, Tensor};
use super::{ArchSpec, Batch, FcOp, FusionKind, FusionVariant, Init, NnetError, Op, ParamSpec, Plan, BN_EPS, BN_MOMENTUM};
use crate::rng;

/// How batch normalization and quantization behave in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Batch statistics; the cache carries them for the running update.
    Train,
    /// Running statistics.
    Eval,
    /// BN folded into the preceding conv with running statistics, weights
    /// and activations snapped to the 8-bit grid. One [`QParams`] per conv
    /// input plus one for the feature vector. Gradients pass straight
    /// through the rounding.
    FakeQuant(&'a [QParams]),
}

#[derive(Debug, Clone)]
pub(crate) struct Fold<S> {
    bn: usize,
    /// `gamma / sqrt(var + eps)` per output channel.
    scale: Vec<S>,
    inv_std: Vec<S>,
    mean: Vec<S>,
}

enum OpCache<S> {
    Conv { col: Vec<S>, w_eff: Option<Vec<S>>, in_mask: Option<Vec<bool>>, fold: Option<Fold<S>> },
    Bn(BnCache<S>),
    Relu { y: Vec<S> },
    Folded,
}

pub(crate) struct FcCache<S> {
    x: Vec<S>,
    y: Vec<S>,
}

/// Intermediate values of one forward pass, consumed by
/// [`Model::backward`].
pub struct Cache<S> {
    b: usize,
    state_width: usize,
    ops: Vec<OpCache<S>>,
    feat_mask: Option<Vec<bool>>,
    /// Value range at every quantization point, before any snapping. Not
    /// recorded in training mode.
    taps: Vec<ActRange>,
    branch: Vec<FcCache<S>>,
    head: Vec<FcCache<S>>,
}

impl<S: Scalar> Cache<S> {
    /// Which ReLU units were active. Finite-difference checks use this to
    /// skip probes that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let OpCache::Relu { y } = op {
                out.extend(y.iter().map(|v| *v > S::zero()));
            }
        }
        for c in self.branch.iter().chain(&self.head) {
            out.extend(c.y.iter().map(|v| *v > S::zero()));
        }
        out
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn activation_ranges(&self) -> &[ActRange] {
        &self.taps
    }
}

/// Gradients with respect to every parameter and to the state input.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub params: Vec<Tensor<S>>,
    pub state: Tensor<S>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub arch: ArchSpec,
    pub variant: FusionVariant,
    pub params: Vec<Tensor<S>>,
    /// BN running mean and variance, alternating per BN layer.
    pub buffers: Vec<Tensor<S>>,
    pub(crate) plan: Plan,
}

impl<S: Scalar> Model<S> {
    /// Fresh model. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so tensors that exist in several variants start out
    /// identical across them.
    pub fn new(arch: &ArchSpec, variant: &FusionVariant, seed: u64) -> Result<Self, NnetError> {
        let plan = Plan::new(arch, variant)?;
        let params = plan
            .specs
            .iter()
            .map(|spec| {
                let n = spec.len();
                let data = match spec.init {
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                    Init::HeUniform { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let mut r = rng::stream(seed, &[rng::TAG_INIT, fnv1a(&spec.name)]);
                        (0..n).map(|_| S::lit(r.random_range(-bound..bound))).collect()
                    }
                };
                Tensor::new(spec.shape.clone(), data).expect("spec shape")
            })
            .collect();
        let buffers = plan
            .buffers
            .iter()
            .enumerate()
            .map(|(i, &c)| Tensor::filled(vec![c], if i % 2 == 0 { S::zero() } else { S::one() }))
            .collect();
        Ok(Self { arch: arch.clone(), variant: *variant, params, buffers, plan })
    }

    /// Assembles a model from stored tensors, checking every shape.
    pub fn from_parts(
        arch: &ArchSpec,
        variant: &FusionVariant,
        params: Vec<Tensor<S>>,
        buffers: Vec<Tensor<S>>,
    ) -> Result<Self, NnetError> {
        let plan = Plan::new(arch, variant)?;
        if params.len() != plan.specs.len() || buffers.len() != plan.buffers.len() {
            return Err(NnetError::Shape(format!(
                "expected {} params and {} buffers, got {} and {}",
                plan.specs.len(),
                plan.buffers.len(),
                params.len(),
                buffers.len()
            )));
        }
        for (p, s) in params.iter().zip(&plan.specs) {
            if p.shape() != s.shape.as_slice() {
                return Err(NnetError::Shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, p.shape())));
            }
        }
        for (b, &n) in buffers.iter().zip(&plan.buffers) {
            if b.shape() != [n] {
                return Err(NnetError::Shape(format!("buffer: expected [{n}], got {:?}", b.shape())));
            }
        }
        Ok(Self { arch: arch.clone(), variant: *variant, params, buffers, plan })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.plan.specs
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.plan.specs.iter().position(|s| s.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn outputs(&self) -> usize {
        self.plan.outputs()
    }

    /// Number of activation quantization points (conv inputs plus features).
    pub fn n_quant_points(&self) -> usize {
        self.plan.conv_stages().len() + 1
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            arch: self.arch.clone(),
            variant: self.variant,
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            plan: self.plan.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(Tensor::is_finite)
    }

    pub(crate) fn check_batch(&self, batch: &Batch<S>) -> Result<(), NnetError> {
        let p = &self.plan;
        let want = [batch.len(), p.img_c, p.h, p.w];
        if batch.images.shape() != want {
            return Err(NnetError::Shape(format!("images {:?}, model expects {:?}", batch.images.shape(), want)));
        }
        let st = batch.states.shape();
        if st.len() != 2 || st[0] != batch.len() {
            return Err(NnetError::Shape(format!("states {:?} for batch of {}", st, batch.len())));
        }
        if self.variant.uses_state() && st[1] != self.variant.state_dim {
            return Err(NnetError::Shape(format!("state width {}, model expects {}", st[1], self.variant.state_dim)));
        }
        Ok(())
    }

    /// `[B, C, H, W]` images (plus broadcast state channels) to `[C, B, H, W]`.
    pub(crate) fn backbone_input(&self, batch: &Batch<S>) -> Vec<S> {
        let p = &self.plan;
        let b = batch.len();
        let hw = p.h * p.w;
        let mut x = vec![S::zero(); p.in_c * b * hw];
        let img = batch.images.data();
        for bi in 0..b {
            for c in 0..p.img_c {
                x[(c * b + bi) * hw..(c * b + bi + 1) * hw]
                    .copy_from_slice(&img[(bi * p.img_c + c) * hw..(bi * p.img_c + c + 1) * hw]);
            }
            for j in 0..p.in_c - p.img_c {
                let v = batch.states.data()[bi * self.variant.state_dim + j];
                x[((p.img_c + j) * b + bi) * hw..((p.img_c + j) * b + bi + 1) * hw].fill(v);
            }
        }
        x
    }

    pub fn forward(&self, batch: &Batch<S>, mode: Mode<'_>) -> Result<(Tensor<S>, Cache<S>), NnetError> {
        self.check_batch(batch)?;
        let qps = match mode {
            Mode::FakeQuant(q) => {
                if q.len() != self.n_quant_points() {
                    return Err(NnetError::Shape(format!(
                        "{} quantization points, model has {}",
                        q.len(),
                        self.n_quant_points()
                    )));
                }
                Some(q)
            }
            _ => None,
        };
        let p = &self.plan;
        let b = batch.len();
        let mut x = self.backbone_input(batch);
        let mut ops: Vec<OpCache<S>> = Vec::with_capacity(p.backbone.len());
        let mut qi = 0;
        let record_taps = !matches!(mode, Mode::Train);
        let mut taps = Vec::with_capacity(self.n_quant_points());
        for (i, op) in p.backbone.iter().enumerate() {
            match *op {
                Op::Conv { w, g } => {
                    if record_taps {
                        taps.push(ActRange::of(&x));
                    }
                    let in_mask = qps.map(|q| {
                        qi += 1;
                        fake_quant_act(&mut x, q[qi - 1])
                    });
                    let bn_next = match p.backbone.get(i + 1) {
                        Some(&Op::Bn { gamma, beta, stat, .. }) => Some((i + 1, gamma, beta, stat)),
                        _ => None,
                    };
                    let (w_eff, fold, bias) = match (qps, bn_next) {
                        (Some(_), Some((bn, gamma, beta, stat))) => {
                            let (w_f, fold, bias) = self.fold_bn(w, g.out_c, bn, gamma, beta, stat);
                            (Some(fake_quant_weights(&w_f)), Some(fold), Some(bias))
                        }
                        (Some(_), None) => (Some(fake_quant_weights(self.params[w].data())), None, None),
                        (None, _) => (None, None, None),
                    };
                    let wt = w_eff.as_deref().unwrap_or(self.params[w].data());
                    let (mut y, col) = layers::conv_forward(&x, wt, &g, b);
                    if let Some(bias) = &bias {
                        let n = b * g.out_h * g.out_w;
                        for (o, &bo) in bias.iter().enumerate() {
                            for v in &mut y[o * n..(o + 1) * n] {
                                *v = *v + bo;
                            }
                        }
                    }
                    ops.push(OpCache::Conv { col, w_eff, in_mask, fold });
                    x = y;
                }
                Op::Bn { gamma, beta, stat, c } => {
                    if qps.is_some() {
                        ops.push(OpCache::Folded);
                        continue;
                    }
                    let running = match mode {
                        Mode::Eval => Some((self.buffers[stat].data(), self.buffers[stat + 1].data())),
                        _ => None,
                    };
                    let (y, cache) =
                        layers::bn_forward(&x, c, self.params[gamma].data(), self.params[beta].data(), running, BN_EPS);
                    ops.push(OpCache::Bn(cache));
                    x = y;
                }
                Op::Relu => {
                    layers::relu_inplace(&mut x);
                    ops.push(OpCache::Relu { y: x.clone() });
                }
            }
        }
        if record_taps {
            taps.push(ActRange::of(&x));
        }
        let feat_mask = qps.map(|q| fake_quant_act(&mut x, q[qi]));
        let [fc, fh, fw] = p.feat_shape;
        let features = layers::flatten(&x, fc, b, fh * fw);
        let (out, branch, head) = self.head_forward(&features, batch.states.data(), b);
        let cache = Cache { b, state_width: batch.states.shape()[1], ops, feat_mask, taps, branch, head };
        Ok((Tensor::new(vec![b, p.outputs()], out).expect("head width"), cache))
    }

    /// Branch and head on `[B, F]` features.
    #[allow(clippy::type_complexity)]
    pub(crate) fn head_forward(&self, features: &[S], states: &[S], b: usize) -> (Vec<S>, Vec<FcCache<S>>, Vec<FcCache<S>>) {
        let p = &self.plan;
        let run = |ops: &[FcOp], mut x: Vec<S>| {
            let mut caches = Vec::with_capacity(ops.len());
            for f in ops {
                let mut y =
                    layers::fc_forward(&x, self.params[f.w].data(), self.params[f.b].data(), b, f.inp, f.out);
                if f.relu {
                    layers::relu_inplace(&mut y);
                }
                caches.push(FcCache { x, y: y.clone() });
                x = y;
            }
            (x, caches)
        };
        let (extra, branch) = match self.variant.kind {
            FusionKind::SingleNeuron | FusionKind::FullyConnected => (states.to_vec(), Vec::new()),
            FusionKind::MlpBranch => run(&p.branch, states.to_vec()),
            FusionKind::Stateless | FusionKind::DoubleInput => (Vec::new(), Vec::new()),
        };
        let fused = if p.extra > 0 { layers::concat_rows(features, p.feat, &extra, p.extra, b) } else { features.to_vec() };
        let (out, head) = run(&p.head, fused);
        (out, branch, head)
    }

    /// Folds BN (running statistics) into conv `w`: returns the folded
    /// weights, the fold factors and the folded bias.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn fold_bn(&self, w: usize, out_c: usize, bn: usize, gamma: usize, beta: usize, stat: usize) -> (Vec<S>, Fold<S>, Vec<S>) {
        let wd = self.params[w].data();
        let per = wd.len() / out_c;
        let (g, bt) = (self.params[gamma].data(), self.params[beta].data());
        let (rm, rv) = (self.buffers[stat].data(), self.buffers[stat + 1].data());
        let inv_std: Vec<S> = rv.iter().map(|&v| S::one() / (v + S::lit(BN_EPS)).sqrt()).collect();
        let scale: Vec<S> = g.iter().zip(&inv_std).map(|(&a, &b)| a * b).collect();
        let mut w_f = wd.to_vec();
        for (o, chunk) in w_f.chunks_mut(per).enumerate() {
            for v in chunk {
                *v = *v * scale[o];
            }
        }
        let bias = (0..out_c).map(|o| bt[o] - rm[o] * scale[o]).collect();
        (w_f, Fold { bn, scale, inv_std, mean: rm.to_vec() }, bias)
    }

    /// Inference with running statistics.
    pub fn predict(&self, batch: &Batch<S>) -> Result<Tensor<S>, NnetError> {
        Ok(self.forward(batch, Mode::Eval)?.0)
    }

    /// Reverse pass for `d_out = dL/d(outputs)`.
    pub fn backward(&self, cache: &Cache<S>, d_out: &Tensor<S>) -> Grads<S> {
        let p = &self.plan;
        let b = cache.b;
        assert_eq!(d_out.shape(), [b, p.outputs()], "output gradient shape");
        let mut grads: Vec<Tensor<S>> = self.params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut put = |idx: usize, g: Vec<S>| grads[idx].data_mut().copy_from_slice(&g);

        let back = |ops: &[FcOp], caches: &[FcCache<S>], mut d: Vec<S>, put: &mut dyn FnMut(usize, Vec<S>)| {
            for (f, c) in ops.iter().zip(caches).rev() {
                if f.relu {
                    layers::relu_backward_inplace(&mut d, &c.y);
                }
                let (dx, dw, db) = layers::fc_backward(&d, &c.x, self.params[f.w].data(), b, f.inp, f.out);
                put(f.w, dw);
                put(f.b, db);
                d = dx;
            }
            d
        };
        let d_fused = back(&p.head, &cache.head, d_out.data().to_vec(), &mut put);
        let (mut d_feat, d_extra) = if p.extra > 0 {
            layers::split_rows(&d_fused, p.feat, p.extra, b)
        } else {
            (d_fused, Vec::new())
        };
        let mut d_state = vec![S::zero(); b * cache.state_width];
        match self.variant.kind {
            FusionKind::SingleNeuron | FusionKind::FullyConnected => d_state = d_extra,
            FusionKind::MlpBranch => d_state = back(&p.branch, &cache.branch, d_extra, &mut put),
            FusionKind::Stateless | FusionKind::DoubleInput => {}
        }

        if let Some(mask) = &cache.feat_mask {
            apply_mask(&mut d_feat, mask);
        }
        let [fc, fh, fw] = p.feat_shape;
        let mut d = layers::unflatten(&d_feat, fc, b, fh * fw);
        let double = self.variant.kind == FusionKind::DoubleInput;
        for (i, (op, oc)) in p.backbone.iter().zip(&cache.ops).enumerate().rev() {
            match (op, oc) {
                (Op::Relu, OpCache::Relu { y }) => layers::relu_backward_inplace(&mut d, y),
                (&Op::Bn { gamma, beta, .. }, OpCache::Bn(bc)) => {
                    let (dx, dg, db) = layers::bn_backward(&d, bc, self.params[gamma].data());
                    put(gamma, dg);
                    put(beta, db);
                    d = dx;
                }
                (_, OpCache::Folded) => {}
                (&Op::Conv { w, g }, OpCache::Conv { col, w_eff, in_mask, fold }) => {
                    let need_dx = i > 0 || double;
                    let wt = w_eff.as_deref().unwrap_or(self.params[w].data());
                    let (mut dw, dx) = layers::conv_backward(&d, col, wt, &g, b, need_dx);
                    if let Some(f) = fold {
                        let Op::Bn { gamma, beta, .. } = p.backbone[f.bn] else { unreachable!("fold follows bn") };
                        let n = b * g.out_h * g.out_w;
                        let per = g.rows();
                        let wd = self.params[w].data();
                        let mut dg = vec![S::zero(); g.out_c];
                        let mut dbeta = vec![S::zero(); g.out_c];
                        for o in 0..g.out_c {
                            let db_o: S = d[o * n..(o + 1) * n].iter().copied().sum();
                            let dw_o = &mut dw[o * per..(o + 1) * per];
                            let dot: S = dw_o.iter().zip(&wd[o * per..(o + 1) * per]).map(|(&a, &c)| a * c).sum();
                            dg[o] = (dot - db_o * f.mean[o]) * f.inv_std[o];
                            dbeta[o] = db_o;
                            for v in dw_o.iter_mut() {
                                *v = *v * f.scale[o];
                            }
                        }
                        put(gamma, dg);
                        put(beta, dbeta);
                    }
                    put(w, dw);
                    if let Some(mut dx) = dx {
                        if let Some(mask) = in_mask {
                            apply_mask(&mut dx, mask);
                        }
                        d = dx;
                    }
                }
                _ => unreachable!("cache out of step with plan"),
            }
        }
        if double {
            let hw = p.h * p.w;
            let sd = self.variant.state_dim;
            for bi in 0..b {
                for j in 0..sd {
                    let c = p.img_c + j;
                    d_state[bi * cache.state_width + j] = d[(c * b + bi) * hw..(c * b + bi + 1) * hw].iter().copied().sum();
                }
            }
        }
        Grads { params: grads, state: Tensor::new(vec![b, cache.state_width], d_state).expect("state grad shape") }
    }

    /// Folds the batch statistics of a training-mode pass into the BN
    /// running estimates (unbiased variance).
    pub fn update_running_stats(&mut self, cache: &Cache<S>) {
        let m = S::lit(BN_MOMENTUM);
        for (op, oc) in self.plan.backbone.iter().zip(&cache.ops) {
            if let (&Op::Bn { stat, .. }, OpCache::Bn(bc)) = (op, oc) {
                let Some((means, vars)) = &bc.batch_stats else { continue };
                let n = bc.xhat.len() / means.len();
                let unbias = if n > 1 { S::lit(n as f64 / (n as f64 - 1.0)) } else { S::one() };
                for (r, &v) in self.buffers[stat].data_mut().iter_mut().zip(means) {
                    *r = (S::one() - m) * *r + m * v;
                }
                for (r, &v) in self.buffers[stat + 1].data_mut().iter_mut().zip(vars) {
                    *r = (S::one() - m) * *r + m * v * unbias;
                }
            }
        }
    }
}

fn apply_mask<S: Scalar>(d: &mut [S], mask: &[bool]) {
    for (v, &keep) in d.iter_mut().zip(mask) {
        if !keep {
            *v = S::zero();
        }
    }
}
