//! The regression network: a strided convolutional backbone, the five ways
//! of fusing a state vector into it, exact reverse-mode gradients, cost
//! accounting and 8-bit affine quantization.
//!
//! Activations inside the backbone are laid out `[C, B, H, W]` so that a
//! convolution over a whole batch is a single matrix product and batch
//! normalization sees each channel as one contiguous run.

mod io;
mod layers;
mod model;
mod quant;
mod tensor;

pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scenegen::Sample;

pub use io::{
    decode_model, decode_quant_model, encode_model, encode_quant_model, read_model_file, ModelFile, ModelFileError,
    ModelKind, MODEL_MAGIC, MODEL_VERSION,
};
pub use model::{Cache, Grads, Mode, Model};
pub use quant::{
    calibrate, dequantize_weights, fake_quant_weights, quantize, quantize_weights, quantize_with_ranges, ActRange,
    QConv, QParams, QuantModel,
};
pub use tensor::{matmul, Scalar, Tensor};

/// Width of the hidden layer of the `fully_connected` fusion head.
pub const FC_HIDDEN: usize = 32;
/// Width of both layers of the MLP state branch.
pub const MLP_HIDDEN: usize = 8;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("invalid fusion variant: {0}")]
    Variant(String),
    #[error("empty calibration batch")]
    EmptyCalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { out_ch: usize, k: usize, stride: usize, pad: usize },
    BatchNorm,
    Relu,
    Flatten,
    Fc { out: usize },
}

/// Layer list plus input shape `[C, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

fn conv_block(layers: &mut Vec<Layer>, out_ch: usize, k: usize, stride: usize) {
    layers.push(Layer::Conv { out_ch, k, stride, pad: k / 2 });
    layers.push(Layer::BatchNorm);
    layers.push(Layer::Relu);
}

impl ArchSpec {
    /// The runnable desk-scale network: three strided conv blocks on a
    /// 64x64 grayscale image, 2048 features, linear head.
    pub fn desknet() -> Self {
        let mut layers = Vec::new();
        conv_block(&mut layers, 8, 5, 2);
        conv_block(&mut layers, 16, 3, 2);
        conv_block(&mut layers, 32, 3, 2);
        layers.push(Layer::Flatten);
        layers.push(Layer::Fc { out: 4 });
        Self { name: "desknet".into(), input: [1, 64, 64], layers }
    }

    /// Shape-only stand-in for the nano-drone network used in cost
    /// accounting: 160x96 input, 5x5/32 stride-2 stem, eight convolutions,
    /// 1920 features, 4 outputs. Runnable, but not meant for training.
    pub fn frontnet_sym() -> Self {
        let mut layers = Vec::new();
        conv_block(&mut layers, 32, 5, 2); // 80x48
        conv_block(&mut layers, 32, 3, 2); // 40x24
        conv_block(&mut layers, 32, 3, 1);
        conv_block(&mut layers, 64, 3, 2); // 20x12
        conv_block(&mut layers, 64, 3, 1);
        conv_block(&mut layers, 128, 3, 2); // 10x6
        conv_block(&mut layers, 128, 3, 1);
        conv_block(&mut layers, 128, 3, 2); // 5x3
        layers.push(Layer::Flatten);
        layers.push(Layer::Fc { out: 4 });
        Self { name: "frontnet_sym".into(), input: [1, 96, 160], layers }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desknet" => Some(Self::desknet()),
            "frontnet_sym" => Some(Self::frontnet_sym()),
            _ => None,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Fc { out }) => *out,
            _ => 0,
        }
    }

    /// Checks the layer grammar and shape chain; returns the feature shape
    /// `[C, H, W]` at the flatten point.
    pub fn validate(&self) -> Result<[usize; 3], NnetError> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnetError::Arch(format!("empty input {:?}", self.input)));
        }
        let flat = self.layers.iter().filter(|l| matches!(l, Layer::Flatten)).count();
        if flat != 1 {
            return Err(NnetError::Arch(format!("expected exactly one flatten, found {flat}")));
        }
        let fpos = self.layers.iter().position(|l| matches!(l, Layer::Flatten)).unwrap();
        match &self.layers[fpos + 1..] {
            [Layer::Fc { out }] if *out > 0 => {}
            _ => return Err(NnetError::Arch("flatten must be followed by exactly one fc layer".into())),
        }
        let mut prev: Option<Layer> = None;
        for layer in &self.layers[..fpos] {
            match *layer {
                Layer::Conv { out_ch, k, stride, pad } => {
                    if out_ch == 0 || k == 0 || stride == 0 {
                        return Err(NnetError::Arch(format!("degenerate conv {layer:?}")));
                    }
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return Err(NnetError::Arch(format!("kernel {k} larger than padded {h}x{w}")));
                    }
                    h = (h + 2 * pad - k) / stride + 1;
                    w = (w + 2 * pad - k) / stride + 1;
                    c = out_ch;
                }
                Layer::BatchNorm => {
                    if !matches!(prev, Some(Layer::Conv { .. })) {
                        return Err(NnetError::Arch("batchnorm must directly follow a conv".into()));
                    }
                }
                Layer::Relu => {
                    if !matches!(prev, Some(Layer::Conv { .. } | Layer::BatchNorm)) {
                        return Err(NnetError::Arch("relu must follow a conv or batchnorm".into()));
                    }
                }
                Layer::Flatten | Layer::Fc { .. } => {
                    return Err(NnetError::Arch("fc layers are only allowed after flatten".into()))
                }
            }
            prev = Some(*layer);
        }
        Ok([c, h, w])
    }

    pub fn feature_width(&self) -> Result<usize, NnetError> {
        Ok(self.validate()?.iter().product())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionKind {
    Stateless,
    SingleNeuron,
    FullyConnected,
    DoubleInput,
    MlpBranch,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Stateless,
        FusionKind::SingleNeuron,
        FusionKind::FullyConnected,
        FusionKind::DoubleInput,
        FusionKind::MlpBranch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Stateless => "stateless",
            FusionKind::SingleNeuron => "single_neuron",
            FusionKind::FullyConnected => "fully_connected",
            FusionKind::DoubleInput => "double_input",
            FusionKind::MlpBranch => "mlp_branch",
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = NnetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NnetError::Variant(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionVariant {
    pub kind: FusionKind,
    pub state_dim: usize,
}

impl FusionVariant {
    pub fn new(kind: FusionKind, state_dim: usize) -> Result<Self, NnetError> {
        let v = Self { kind, state_dim };
        v.validate()?;
        Ok(v)
    }

    pub fn stateless() -> Self {
        Self { kind: FusionKind::Stateless, state_dim: 0 }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        if self.kind != FusionKind::Stateless && self.state_dim == 0 {
            return Err(NnetError::Variant(format!("{} needs state_dim >= 1", self.kind)));
        }
        Ok(())
    }

    pub fn uses_state(&self) -> bool {
        self.kind != FusionKind::Stateless
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn macs(&self) -> u64 {
        (self.out_h * self.out_w * self.out_c * self.rows()) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    Conv { w: usize, g: ConvGeom },
    /// `stat` indexes the running-mean buffer; running variance follows it.
    Bn { gamma: usize, beta: usize, stat: usize, c: usize },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FcOp {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
    pub relu: bool,
}

/// Everything derived from `(arch, variant)`: parameter declarations and the
/// op sequence shared by the runtime, the quantizer and cost accounting.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plan {
    pub img_c: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub backbone: Vec<Op>,
    pub feat_shape: [usize; 3],
    pub feat: usize,
    pub branch: Vec<FcOp>,
    pub head: Vec<FcOp>,
    /// Width appended to the features before the head.
    pub extra: usize,
    pub specs: Vec<ParamSpec>,
    /// Buffer lengths (BN running mean then variance per BN layer).
    pub buffers: Vec<usize>,
}

impl Plan {
    pub fn new(arch: &ArchSpec, variant: &FusionVariant) -> Result<Self, NnetError> {
        variant.validate()?;
        let feat_shape = arch.validate()?;
        let sd = variant.state_dim;
        let [img_c, h, w] = arch.input;
        let in_c = img_c + if variant.kind == FusionKind::DoubleInput { sd } else { 0 };
        let mut specs = Vec::new();
        let mut buffers = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };

        let (mut c, mut ch, mut cw) = (in_c, h, w);
        let mut backbone = Vec::new();
        let mut n_conv = 0;
        let mut n_bn = 0;
        for layer in &arch.layers {
            match *layer {
                Layer::Conv { out_ch, k, stride, pad } => {
                    let out_h = (ch + 2 * pad - k) / stride + 1;
                    let out_w = (cw + 2 * pad - k) / stride + 1;
                    let g = ConvGeom { in_c: c, out_c: out_ch, k, stride, pad, in_h: ch, in_w: cw, out_h, out_w };
                    let widx = add(format!("conv{n_conv}.w"), vec![out_ch, c, k, k], Init::HeUniform { fan_in: c * k * k });
                    backbone.push(Op::Conv { w: widx, g });
                    n_conv += 1;
                    (c, ch, cw) = (out_ch, out_h, out_w);
                }
                Layer::BatchNorm => {
                    let gamma = add(format!("bn{n_bn}.gamma"), vec![c], Init::Ones);
                    let beta = add(format!("bn{n_bn}.beta"), vec![c], Init::Zeros);
                    backbone.push(Op::Bn { gamma, beta, stat: buffers.len(), c });
                    buffers.push(c);
                    buffers.push(c);
                    n_bn += 1;
                }
                Layer::Relu => backbone.push(Op::Relu),
                Layer::Flatten | Layer::Fc { .. } => {}
            }
        }
        let feat: usize = feat_shape.iter().product();
        let outputs = arch.outputs();

        let mut fc = |name: &str, inp: usize, out: usize, relu: bool| {
            let w = add(format!("{name}.w"), vec![out, inp], Init::HeUniform { fan_in: inp });
            let b = add(format!("{name}.b"), vec![out], Init::Zeros);
            FcOp { w, b, inp, out, relu }
        };
        let mut branch = Vec::new();
        let extra = match variant.kind {
            FusionKind::Stateless | FusionKind::DoubleInput => 0,
            FusionKind::SingleNeuron | FusionKind::FullyConnected => sd,
            FusionKind::MlpBranch => {
                branch.push(fc("branch0", sd, MLP_HIDDEN, true));
                branch.push(fc("branch1", MLP_HIDDEN, MLP_HIDDEN, true));
                MLP_HIDDEN
            }
        };
        let head = if variant.kind == FusionKind::FullyConnected {
            vec![fc("head0", feat + extra, FC_HIDDEN, true), fc("head1", FC_HIDDEN, outputs, false)]
        } else {
            vec![fc("head0", feat + extra, outputs, false)]
        };
        Ok(Self { img_c, in_c, h, w, backbone, feat_shape, feat, branch, head, extra, specs, buffers })
    }

    pub fn outputs(&self) -> usize {
        self.head.last().map(|f| f.out).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    pub fn macs(&self) -> u64 {
        let conv: u64 = self
            .backbone
            .iter()
            .map(|op| match op {
                Op::Conv { g, .. } => g.macs(),
                _ => 0,
            })
            .sum();
        let fc: u64 = self.branch.iter().chain(&self.head).map(|f| (f.inp * f.out) as u64).sum();
        conv + fc
    }

    /// Conv ops in order, each with whether a BN and a ReLU follow it.
    pub fn conv_stages(&self) -> Vec<(usize, Option<usize>, bool)> {
        let mut out = Vec::new();
        for (i, op) in self.backbone.iter().enumerate() {
            if let Op::Conv { .. } = op {
                let bn = matches!(self.backbone.get(i + 1), Some(Op::Bn { .. })).then_some(i + 1);
                let after = bn.map(|b| b + 1).unwrap_or(i + 1);
                let relu = matches!(self.backbone.get(after), Some(Op::Relu));
                out.push((i, bn, relu));
            }
        }
        out
    }
}

/// Parameter count, deployment bytes (one byte per parameter) and
/// multiply-accumulates per inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Costs {
    pub params: usize,
    pub bytes: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub total: Costs,
    pub baseline: Costs,
    pub delta_bytes: i64,
    pub delta_macs: i64,
}

fn plan_costs(plan: &Plan) -> Costs {
    let params = plan.n_params();
    Costs { params, bytes: params, macs: plan.macs() }
}

/// Costs of `variant` on `arch` and the delta against the stateless
/// variant of the same arch.
pub fn count_costs(arch: &ArchSpec, variant: &FusionVariant) -> Result<CostReport, NnetError> {
    let total = plan_costs(&Plan::new(arch, variant)?);
    let baseline = plan_costs(&Plan::new(arch, &FusionVariant::stateless())?);
    Ok(CostReport {
        total,
        baseline,
        delta_bytes: total.bytes as i64 - baseline.bytes as i64,
        delta_macs: total.macs as i64 - baseline.macs as i64,
    })
}

/// Network input for a batch: images `[B, C, H, W]` and states `[B, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub states: Tensor<S>,
}

impl<S: Scalar> Batch<S> {
    /// Stacks samples, mapping 8-bit pixels to `(p - 128) / 128`.
    pub fn from_samples(samples: &[&Sample]) -> Self {
        let b = samples.len();
        let (h, w) = samples.first().map(|s| (s.image.height, s.image.width)).unwrap_or((0, 0));
        let sd = samples.first().map(|s| s.state.len()).unwrap_or(0);
        let mut img = Vec::with_capacity(b * h * w);
        let mut st = Vec::with_capacity(b * sd);
        for s in samples {
            assert_eq!((s.image.height, s.image.width, s.state.len()), (h, w, sd), "ragged batch");
            img.extend(s.image.data.iter().map(|&p| S::lit((p as f64 - 128.0) / 128.0)));
            st.extend(s.state.iter().map(|&v| S::lit(v as f64)));
        }
        Self { images: Tensor::new(vec![b, 1, h, w], img).unwrap(), states: Tensor::new(vec![b, sd], st).unwrap() }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks label vectors into `[B, L]`.
pub fn label_tensor<S: Scalar>(samples: &[&Sample]) -> Tensor<S> {
    let l = samples.first().map(|s| s.label.len()).unwrap_or(0);
    let data = samples.iter().flat_map(|s| s.label.iter().map(|&v| S::lit(v as f64))).collect();
    Tensor::new(vec![samples.len(), l], data).expect("uniform label width")
}

/// Anything that maps a batch to label predictions: float and quantized
/// models alike.
pub trait Regressor {
    fn arch(&self) -> &ArchSpec;
    fn variant(&self) -> &FusionVariant;
    fn predict_batch(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, NnetError>;
}

impl Regressor for Model<f32> {
    fn arch(&self) -> &ArchSpec {
        &self.arch
    }
    fn variant(&self) -> &FusionVariant {
        &self.variant
    }
    fn predict_batch(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, NnetError> {
        self.predict(batch)
    }
}

impl Regressor for QuantModel {
    fn arch(&self) -> &ArchSpec {
        &self.float.arch
    }
    fn variant(&self) -> &FusionVariant {
        &self.float.variant
    }
    fn predict_batch(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, NnetError> {
        self.q_forward(batch)
    }
}

/// Predictions for `samples` as a flat row-major `[N, outputs]` vector,
/// computed in chunks of `chunk`.
pub fn predict_samples<R: Regressor + ?Sized>(r: &R, samples: &[Sample], chunk: usize) -> Result<Vec<f32>, NnetError> {
    let mut out = Vec::with_capacity(samples.len() * r.arch().outputs());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&Sample> = part.iter().collect();
        out.extend_from_slice(r.predict_batch(&Batch::from_samples(&refs))?.data());
    }
    Ok(out)
}
