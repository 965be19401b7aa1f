//! 8-bit affine quantization: symmetric per-tensor int8 weights, asymmetric
//! per-layer uint8 activations calibrated by min/max, integer convolutions
//! with float requantization. The branch and head stay in float.

use super::layers;
use super::model::Model;
use super::tensor::{Scalar, Tensor};
use super::{Batch, ConvGeom, NnetError, Op};

/// Observed value range at one quantization point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActRange {
    pub min: f32,
    pub max: f32,
}

impl ActRange {
    pub fn of<S: Scalar>(x: &[S]) -> Self {
        let (mut lo, mut hi) = (S::infinity(), S::neg_infinity());
        for &v in x {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Self { min: lo.as_f64() as f32, max: hi.as_f64() as f32 }
    }

    pub fn merge(self, other: Self) -> Self {
        Self { min: self.min.min(other.min), max: self.max.max(other.max) }
    }
}

/// Affine uint8 mapping `real = (q - zero_point) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QParams {
    /// The range is widened to include 0 so that zero padding is exact; a
    /// degenerate range falls back to scale 1.
    pub fn from_range(r: ActRange) -> Self {
        let lo = r.min.min(0.0);
        let hi = r.max.max(0.0);
        let mut scale = (hi - lo) / 255.0;
        if !(scale.is_finite() && scale > 0.0) {
            scale = 1.0;
        }
        let zero_point = (-lo / scale).round().clamp(0.0, 255.0) as i32;
        Self { scale, zero_point }
    }

    pub fn quantize(&self, x: f32) -> u8 {
        ((x / self.scale).round() + self.zero_point as f32).clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        (q as i32 - self.zero_point) as f32 * self.scale
    }
}

/// Snaps `x` onto the activation grid in place. Returns the
/// straight-through mask: true where the value was inside the clamp range.
pub(crate) fn fake_quant_act<S: Scalar>(x: &mut [S], q: QParams) -> Vec<bool> {
    let s = S::lit(q.scale as f64);
    let zp = S::lit(q.zero_point as f64);
    let (lo, hi) = (S::zero(), S::lit(255.0));
    x.iter_mut()
        .map(|v| {
            let t = (*v / s).round() + zp;
            let inside = t >= lo && t <= hi;
            *v = (t.max(lo).min(hi) - zp) * s;
            inside
        })
        .collect()
}

fn weight_scale<S: Scalar>(w: &[S]) -> S {
    let m = w.iter().fold(S::zero(), |a, v| a.max(v.abs()));
    if m > S::zero() {
        m / S::lit(127.0)
    } else {
        S::one()
    }
}

/// Weights snapped to the symmetric int8 grid of their own tensor.
pub fn fake_quant_weights<S: Scalar>(w: &[S]) -> Vec<S> {
    let s = weight_scale(w);
    let lim = S::lit(127.0);
    w.iter().map(|&v| (v / s).round().max(-lim).min(lim) * s).collect()
}

/// Symmetric per-tensor int8 quantization: `w ~ q * scale`.
pub fn quantize_weights(w: &[f32]) -> (Vec<i8>, f32) {
    let s = weight_scale(w);
    (w.iter().map(|&v| (v / s).round().clamp(-127.0, 127.0) as i8).collect(), s)
}

pub fn dequantize_weights(q: &[i8], scale: f32) -> Vec<f32> {
    q.iter().map(|&v| v as f32 * scale).collect()
}

/// One integer convolution stage, BN already folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub weights: Vec<i8>,
    pub scale: f32,
    pub bias: Vec<f32>,
    pub relu: bool,
    pub(crate) geom: ConvGeom,
}

/// Deployable model: integer backbone, float branch and head. `float`
/// carries the source parameters; only its branch and head are used at
/// inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub float: Model<f32>,
    pub convs: Vec<QConv>,
    /// One per conv input, then one for the feature vector.
    pub acts: Vec<QParams>,
}

/// Activation ranges at every quantization point, from inference-mode
/// passes over `batch`.
pub fn calibrate(model: &Model<f32>, batch: &Batch<f32>) -> Result<Vec<ActRange>, NnetError> {
    if batch.is_empty() {
        return Err(NnetError::EmptyCalibration);
    }
    let (_, cache) = model.forward(batch, super::Mode::Eval)?;
    Ok(cache.activation_ranges().to_vec())
}

pub fn quantize_with_ranges(model: &Model<f32>, ranges: &[ActRange]) -> Result<QuantModel, NnetError> {
    if ranges.len() != model.n_quant_points() {
        return Err(NnetError::Shape(format!("{} ranges for {} quantization points", ranges.len(), model.n_quant_points())));
    }
    let acts = ranges.iter().map(|&r| QParams::from_range(r)).collect();
    let plan = &model.plan;
    let mut convs = Vec::new();
    for (i, bn, relu) in plan.conv_stages() {
        let Op::Conv { w, g } = plan.backbone[i] else { unreachable!("conv stage") };
        let (wf, bias) = match bn.map(|j| plan.backbone[j]) {
            Some(Op::Bn { gamma, beta, stat, .. }) => {
                let (wf, _, bias) = model.fold_bn(w, g.out_c, i + 1, gamma, beta, stat);
                (wf, bias)
            }
            _ => (model.params[w].data().to_vec(), vec![0.0; g.out_c]),
        };
        let (weights, scale) = quantize_weights(&wf);
        convs.push(QConv { weights, scale, bias, relu, geom: g });
    }
    Ok(QuantModel { float: model.clone(), convs, acts })
}

/// Calibrates on `calibration` and quantizes.
pub fn quantize(model: &Model<f32>, calibration: &Batch<f32>) -> Result<QuantModel, NnetError> {
    quantize_with_ranges(model, &calibrate(model, calibration)?)
}

impl QuantModel {
    pub fn outputs(&self) -> usize {
        self.float.outputs()
    }

    /// Integer backbone, float head.
    pub fn q_forward(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, NnetError> {
        let m = &self.float;
        m.check_batch(batch)?;
        let b = batch.len();
        let mut q: Vec<u8> = m.backbone_input(batch).iter().map(|&v| self.acts[0].quantize(v)).collect();
        for (si, c) in self.convs.iter().enumerate() {
            let g = &c.geom;
            let (a_in, a_out) = (self.acts[si], self.acts[si + 1]);
            let centered: Vec<i32> = q.iter().map(|&v| v as i32 - a_in.zero_point).collect();
            let col = layers::im2col(&centered, g, b);
            let n = b * g.out_h * g.out_w;
            let rows = g.rows();
            let mut acc = vec![0i32; g.out_c * n];
            for o in 0..g.out_c {
                let out = &mut acc[o * n..(o + 1) * n];
                for r in 0..rows {
                    let wv = c.weights[o * rows + r] as i32;
                    if wv == 0 {
                        continue;
                    }
                    for (a, &x) in out.iter_mut().zip(&col[r * n..(r + 1) * n]) {
                        *a += wv * x;
                    }
                }
            }
            let s = a_in.scale * c.scale;
            q = acc
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let mut y = a as f32 * s + c.bias[i / n];
                    if c.relu && y < 0.0 {
                        y = 0.0;
                    }
                    a_out.quantize(y)
                })
                .collect();
        }
        let last = *self.acts.last().expect("feature quantization point");
        let x: Vec<f32> = q.iter().map(|&v| last.dequantize(v)).collect();
        let [fc, fh, fw] = m.plan.feat_shape;
        let features = layers::flatten(&x, fc, b, fh * fw);
        let (out, _, _) = m.head_forward(&features, batch.states.data(), b);
        Ok(Tensor::new(vec![b, m.outputs()], out).expect("head width"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{ArchSpec, FusionKind, FusionVariant, Layer, Mode};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn degenerate_range_falls_back_to_unit_scale() {
        let q = QParams::from_range(ActRange { min: 0.0, max: 0.0 });
        assert_eq!(q, QParams { scale: 1.0, zero_point: 0 });
        let q = QParams::from_range(ActRange { min: 2.0, max: 2.0 });
        assert_eq!(q.zero_point, 0);
        assert!((q.scale - 2.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn input_range_maps_exactly() {
        let q = QParams::from_range(ActRange { min: -1.0, max: 127.0 / 128.0 });
        assert_eq!(q, QParams { scale: 1.0 / 128.0, zero_point: 128 });
        for p in 0..=255u8 {
            let x = (p as f32 - 128.0) / 128.0;
            assert_eq!(q.quantize(x), p);
            assert_eq!(q.dequantize(p), x);
        }
    }

    proptest! {
        #[test]
        fn weight_roundtrip_within_half_step(w in proptest::collection::vec(-3.0f32..3.0, 1..64)) {
            let (q, s) = quantize_weights(&w);
            for (a, b) in w.iter().zip(dequantize_weights(&q, s)) {
                prop_assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-5));
            }
            let fq = fake_quant_weights(&w);
            prop_assert_eq!(fq, dequantize_weights(&q, s));
        }
    }

    fn pixel_batch(b: usize, sd: usize, seed: u64, h: usize, w: usize) -> Batch<f32> {
        let mut r = rng::stream(seed, &[3]);
        let mut img: Vec<f32> =
            (0..b * h * w).map(|_| (r.random_range(0..=255u32) as f32 - 128.0) / 128.0).collect();
        if img.len() >= 2 {
            img[0] = -1.0;
            img[1] = 127.0 / 128.0;
        }
        let st = (0..b * sd).map(|_| r.random_range(-0.3f32..0.3)).collect();
        Batch { images: Tensor::new(vec![b, 1, h, w], img).unwrap(), states: Tensor::new(vec![b, sd], st).unwrap() }
    }

    #[test]
    fn grid_weights_give_exact_outputs() {
        let arch = ArchSpec {
            name: "probe".into(),
            input: [1, 4, 4],
            layers: vec![Layer::Conv { out_ch: 1, k: 1, stride: 1, pad: 0 }, Layer::Flatten, Layer::Fc { out: 2 }],
        };
        let mut m = Model::<f32>::new(&arch, &FusionVariant::stateless(), 1).unwrap();
        m.params[0].data_mut()[0] = 1.0;
        let bt = pixel_batch(5, 0, 1, 4, 4);
        let qm = quantize(&m, &bt).unwrap();
        assert_eq!(qm.convs[0].weights, vec![127]);
        assert_eq!(qm.q_forward(&bt).unwrap(), m.predict(&bt).unwrap());
    }

    fn small() -> ArchSpec {
        ArchSpec {
            name: "small".into(),
            input: [1, 12, 12],
            layers: vec![
                Layer::Conv { out_ch: 4, k: 3, stride: 2, pad: 1 },
                Layer::BatchNorm,
                Layer::Relu,
                Layer::Conv { out_ch: 6, k: 3, stride: 2, pad: 1 },
                Layer::BatchNorm,
                Layer::Relu,
                Layer::Flatten,
                Layer::Fc { out: 3 },
            ],
        }
    }

    /// Model with non-trivial running statistics.
    fn warmed(kind: FusionKind) -> Model<f32> {
        let sd = if kind == FusionKind::Stateless { 0 } else { 1 };
        let mut m = Model::<f32>::new(&small(), &FusionVariant { kind, state_dim: sd }, 2).unwrap();
        for s in 0..5 {
            let (_, c) = m.forward(&pixel_batch(16, sd, s, 12, 12), Mode::Train).unwrap();
            m.update_running_stats(&c);
        }
        m
    }

    #[test]
    fn fake_quant_forward_tracks_integer_path() {
        for kind in FusionKind::ALL {
            let m = warmed(kind);
            let sd = m.variant.state_dim;
            let calib = pixel_batch(32, sd, 10, 12, 12);
            let qm = quantize(&m, &calib).unwrap();
            let bt = pixel_batch(16, sd, 11, 12, 12);
            let fq = m.forward(&bt, Mode::FakeQuant(&qm.acts)).unwrap().0;
            let iq = qm.q_forward(&bt).unwrap();
            let fl = m.predict(&bt).unwrap();
            let diff = |a: &Tensor<f32>, b: &Tensor<f32>| {
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max)
            };
            let spread = fl.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
            assert!(diff(&fq, &iq) < 1e-3 * spread.max(1.0), "{kind}: fake {} vs int", diff(&fq, &iq));
            assert!(diff(&fl, &iq) < 0.1 * spread.max(1.0), "{kind}: float vs int {}", diff(&fl, &iq));
        }
    }

    #[test]
    fn empty_calibration_rejected() {
        let m = warmed(FusionKind::Stateless);
        let bt = pixel_batch(0, 0, 1, 12, 12);
        assert!(matches!(quantize(&m, &bt), Err(NnetError::EmptyCalibration)));
    }
}
