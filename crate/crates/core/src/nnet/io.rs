//! Model container. Little-endian throughout:
//!
//! ```text
//! "VSFM" | version u32 | kind u8 (0 float, 1 quant) | arch id u8
//! arch name (u16 len + utf8) | input C,H,W u32 | layer count u32
//! per layer: tag u8 + four u32 operands
//! variant id u8 | state_dim u16 | label_dim u16
//! params: count u32, per tensor rank u8, dims u32..., f32 data
//! buffers: same encoding
//! quant only: activation count u32, (scale f32, zero_point i32)...
//!             conv count u32, per conv scale f32, relu u8,
//!             weight count u32 + i8 data, bias count u32 + f32 data
//! ```

use std::path::Path;

use thiserror::Error;

use super::model::Model;
use super::quant::{QConv, QParams, QuantModel};
use super::tensor::Tensor;
use super::{ArchSpec, FusionKind, FusionVariant, Layer, NnetError, Op};

pub const MODEL_MAGIC: [u8; 4] = *b"VSFM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Float,
    Quant,
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, not a model file")]
    BadMagic([u8; 4]),
    #[error("unsupported model version {0}")]
    VersionMismatch(u32),
    #[error("truncated model file: needed {needed} bytes at offset {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("expected a {expected:?} model, file holds {found:?}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] NnetError),
}

/// Either kind of stored model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Float(Model<f32>),
    Quant(QuantModel),
}

fn arch_id(name: &str) -> u8 {
    match name {
        "desknet" => 0,
        "frontnet_sym" => 1,
        _ => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u16).to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensors(&mut self, ts: &[Tensor<f32>]) {
        self.u32(ts.len());
        for t in ts {
            self.u8(t.shape().len() as u8);
            for &d in t.shape() {
                self.u32(d);
            }
            for &v in t.data() {
                self.f32(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelFileError::Truncated { needed: n, offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<usize, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }
    fn u32(&mut self) -> Result<usize, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32, ModelFileError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    /// Reads a count and rejects values that cannot fit in the remaining
    /// bytes, so corrupt headers never trigger huge allocations.
    fn count(&mut self, min_bytes_each: usize) -> Result<usize, ModelFileError> {
        let n = self.u32()?;
        let left = self.buf.len() - self.pos;
        if n.saturating_mul(min_bytes_each) > left {
            return Err(ModelFileError::Truncated { needed: n * min_bytes_each, offset: self.pos });
        }
        Ok(n)
    }
    fn tensors(&mut self) -> Result<Vec<Tensor<f32>>, ModelFileError> {
        let n = self.count(1)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                ModelFileError::Malformed(format!("tensor shape {shape:?} overflows"))
            })?;
            let bytes = self.take(len.saturating_mul(4))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

fn write_float(w: &mut Writer, m: &Model<f32>, kind: ModelKind) {
    w.0.extend_from_slice(&MODEL_MAGIC);
    w.u32(MODEL_VERSION as usize);
    w.u8(if kind == ModelKind::Float { 0 } else { 1 });
    w.u8(arch_id(&m.arch.name));
    w.u16(m.arch.name.len());
    w.0.extend_from_slice(m.arch.name.as_bytes());
    for &d in &m.arch.input {
        w.u32(d);
    }
    w.u32(m.arch.layers.len());
    for l in &m.arch.layers {
        let (tag, ops) = match *l {
            Layer::Conv { out_ch, k, stride, pad } => (0, [out_ch, k, stride, pad]),
            Layer::BatchNorm => (1, [0; 4]),
            Layer::Relu => (2, [0; 4]),
            Layer::Flatten => (3, [0; 4]),
            Layer::Fc { out } => (4, [out, 0, 0, 0]),
        };
        w.u8(tag);
        for v in ops {
            w.u32(v);
        }
    }
    w.u8(m.variant.kind.id());
    w.u16(m.variant.state_dim);
    w.u16(m.outputs());
    w.tensors(&m.params);
    w.tensors(&m.buffers);
}

fn read_float(r: &mut Reader<'_>) -> Result<(ModelKind, Model<f32>), ModelFileError> {
    let magic: [u8; 4] = r.take(4).map_err(|_| ModelFileError::BadMagic(pad4(r.buf)))?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(ModelFileError::BadMagic(magic));
    }
    let version = r.u32()? as u32;
    if version != MODEL_VERSION {
        return Err(ModelFileError::VersionMismatch(version));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Float,
        1 => ModelKind::Quant,
        k => return Err(ModelFileError::Malformed(format!("model kind {k}"))),
    };
    let _arch_id = r.u8()?;
    let name_len = r.u16()?;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| ModelFileError::Malformed("arch name is not utf-8".into()))?;
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let n_layers = r.count(17)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let ops = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        layers.push(match tag {
            0 => Layer::Conv { out_ch: ops[0], k: ops[1], stride: ops[2], pad: ops[3] },
            1 => Layer::BatchNorm,
            2 => Layer::Relu,
            3 => Layer::Flatten,
            4 => Layer::Fc { out: ops[0] },
            t => return Err(ModelFileError::Malformed(format!("layer tag {t}"))),
        });
    }
    let arch = ArchSpec { name, input, layers };
    let vid = r.u8()?;
    let fusion = FusionKind::from_id(vid).ok_or_else(|| ModelFileError::Malformed(format!("variant id {vid}")))?;
    let variant = FusionVariant { kind: fusion, state_dim: r.u16()? };
    let label_dim = r.u16()?;
    if label_dim != arch.outputs() {
        return Err(ModelFileError::Malformed(format!("label_dim {label_dim} but arch has {} outputs", arch.outputs())));
    }
    let params = r.tensors()?;
    let buffers = r.tensors()?;
    Ok((kind, Model::from_parts(&arch, &variant, params, buffers)?))
}

fn pad4(buf: &[u8]) -> [u8; 4] {
    let mut m = [0u8; 4];
    for (d, s) in m.iter_mut().zip(buf) {
        *d = *s;
    }
    m
}

fn finish(r: &Reader<'_>) -> Result<(), ModelFileError> {
    if r.pos != r.buf.len() {
        return Err(ModelFileError::Malformed(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(())
}

pub fn encode_model(m: &Model<f32>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_float(&mut w, m, ModelKind::Float);
    w.0
}

pub fn encode_quant_model(q: &QuantModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_float(&mut w, &q.float, ModelKind::Quant);
    w.u32(q.acts.len());
    for a in &q.acts {
        w.f32(a.scale);
        w.0.extend_from_slice(&a.zero_point.to_le_bytes());
    }
    w.u32(q.convs.len());
    for c in &q.convs {
        w.f32(c.scale);
        w.u8(c.relu as u8);
        w.u32(c.weights.len());
        w.0.extend(c.weights.iter().map(|&v| v as u8));
        w.u32(c.bias.len());
        for &b in &c.bias {
            w.f32(b);
        }
    }
    w.0
}

fn decode_any(bytes: &[u8]) -> Result<ModelFile, ModelFileError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (kind, float) = read_float(&mut r)?;
    if kind == ModelKind::Float {
        finish(&r)?;
        return Ok(ModelFile::Float(float));
    }
    let n_acts = r.count(8)?;
    let mut acts = Vec::with_capacity(n_acts);
    for _ in 0..n_acts {
        let scale = r.f32()?;
        let zero_point = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
        acts.push(QParams { scale, zero_point });
    }
    let stages = float.plan.conv_stages();
    if n_acts != stages.len() + 1 {
        return Err(ModelFileError::Malformed(format!("{n_acts} activation params for {} convs", stages.len())));
    }
    let n_convs = r.count(13)?;
    if n_convs != stages.len() {
        return Err(ModelFileError::Malformed(format!("{n_convs} quantized convs, arch has {}", stages.len())));
    }
    let mut convs = Vec::with_capacity(n_convs);
    for (i, _, _) in stages {
        let Op::Conv { g, .. } = float.plan.backbone[i] else { unreachable!("conv stage") };
        let scale = r.f32()?;
        let relu = r.u8()? != 0;
        let nw = r.count(1)?;
        let weights: Vec<i8> = r.take(nw)?.iter().map(|&v| v as i8).collect();
        let nb = r.count(4)?;
        let bias = (0..nb).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        if nw != g.out_c * g.rows() || nb != g.out_c {
            return Err(ModelFileError::Malformed(format!("conv stage {i}: {nw} weights, {nb} biases")));
        }
        convs.push(QConv { weights, scale, bias, relu, geom: g });
    }
    finish(&r)?;
    Ok(ModelFile::Quant(QuantModel { float, convs, acts }))
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>, ModelFileError> {
    match decode_any(bytes)? {
        ModelFile::Float(m) => Ok(m),
        ModelFile::Quant(_) => Err(ModelFileError::WrongKind { expected: ModelKind::Float, found: ModelKind::Quant }),
    }
}

pub fn decode_quant_model(bytes: &[u8]) -> Result<QuantModel, ModelFileError> {
    match decode_any(bytes)? {
        ModelFile::Quant(q) => Ok(q),
        ModelFile::Float(_) => Err(ModelFileError::WrongKind { expected: ModelKind::Quant, found: ModelKind::Float }),
    }
}

/// Reads a model file of either kind.
pub fn read_model_file(path: &Path) -> Result<ModelFile, ModelFileError> {
    decode_any(&std::fs::read(path)?)
}

impl ModelFile {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ModelFile::Float(m) => encode_model(m),
            ModelFile::Quant(q) => encode_quant_model(q),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ModelFileError> {
        Ok(std::fs::write(path, self.encode())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{quantize, Batch, Mode};

    fn trained_like() -> Model<f32> {
        let v = FusionVariant::new(FusionKind::MlpBranch, 1).unwrap();
        let mut m = Model::<f32>::new(&ArchSpec::desknet(), &v, 3).unwrap();
        let bt = batch();
        let (_, c) = m.forward(&bt, Mode::Train).unwrap();
        m.update_running_stats(&c);
        m
    }

    fn batch() -> Batch<f32> {
        let img = (0..2 * 4096).map(|i| ((i * 37 % 256) as f32 - 128.0) / 128.0).collect();
        Batch { images: Tensor::new(vec![2, 1, 64, 64], img).unwrap(), states: Tensor::new(vec![2, 1], vec![0.1, -0.2]).unwrap() }
    }

    #[test]
    fn float_roundtrip_is_exact() {
        let m = trained_like();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..4], b"VSFM");
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn quant_roundtrip_is_exact() {
        let q = quantize(&trained_like(), &batch()).unwrap();
        let bytes = encode_quant_model(&q);
        let back = decode_quant_model(&bytes).unwrap();
        assert_eq!(back, q);
        assert!(matches!(decode_model(&bytes), Err(ModelFileError::WrongKind { .. })));
        assert!(matches!(decode_quant_model(&encode_model(&q.float)), Err(ModelFileError::WrongKind { .. })));
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_model(&trained_like());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(ModelFileError::BadMagic(_))));
        assert!(matches!(decode_model(&bytes[..2]), Err(ModelFileError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(ModelFileError::VersionMismatch(9))));
        for cut in [10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(ModelFileError::Truncated { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(ModelFileError::Malformed(_))));
    }
}
