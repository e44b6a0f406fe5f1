//! Binary model format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"QWID"
//! version u16            (currently 1)
//! mode    u8             0 = fp32, 1 = int8, 2 = fake-quant checkpoint
//! input   shape          (rank u8, dims u32 each)
//! input_params           optional quant params (int8 graphs)
//! nodes   u32 count, then one record per node
//! observers u32 count    (fake-quant checkpoints carry observer ranges)
//! ```
//!
//! Each node record stores an op tag, its input edges, and the op
//! payload; conv-like payloads carry the weight tensor (fp32 or int8
//! plus its quantization scheme), the bias, and stride/padding. Scales
//! are stored as f64. Serialization is canonical: saving a loaded model
//! reproduces the original bytes exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Bias, BnParams, ConvParams, LayerGraph, Mode, Node, OpKind, Weights};
use crate::kernels::{ConvSpec, RequantSpec};
use crate::observer::MinMaxObserver;
use crate::quant::QuantParams;
use crate::tensor::{FloatTensor, QScheme, QuantTensor, Shape};

pub const MAGIC: [u8; 4] = *b"QWID";
pub const VERSION: u16 = 1;

// ---------------------------------------------------------------------------
// writer
// ---------------------------------------------------------------------------

struct W {
    buf: Vec<u8>,
}

impl W {
    fn new() -> Self {
        W { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f32(v);
        }
    }

    fn shape(&mut self, s: &Shape) {
        self.u8(s.dims().len() as u8);
        for &d in s.dims() {
            self.u32(d as u32);
        }
    }

    fn qparams(&mut self, p: &QuantParams) {
        self.f64(p.scale);
        self.i32(p.zero_point);
        self.i32(p.qmin);
        self.i32(p.qmax);
    }

    fn qscheme(&mut self, q: &QScheme) {
        match q {
            QScheme::PerTensor(p) => {
                self.u8(0);
                self.qparams(p);
            }
            QScheme::PerChannel { axis, params } => {
                // per-channel entries share clamp bounds; store them once
                self.u8(1);
                self.u32(*axis as u32);
                self.u32(params.len() as u32);
                self.i32(params[0].qmin);
                self.i32(params[0].qmax);
                for p in params {
                    self.f64(p.scale);
                    self.i32(p.zero_point);
                }
            }
        }
    }

    fn weights(&mut self, w: &Weights) {
        match w {
            Weights::Float(t) => {
                self.u8(0);
                self.shape(&t.shape);
                for &v in &t.data {
                    self.f32(v);
                }
            }
            Weights::Quant(t) => {
                self.u8(1);
                self.shape(&t.shape);
                self.buf.extend(t.data.iter().map(|&v| v as u8));
                self.qscheme(&t.qscheme);
            }
        }
    }

    fn bias(&mut self, b: &Bias) {
        match b {
            Bias::Float(v) => {
                self.u8(0);
                self.f32s(v);
            }
            Bias::Int(v) => {
                self.u8(1);
                self.u32(v.len() as u32);
                for &x in v {
                    self.i32(x);
                }
            }
        }
    }

    fn conv_params(&mut self, p: &ConvParams) {
        self.u32(p.spec.stride as u32);
        self.u32(p.spec.padding as u32);
        self.weights(&p.weight);
        self.bias(&p.bias);
    }

    fn bn_params(&mut self, bn: &BnParams) {
        self.f32s(&bn.gamma);
        self.f32s(&bn.beta);
        self.f32s(&bn.running_mean);
        self.f32s(&bn.running_var);
        self.f32(bn.eps);
        self.f32(bn.momentum);
    }
}

// ---------------------------------------------------------------------------
// reader
// ---------------------------------------------------------------------------

struct R<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> R<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f32()).collect()
    }

    fn shape(&mut self) -> Result<Shape> {
        let rank = self.u8()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        Shape::new(&dims)
    }

    fn qparams(&mut self) -> Result<QuantParams> {
        let scale = self.f64()?;
        let zero_point = self.i32()?;
        let qmin = self.i32()?;
        let qmax = self.i32()?;
        QuantParams::new(scale, zero_point, qmin, qmax)
    }

    fn qscheme(&mut self) -> Result<QScheme> {
        match self.u8()? {
            0 => Ok(QScheme::PerTensor(self.qparams()?)),
            1 => {
                let axis = self.u32()? as usize;
                let n = self.u32()? as usize;
                let qmin = self.i32()?;
                let qmax = self.i32()?;
                let params: Vec<QuantParams> = (0..n)
                    .map(|_| {
                        let scale = self.f64()?;
                        let zp = self.i32()?;
                        QuantParams::new(scale, zp, qmin, qmax)
                    })
                    .collect::<Result<_>>()?;
                Ok(QScheme::PerChannel { axis, params })
            }
            t => Err(Error::Conversion(format!("unknown qscheme tag {t}"))),
        }
    }

    fn weights(&mut self) -> Result<Weights> {
        match self.u8()? {
            0 => {
                let shape = self.shape()?;
                let data: Vec<f32> = (0..shape.len()).map(|_| self.f32()).collect::<Result<_>>()?;
                Ok(Weights::Float(FloatTensor::new(shape, data)?))
            }
            1 => {
                let shape = self.shape()?;
                let data: Vec<i8> = self.take(shape.len())?.iter().map(|&b| b as i8).collect();
                let qscheme = self.qscheme()?;
                Ok(Weights::Quant(QuantTensor { shape, data, qscheme }))
            }
            t => Err(Error::Conversion(format!("unknown weight tag {t}"))),
        }
    }

    fn bias(&mut self) -> Result<Bias> {
        match self.u8()? {
            0 => Ok(Bias::Float(self.f32s()?)),
            1 => {
                let n = self.u32()? as usize;
                let v: Vec<i32> = (0..n).map(|_| self.i32()).collect::<Result<_>>()?;
                Ok(Bias::Int(v))
            }
            t => Err(Error::Conversion(format!("unknown bias tag {t}"))),
        }
    }

    fn conv_params(&mut self) -> Result<ConvParams> {
        let stride = self.u32()? as usize;
        let padding = self.u32()? as usize;
        let weight = self.weights()?;
        let bias = self.bias()?;
        Ok(ConvParams { weight, bias, spec: ConvSpec::new(stride, padding)? })
    }

    fn bn_params(&mut self) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.f32s()?,
            beta: self.f32s()?,
            running_mean: self.f32s()?,
            running_var: self.f32s()?,
            eps: self.f32()?,
            momentum: self.f32()?,
        })
    }
}

// ---------------------------------------------------------------------------
// op tags
// ---------------------------------------------------------------------------

fn op_tag(op: &OpKind) -> u8 {
    match op {
        OpKind::Input => 0,
        OpKind::Conv(_) => 1,
        OpKind::Linear(_) => 2,
        OpKind::Relu => 3,
        OpKind::Add => 4,
        OpKind::Maxpool { .. } => 5,
        OpKind::GlobalAvgPool => 6,
        OpKind::BatchNorm(_) => 7,
        OpKind::FusedConvRelu(_) => 8,
        OpKind::FusedConvBnRelu(..) => 9,
        OpKind::Concat => 10,
        OpKind::QuantizeStub(_) => 11,
        OpKind::DequantizeStub => 12,
        OpKind::FakeQuant { .. } => 13,
    }
}

// ---------------------------------------------------------------------------
// public API
// ---------------------------------------------------------------------------

/// Serialize a graph to the binary format.
pub fn to_bytes(g: &LayerGraph) -> Result<Vec<u8>> {
    let mut w = W::new();
    w.buf.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    w.u8(match g.mode {
        Mode::Fp32 => 0,
        Mode::Int8 => 1,
        Mode::FakeQuant => 2,
    });
    w.shape(&g.input_shape);
    match &g.input_params {
        Some(p) => {
            w.u8(1);
            w.qparams(p);
        }
        None => w.u8(0),
    }
    w.u32(g.nodes.len() as u32);
    for n in &g.nodes {
        w.u8(op_tag(&n.op));
        w.u8(n.inputs.len() as u8);
        for &i in &n.inputs {
            w.u32(i as u32);
        }
        match &n.op {
            OpKind::Conv(p) | OpKind::Linear(p) | OpKind::FusedConvRelu(p) => w.conv_params(p),
            OpKind::FusedConvBnRelu(p, bn) => {
                w.conv_params(p);
                w.bn_params(bn);
            }
            OpKind::BatchNorm(bn) => w.bn_params(bn),
            OpKind::Maxpool { window, stride } => {
                w.u32(*window as u32);
                w.u32(*stride as u32);
            }
            OpKind::QuantizeStub(p) => w.qparams(p),
            OpKind::FakeQuant { observer } => w.u32(*observer as u32),
            OpKind::Input | OpKind::Relu | OpKind::Add | OpKind::GlobalAvgPool
            | OpKind::Concat | OpKind::DequantizeStub => {}
        }
        match &n.out_params {
            Some(p) => {
                w.u8(1);
                w.qparams(p);
            }
            None => w.u8(0),
        }
        // requant specs are not stored: they are fully determined by the
        // input/output activation params and the weight scales
    }
    w.u32(g.observers.len() as u32);
    for obs in &g.observers {
        match obs.range() {
            Some((lo, hi)) => {
                w.u8(1);
                w.f64(lo as f64);
                w.f64(hi as f64);
                w.u64(obs.count());
            }
            None => w.u8(0),
        }
    }
    Ok(w.buf)
}

/// Deserialize a graph from the binary format.
pub fn from_bytes(bytes: &[u8]) -> Result<LayerGraph> {
    let mut r = R { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode = match r.u8()? {
        0 => Mode::Fp32,
        1 => Mode::Int8,
        2 => Mode::FakeQuant,
        m => return Err(Error::Conversion(format!("unknown mode byte {m}"))),
    };
    let input_shape = r.shape()?;
    let input_params = if r.u8()? == 1 { Some(r.qparams()?) } else { None };
    let n_nodes = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(n_nodes);
    for id in 0..n_nodes {
        let tag = r.u8()?;
        let n_inputs = r.u8()? as usize;
        let inputs: Vec<usize> = (0..n_inputs)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let op = match tag {
            0 => OpKind::Input,
            1 => OpKind::Conv(r.conv_params()?),
            2 => OpKind::Linear(r.conv_params()?),
            3 => OpKind::Relu,
            4 => OpKind::Add,
            5 => OpKind::Maxpool { window: r.u32()? as usize, stride: r.u32()? as usize },
            6 => OpKind::GlobalAvgPool,
            7 => OpKind::BatchNorm(r.bn_params()?),
            8 => OpKind::FusedConvRelu(r.conv_params()?),
            9 => {
                let p = r.conv_params()?;
                let bn = r.bn_params()?;
                OpKind::FusedConvBnRelu(p, bn)
            }
            10 => OpKind::Concat,
            11 => OpKind::QuantizeStub(r.qparams()?),
            12 => OpKind::DequantizeStub,
            13 => OpKind::FakeQuant { observer: r.u32()? as usize },
            t => return Err(Error::Conversion(format!("unknown op tag {t}"))),
        };
        let out_params = if r.u8()? == 1 { Some(r.qparams()?) } else { None };
        nodes.push(Node { id, op, inputs, out_params, requant: None });
    }
    rebuild_requant(&mut nodes, mode)?;
    let n_obs = r.u32()? as usize;
    let mut observers = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        observers.push(if r.u8()? == 1 {
            let lo = r.f64()?;
            let hi = r.f64()?;
            let count = r.u64()?;
            MinMaxObserver::from_range(lo, hi, count)?
        } else {
            MinMaxObserver::per_tensor()
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Conversion("trailing bytes after model payload".into()));
    }
    let g = LayerGraph {
        mode,
        nodes,
        observers,
        input_shape,
        input_params,
        // loaded checkpoints are for evaluation/conversion by default;
        // training re-enables observation explicitly
        observers_live: false,
    };
    g.validate()?;
    Ok(g)
}

/// Reattach requantization specs to int8 conv/linear nodes. The
/// multipliers are `s_x * s_w / s_y`, so they follow directly from the
/// stored activation params and weight scales.
fn rebuild_requant(nodes: &mut [Node], mode: Mode) -> Result<()> {
    if mode != Mode::Int8 {
        return Ok(());
    }
    for i in 0..nodes.len() {
        let Some(p) = nodes[i].op.conv_params() else { continue };
        let Weights::Quant(wq) = &p.weight else { continue };
        let in_params = nodes[nodes[i].inputs[0]]
            .out_params
            .ok_or_else(|| Error::Conversion(format!("node {i} input lacks activation params")))?;
        let out_params = nodes[i]
            .out_params
            .ok_or_else(|| Error::Conversion(format!("node {i} lacks output params")))?;
        let rq = RequantSpec::from_params(&in_params, &wq.qscheme, out_params)?;
        nodes[i].requant = Some(rq);
    }
    Ok(())
}

/// Write a model file.
pub fn save(g: &LayerGraph, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(g)?)?;
    Ok(())
}

/// Read a model file.
pub fn load(path: &Path) -> Result<LayerGraph> {
    from_bytes(&fs::read(path)?)
}

/// Serialized size of an in-memory graph in bytes.
pub fn serialized_size(g: &LayerGraph) -> Result<u64> {
    Ok(to_bytes(g)?.len() as u64)
}

/// Size of a model file in bytes.
pub fn model_size_bytes(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path)?.len())
}
