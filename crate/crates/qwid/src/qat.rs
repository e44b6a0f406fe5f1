//! Quantization-aware training at toy scale: fake-quant insertion,
//! reverse-mode gradients with straight-through estimation through the
//! quantization lattice, cross-entropy loss, Adam, and the training loop.
//!
//! Training arithmetic is fp32 throughout; quantization only shapes the
//! forward simulation. Everything is seeded and single-threaded so two
//! runs with the same config produce bit-identical trajectories.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Mode, OpKind, Weights};
use crate::kernels::{self, ConvSpec};
use crate::observer::MinMaxObserver;
use crate::quant::{QuantParams, INT8_QMAX, INT8_QMIN};
use crate::rng::Rng;
use crate::tensor::{dequantize_tensor, quantize_tensor, FloatTensor, QScheme, QuantizeMode, Shape};

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct QatConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Which tensor of a node a parameter entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    BiasParam,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub node: usize,
    pub kind: ParamKind,
}

/// Adam moments plus step bookkeeping for one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Vec<ParamRef>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(g: &LayerGraph) -> Self {
        let params = trainable_params(g);
        let sizes: Vec<usize> = params.iter().map(|p| param_slice(g, p).len()).collect();
        TrainState {
            params,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
            epoch: 0,
        }
    }
}

/// Enumerate trainable parameters in node order.
pub fn trainable_params(g: &LayerGraph) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for n in &g.nodes {
        match &n.op {
            OpKind::Conv(_) | OpKind::Linear(_) | OpKind::FusedConvRelu(_) => {
                out.push(ParamRef { node: n.id, kind: ParamKind::Weight });
                out.push(ParamRef { node: n.id, kind: ParamKind::BiasParam });
            }
            OpKind::BatchNorm(_) => {
                out.push(ParamRef { node: n.id, kind: ParamKind::Gamma });
                out.push(ParamRef { node: n.id, kind: ParamKind::Beta });
            }
            _ => {}
        }
    }
    out
}

/// The current values of one parameter tensor.
pub fn param_values<'a>(g: &'a LayerGraph, p: &ParamRef) -> &'a [f32] {
    param_slice(g, p)
}

/// Mutable access to one parameter tensor.
pub fn param_values_mut<'a>(g: &'a mut LayerGraph, p: &ParamRef) -> &'a mut [f32] {
    param_slice_mut(g, p)
}

fn param_slice<'a>(g: &'a LayerGraph, p: &ParamRef) -> &'a [f32] {
    let n = &g.nodes[p.node];
    match (&n.op, p.kind) {
        (op, ParamKind::Weight) => &op.conv_params().unwrap().weight.as_float().unwrap().data,
        (op, ParamKind::BiasParam) => op.conv_params().unwrap().bias.as_float().unwrap(),
        (OpKind::BatchNorm(bn), ParamKind::Gamma) => &bn.gamma,
        (OpKind::BatchNorm(bn), ParamKind::Beta) => &bn.beta,
        _ => unreachable!("invalid param ref"),
    }
}

fn param_slice_mut<'a>(g: &'a mut LayerGraph, p: &ParamRef) -> &'a mut [f32] {
    let n = &mut g.nodes[p.node];
    match (&mut n.op, p.kind) {
        (op, ParamKind::Weight) => {
            match &mut op.conv_params_mut().unwrap().weight {
                Weights::Float(t) => &mut t.data,
                Weights::Quant(_) => unreachable!("training needs fp32 weights"),
            }
        }
        (op, ParamKind::BiasParam) => match &mut op.conv_params_mut().unwrap().bias {
            crate::graph::Bias::Float(b) => b,
            crate::graph::Bias::Int(_) => unreachable!("training needs fp32 bias"),
        },
        (OpKind::BatchNorm(bn), ParamKind::Gamma) => &mut bn.gamma,
        (OpKind::BatchNorm(bn), ParamKind::Beta) => &mut bn.beta,
        _ => unreachable!("invalid param ref"),
    }
}

// ---------------------------------------------------------------------------
// fake-quant insertion
// ---------------------------------------------------------------------------

/// Insert fake-quant nodes (each with a fresh observer) on the graph
/// input and after every conv/linear, add, and concat output. The graph
/// must already be fused and batch-norm free.
pub fn insert_fake_quant(g: &LayerGraph) -> Result<LayerGraph> {
    if g.mode != Mode::Fp32 {
        return Err(Error::Contract("insert_fake_quant expects an fp32 graph".into()));
    }
    for n in &g.nodes {
        if matches!(n.op, OpKind::BatchNorm(_) | OpKind::FusedConvBnRelu(..)) {
            return Err(Error::Contract("fold batch norm before inserting fake-quant".into()));
        }
    }
    // unfused conv -> relu chains defeat the two-tensor bookkeeping
    let mut consumer_count = vec![0usize; g.nodes.len()];
    let mut relu_consumer = vec![false; g.nodes.len()];
    for n in &g.nodes {
        for &i in &n.inputs {
            consumer_count[i] += 1;
            if matches!(n.op, OpKind::Relu) {
                relu_consumer[i] = true;
            }
        }
    }
    for n in &g.nodes {
        if matches!(n.op, OpKind::Conv(_)) && consumer_count[n.id] == 1 && relu_consumer[n.id] {
            return Err(Error::Contract("graph must be fused before inserting fake-quant".into()));
        }
    }

    let mut out = LayerGraph::new(g.input_shape.clone());
    out.mode = Mode::FakeQuant;
    out.nodes.clear();
    let mut map = vec![usize::MAX; g.nodes.len()];
    for n in &g.nodes {
        let inputs: Vec<usize> = n.inputs.iter().map(|&i| map[i]).collect();
        let id = out.push(n.op.clone(), inputs);
        out.nodes[id].id = id;
        map[n.id] = id;
        let needs_fq = matches!(
            n.op,
            OpKind::Input
                | OpKind::Conv(_)
                | OpKind::Linear(_)
                | OpKind::FusedConvRelu(_)
                | OpKind::Add
                | OpKind::Concat
        );
        if needs_fq {
            let obs = out.observers.len();
            out.observers.push(MinMaxObserver::per_tensor());
            let fq = out.push(OpKind::FakeQuant { observer: obs }, vec![id]);
            map[n.id] = fq;
        }
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// straight-through estimation
// ---------------------------------------------------------------------------

/// 1.0 where the affine map does not saturate, 0.0 where it clips.
#[inline]
fn ste_mask(x: f32, p: &QuantParams) -> f32 {
    let q = (x as f64 / p.scale + p.zero_point as f64).round_ties_even();
    if q >= p.qmin as f64 && q <= p.qmax as f64 {
        1.0
    } else {
        0.0
    }
}

/// Clipped straight-through gradient of fake-quantize: identity inside
/// the representable range, zero in saturation.
pub fn fake_quant_backward(upstream: &[f32], x: &[f32], p: &QuantParams) -> Vec<f32> {
    upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| g * ste_mask(v, p))
        .collect()
}

// ---------------------------------------------------------------------------
// taped forward and reverse-mode backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Saved {
    None,
    /// conv/linear: weights as seen by the forward pass plus the STE mask
    /// mapping d(effective)/d(raw), identity in fp32 mode.
    ConvLike { w_eff: FloatTensor, w_mask: Option<Vec<f32>> },
    Maxpool { argmax: Vec<usize> },
    Bn { x_hat: Vec<f32>, inv_std: Vec<f32> },
    FakeQuant { mask: Vec<f32> },
}

/// Recorded activations and per-node saved state from one training
/// forward pass.
pub struct Tape {
    pub values: Vec<FloatTensor>,
    saved: Vec<Saved>,
}

/// Per-node parameter gradients, aligned with the graph's node list.
#[derive(Debug, Clone, Default)]
pub struct NodeGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub struct Gradients {
    pub by_node: Vec<NodeGrads>,
}

impl Gradients {
    pub fn slice(&self, p: &ParamRef) -> &[f32] {
        let g = &self.by_node[p.node];
        match p.kind {
            ParamKind::Weight => &g.weight,
            ParamKind::BiasParam => &g.bias,
            ParamKind::Gamma => &g.gamma,
            ParamKind::Beta => &g.beta,
        }
    }
}

fn effective_conv_weights(g: &LayerGraph, node: usize) -> Result<(FloatTensor, Option<Vec<f32>>)> {
    let p = g.nodes[node].op.conv_params().unwrap();
    let w = p.weight.as_float()?;
    if g.mode == Mode::FakeQuant {
        let q = quantize_tensor(w, QuantizeMode::PerChannelSymmetric { axis: 0 })?;
        let w_eff = dequantize_tensor(&q);
        let mask = match &q.qscheme {
            QScheme::PerChannel { params, .. } => {
                let per = w.shape.len() / params.len();
                w.data
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| ste_mask(v, &params[i / per]))
                    .collect()
            }
            QScheme::PerTensor(_) => unreachable!(),
        };
        Ok((w_eff, Some(mask)))
    } else {
        Ok((w.clone(), None))
    }
}

/// Training-mode forward: batch norm uses batch statistics and updates
/// running stats, observers record activation ranges, and everything the
/// backward pass needs is recorded on the tape.
pub fn forward_train(g: &mut LayerGraph, x: &FloatTensor) -> Result<(FloatTensor, Tape)> {
    if g.mode == Mode::Int8 {
        return Err(Error::Contract("int8 graphs cannot be trained".into()));
    }
    let n_nodes = g.nodes.len();
    let mut values: Vec<FloatTensor> = Vec::with_capacity(n_nodes);
    let mut saved: Vec<Saved> = Vec::with_capacity(n_nodes);
    for id in 0..n_nodes {
        let op = g.nodes[id].op.clone();
        let inputs = g.nodes[id].inputs.clone();
        let (out, sv) = match &op {
            OpKind::Input => (x.clone(), Saved::None),
            OpKind::Conv(p) => {
                let (w_eff, w_mask) = effective_conv_weights(g, id)?;
                let y = kernels::conv2d_f32(&values[inputs[0]], &w_eff, p.bias.as_float()?, &p.spec)?;
                (y, Saved::ConvLike { w_eff, w_mask })
            }
            OpKind::FusedConvRelu(p) => {
                let (w_eff, w_mask) = effective_conv_weights(g, id)?;
                let y = kernels::conv2d_f32(&values[inputs[0]], &w_eff, p.bias.as_float()?, &p.spec)?;
                (kernels::relu_f32(&y), Saved::ConvLike { w_eff, w_mask })
            }
            OpKind::Linear(p) => {
                let (w_eff, w_mask) = effective_conv_weights(g, id)?;
                let xin = crate::graph::flatten_spatial(&values[inputs[0]])?;
                let y = kernels::linear_f32(&xin, &w_eff, p.bias.as_float()?)?;
                (y, Saved::ConvLike { w_eff, w_mask })
            }
            OpKind::Relu => (kernels::relu_f32(&values[inputs[0]]), Saved::None),
            OpKind::Add => (
                kernels::add_f32(&values[inputs[0]], &values[inputs[1]])?,
                Saved::None,
            ),
            OpKind::Concat => {
                let refs: Vec<&FloatTensor> = inputs.iter().map(|&i| &values[i]).collect();
                (kernels::concat_f32(&refs)?, Saved::None)
            }
            OpKind::Maxpool { window, stride } => {
                let (y, argmax) = maxpool_with_argmax(&values[inputs[0]], *window, *stride)?;
                (y, Saved::Maxpool { argmax })
            }
            OpKind::GlobalAvgPool => (kernels::global_avgpool_f32(&values[inputs[0]])?, Saved::None),
            OpKind::BatchNorm(_) => {
                let xin = values[inputs[0]].clone();
                let (mean, var) = kernels::batch_stats(&xin)?;
                let bn = match &mut g.nodes[id].op {
                    OpKind::BatchNorm(bn) => bn,
                    _ => unreachable!(),
                };
                for c in 0..mean.len() {
                    bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
                    bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var[c];
                }
                let dims = xin.shape.dims().to_vec();
                let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
                let mut x_hat = vec![0.0f32; xin.data.len()];
                let mut out = vec![0.0f32; xin.data.len()];
                for ci in 0..c {
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for i in base..base + h * w {
                            x_hat[i] = (xin.data[i] - mean[ci]) * inv_std[ci];
                            out[i] = bn.gamma[ci] * x_hat[i] + bn.beta[ci];
                        }
                    }
                }
                (
                    FloatTensor::new(xin.shape.clone(), out)?,
                    Saved::Bn { x_hat, inv_std },
                )
            }
            OpKind::FakeQuant { observer } => {
                if g.mode != Mode::FakeQuant {
                    return Err(Error::GraphInvalid("fake-quant node in fp32 graph".into()));
                }
                let xin = values[inputs[0]].clone();
                let obs = &mut g.observers[*observer];
                if g.observers_live {
                    obs.observe(&xin)?;
                }
                let p = obs.finalize_per_tensor(INT8_QMIN, INT8_QMAX, false)?;
                let y = crate::graph::fake_quant_tensor(&xin, &p);
                let mask: Vec<f32> = xin.data.iter().map(|&v| ste_mask(v, &p)).collect();
                (y, Saved::FakeQuant { mask })
            }
            OpKind::FusedConvBnRelu(..) | OpKind::QuantizeStub(_) | OpKind::DequantizeStub => {
                return Err(Error::Contract(format!(
                    "{} node is not trainable; fold/strip first",
                    op.name()
                )))
            }
        };
        values.push(out);
        saved.push(sv);
    }
    let out = values[n_nodes - 1].clone();
    Ok((out, Tape { values, saved }))
}

fn maxpool_with_argmax(x: &FloatTensor, window: usize, stride: usize) -> Result<(FloatTensor, Vec<usize>)> {
    let dims = x.shape.dims().to_vec();
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let spec = ConvSpec::new(stride, 0)?;
    let oh = spec.out_dim(h, window)?;
    let ow = spec.out_dim(w, window)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = ((ni * c + ci) * h + oy * stride + ky) * w + ox * stride + kx;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = ((ni * c + ci) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
    }
    Ok((FloatTensor::new(Shape::new(&[n, c, oh, ow])?, out)?, argmax))
}

/// Reverse-mode gradients for every trainable parameter given the
/// gradient of the loss with respect to the graph output.
pub fn backward(g: &LayerGraph, tape: &Tape, out_grad: &FloatTensor) -> Result<Gradients> {
    let n_nodes = g.nodes.len();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; n_nodes];
    grads[n_nodes - 1] = Some(out_grad.data.clone());
    let mut by_node: Vec<NodeGrads> = vec![NodeGrads::default(); n_nodes];

    let accumulate = |grads: &mut Vec<Option<Vec<f32>>>, id: usize, g_add: Vec<f32>| {
        match &mut grads[id] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&g_add) {
                    *a += b;
                }
            }
            slot => *slot = Some(g_add),
        }
    };

    for id in (0..n_nodes).rev() {
        let Some(dy) = grads[id].take() else { continue };
        let n = &g.nodes[id];
        match &n.op {
            OpKind::Input => {}
            OpKind::Conv(p) | OpKind::FusedConvRelu(p) => {
                let mut dy = dy;
                if matches!(n.op, OpKind::FusedConvRelu(_)) {
                    for (gv, &o) in dy.iter_mut().zip(&tape.values[id].data) {
                        if o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                let Saved::ConvLike { w_eff, w_mask } = &tape.saved[id] else {
                    return Err(Error::Contract("missing recorded conv state".into()));
                };
                let xin = &tape.values[n.inputs[0]];
                let (dx, mut dw, db) =
                    conv_backward(xin, w_eff, &p.spec, &tape.values[id].shape, &dy)?;
                if let Some(mask) = w_mask {
                    for (g, m) in dw.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                by_node[id].weight = dw;
                by_node[id].bias = db;
                if n.inputs[0] != 0 {
                    accumulate(&mut grads, n.inputs[0], dx);
                }
            }
            OpKind::Linear(_) => {
                let Saved::ConvLike { w_eff, w_mask } = &tape.saved[id] else {
                    return Err(Error::Contract("missing recorded linear state".into()));
                };
                let xin = crate::graph::flatten_spatial(&tape.values[n.inputs[0]])?;
                let dims = w_eff.shape.dims();
                let (c_out, c_in) = (dims[0], dims[1]);
                let b = xin.shape.dims()[0];
                let mut dw = vec![0.0f32; c_out * c_in];
                let mut db = vec![0.0f32; c_out];
                let mut dx = vec![0.0f32; b * c_in];
                for bi in 0..b {
                    for oc in 0..c_out {
                        let gy = dy[bi * c_out + oc];
                        db[oc] += gy;
                        for ic in 0..c_in {
                            dw[oc * c_in + ic] += gy * xin.data[bi * c_in + ic];
                            dx[bi * c_in + ic] += gy * w_eff.data[oc * c_in + ic];
                        }
                    }
                }
                if let Some(mask) = w_mask {
                    for (g, m) in dw.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                by_node[id].weight = dw;
                by_node[id].bias = db;
                if n.inputs[0] != 0 {
                    accumulate(&mut grads, n.inputs[0], dx);
                }
            }
            OpKind::Relu => {
                let xin = &tape.values[n.inputs[0]];
                let dx: Vec<f32> = dy
                    .iter()
                    .zip(&xin.data)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads, n.inputs[0], dx);
            }
            OpKind::Add => {
                accumulate(&mut grads, n.inputs[0], dy.clone());
                accumulate(&mut grads, n.inputs[1], dy);
            }
            OpKind::Concat => {
                let dims = tape.values[id].shape.dims().to_vec();
                let (b, h, w) = (dims[0], dims[2], dims[3]);
                let c_total = dims[1];
                let mut c_off = 0usize;
                for &inp in &n.inputs {
                    let tc = tape.values[inp].shape.dims()[1];
                    let mut dx = vec![0.0f32; b * tc * h * w];
                    for bi in 0..b {
                        let src = (bi * c_total + c_off) * h * w;
                        let dst = bi * tc * h * w;
                        dx[dst..dst + tc * h * w].copy_from_slice(&dy[src..src + tc * h * w]);
                    }
                    accumulate(&mut grads, inp, dx);
                    c_off += tc;
                }
            }
            OpKind::Maxpool { .. } => {
                let Saved::Maxpool { argmax } = &tape.saved[id] else {
                    return Err(Error::Contract("missing recorded pool state".into()));
                };
                let mut dx = vec![0.0f32; tape.values[n.inputs[0]].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[o];
                }
                accumulate(&mut grads, n.inputs[0], dx);
            }
            OpKind::GlobalAvgPool => {
                let dims = tape.values[n.inputs[0]].shape.dims().to_vec();
                let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let denom = (h * w) as f32;
                let mut dx = vec![0.0f32; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let gy = dy[bi * c + ci] / denom;
                        let base = (bi * c + ci) * h * w;
                        for v in &mut dx[base..base + h * w] {
                            *v = gy;
                        }
                    }
                }
                accumulate(&mut grads, n.inputs[0], dx);
            }
            OpKind::BatchNorm(bn) => {
                let Saved::Bn { x_hat, inv_std } = &tape.saved[id] else {
                    return Err(Error::Contract("missing recorded bn state".into()));
                };
                let dims = tape.values[n.inputs[0]].shape.dims().to_vec();
                let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let count = (b * h * w) as f32;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ci in 0..c {
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for i in base..base + h * w {
                            dgamma[ci] += dy[i] * x_hat[i];
                            dbeta[ci] += dy[i];
                        }
                    }
                }
                let mut dx = vec![0.0f32; dy.len()];
                for ci in 0..c {
                    let k = bn.gamma[ci] * inv_std[ci] / count;
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for i in base..base + h * w {
                            dx[i] = k * (count * dy[i] - dbeta[ci] - x_hat[i] * dgamma[ci]);
                        }
                    }
                }
                by_node[id].gamma = dgamma;
                by_node[id].beta = dbeta;
                accumulate(&mut grads, n.inputs[0], dx);
            }
            OpKind::FakeQuant { .. } => {
                let Saved::FakeQuant { mask } = &tape.saved[id] else {
                    return Err(Error::Contract("missing recorded fake-quant state".into()));
                };
                let dx: Vec<f32> = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                if n.inputs[0] != 0 {
                    accumulate(&mut grads, n.inputs[0], dx);
                }
            }
            OpKind::FusedConvBnRelu(..) | OpKind::QuantizeStub(_) | OpKind::DequantizeStub => {
                return Err(Error::Contract("node kind not valid in a training graph".into()))
            }
        }
    }
    Ok(Gradients { by_node })
}

fn conv_backward(
    x: &FloatTensor,
    w: &FloatTensor,
    spec: &ConvSpec,
    out_shape: &Shape,
    dy: &[f32],
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let xd = x.shape.dims().to_vec();
    let wd = w.shape.dims().to_vec();
    let od = out_shape.dims().to_vec();
    let (b, c_in, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
    let (c_out, _, fh, fw) = (wd[0], wd[1], wd[2], wd[3]);
    let (oh, ow) = (od[2], od[3]);
    let mut dx = vec![0.0f32; x.data.len()];
    let mut dw = vec![0.0f32; w.data.len()];
    let mut db = vec![0.0f32; c_out];
    for bi in 0..b {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gy = dy[((bi * c_out + oc) * oh + oy) * ow + ox];
                    if gy == 0.0 {
                        continue;
                    }
                    db[oc] += gy;
                    for ic in 0..c_in {
                        for ky in 0..fh {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..fw {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix < 0 || ix as usize >= wid {
                                    continue;
                                }
                                let xi = ((bi * c_in + ic) * h + iy as usize) * wid + ix as usize;
                                let wi = ((oc * c_in + ic) * fh + ky) * fw + kx;
                                dw[wi] += gy * x.data[xi];
                                dx[xi] += gy * w.data[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// loss and optimizer
// ---------------------------------------------------------------------------

/// Cross-entropy for one sample: loss and gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<(f32, Vec<f32>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange(label, logits.len()));
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut grad: Vec<f32> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch of logits `(batch, classes)`.
pub fn cross_entropy_batch(logits: &FloatTensor, labels: &[usize]) -> Result<(f32, FloatTensor)> {
    let dims = logits.shape.dims();
    let (b, k) = (dims[0], dims[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch("label count != batch size".into()));
    }
    let mut total = 0.0f32;
    let mut grad = vec![0.0f32; b * k];
    for (bi, &label) in labels.iter().enumerate() {
        let (loss, g) = cross_entropy(&logits.data[bi * k..(bi + 1) * k], label)?;
        total += loss;
        for (dst, &v) in grad[bi * k..(bi + 1) * k].iter_mut().zip(&g) {
            *dst = v / b as f32;
        }
    }
    Ok((total / b as f32, FloatTensor { shape: logits.shape.clone(), data: grad }))
}

/// One Adam update over every trainable parameter.
pub fn adam_step(g: &mut LayerGraph, state: &mut TrainState, grads: &Gradients, cfg: &QatConfig) {
    state.step += 1;
    let t = state.step as f32;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in state.params.clone().iter().enumerate() {
        let gs = grads.slice(p);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        debug_assert_eq!(gs.len(), m.len());
        let theta = param_slice_mut(g, p);
        for j in 0..gs.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gs[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gs[j] * gs[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One line of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
}

fn stack_batch(d: &Dataset, idx: &[usize]) -> Result<(FloatTensor, Vec<usize>)> {
    let first = &d.images[idx[0]];
    let dims = first.shape.dims().to_vec();
    let per = first.data.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&d.images[i].data);
        labels.push(d.labels[i]);
    }
    Ok((
        FloatTensor::new(Shape::new(&[idx.len(), dims[0], dims[1], dims[2]])?, data)?,
        labels,
    ))
}

/// Top-1 accuracy of the graph over a dataset (inference mode: observers
/// frozen, batch norm uses running statistics).
pub fn accuracy(g: &mut LayerGraph, d: &Dataset, batch_size: usize) -> Result<f32> {
    if d.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let live = g.observers_live;
    g.observers_live = false;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = stack_batch(d, chunk)?;
        let logits = g.forward(&x)?;
        let k = logits.shape.dims()[1];
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data[bi * k..(bi + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    g.observers_live = live;
    Ok(correct as f32 / d.len() as f32)
}

/// Minibatch training (fp32 baseline or QAT depending on the graph's
/// mode). Returns the trained graph and per-epoch history.
pub fn train(
    mut g: LayerGraph,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &QatConfig,
) -> Result<(LayerGraph, Vec<EpochRecord>)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("empty training or validation split".into()));
    }
    let mut state = TrainState::new(&g);
    let mut rng = Rng::new(cfg.seed ^ SHUFFLE_DOMAIN);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut idx);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let (x, labels) = stack_batch(train_set, chunk)?;
            let (logits, tape) = forward_train(&mut g, &x)?;
            let (loss, grad) = cross_entropy_batch(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at epoch {epoch}")));
            }
            let k = logits.shape.dims()[1];
            for (bi, &label) in labels.iter().enumerate() {
                let row = &logits.data[bi * k..(bi + 1) * k];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == label {
                    correct += 1;
                }
            }
            let grads = backward(&g, &tape, &grad)?;
            adam_step(&mut g, &mut state, &grads, cfg);
            loss_sum += loss as f64;
            batches += 1;
        }
        let val_acc = accuracy(&mut g, val_set, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / batches.max(1) as f64) as f32,
            train_acc: correct as f32 / train_set.len() as f32,
            val_acc,
        });
    }
    Ok((g, history))
}

// seed-domain separator for the shuffle stream
const SHUFFLE_DOMAIN: u64 = 0x5eed_0f_04a7;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Bias, ConvParams};
    use crate::quant::fake_quantize;

    fn rand_tensor(rng: &mut Rng, dims: &[usize], lo: f32, hi: f32) -> FloatTensor {
        let shape = Shape::new(dims).unwrap();
        let data = (0..shape.len()).map(|_| rng.uniform(lo, hi)).collect();
        FloatTensor::new(shape, data).unwrap()
    }

    fn conv_params(rng: &mut Rng, c_out: usize, c_in: usize, k: usize, spec: ConvSpec) -> ConvParams {
        ConvParams {
            weight: Weights::Float(rand_tensor(rng, &[c_out, c_in, k, k], -0.5, 0.5)),
            bias: Bias::Float((0..c_out).map(|_| rng.uniform(-0.1, 0.1)).collect()),
            spec,
        }
    }

    /// conv -> bn -> relu -> maxpool -> gavgpool -> linear over a 2x5x5 input.
    fn tiny_graph(seed: u64) -> LayerGraph {
        let mut rng = Rng::new(seed);
        let mut g = LayerGraph::new(Shape::new(&[2, 5, 5]).unwrap());
        let c = g.push(
            OpKind::Conv(conv_params(&mut rng, 3, 2, 3, ConvSpec::new(1, 1).unwrap())),
            vec![0],
        );
        let bn = g.push(OpKind::BatchNorm(crate::graph::BnParams::identity(3)), vec![c]);
        let r = g.push(OpKind::Relu, vec![bn]);
        let mp = g.push(OpKind::Maxpool { window: 2, stride: 2 }, vec![r]);
        let gp = g.push(OpKind::GlobalAvgPool, vec![mp]);
        let lin = ConvParams {
            weight: Weights::Float(rand_tensor(&mut rng, &[4, 3], -0.5, 0.5)),
            bias: Bias::Float(vec![0.05, -0.02, 0.01, 0.0]),
            spec: ConvSpec::new(1, 0).unwrap(),
        };
        g.push(OpKind::Linear(lin), vec![gp]);
        g
    }

    fn loss_of(g: &mut LayerGraph, x: &FloatTensor, labels: &[usize]) -> f32 {
        let (logits, _) = forward_train(g, x).unwrap();
        cross_entropy_batch(&logits, labels).unwrap().0
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let (loss, grad) = cross_entropy(&[0.0; 9], 4).unwrap();
        assert!((loss - (9.0f32).ln()).abs() < 1e-6);
        for (i, &gv) in grad.iter().enumerate() {
            let want = if i == 4 { 1.0 / 9.0 - 1.0 } else { 1.0 / 9.0 };
            assert!((gv - want).abs() < 1e-6);
        }
        assert!(cross_entropy(&[0.0; 9], 9).is_err());
    }

    #[test]
    fn cross_entropy_batch_averages() {
        let logits = FloatTensor::new(
            Shape::new(&[2, 3]).unwrap(),
            vec![1.0, 0.0, -1.0, 0.0, 2.0, 0.0],
        )
        .unwrap();
        let (loss, grad) = cross_entropy_batch(&logits, &[0, 1]).unwrap();
        let (l0, g0) = cross_entropy(&[1.0, 0.0, -1.0], 0).unwrap();
        let (l1, g1) = cross_entropy(&[0.0, 2.0, 0.0], 1).unwrap();
        assert!((loss - 0.5 * (l0 + l1)).abs() < 1e-6);
        for i in 0..3 {
            assert!((grad.data[i] - 0.5 * g0[i]).abs() < 1e-6);
            assert!((grad.data[3 + i] - 0.5 * g1[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut g = tiny_graph(11);
        let mut rng = Rng::new(99);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let labels = [1usize, 3];
        let (logits, tape) = forward_train(&mut g, &x).unwrap();
        let (_, lg) = cross_entropy_batch(&logits, &labels).unwrap();
        let grads = backward(&g, &tape, &lg).unwrap();
        let params = trainable_params(&g);
        let h = 1e-2f32;
        let mut checked = 0usize;
        for p in &params {
            let n = param_slice(&g, p).len();
            // probe a spread of indices in each tensor
            for j in (0..n).step_by((n / 6).max(1)) {
                let orig = param_slice(&g, p)[j];
                param_slice_mut(&mut g, p)[j] = orig + h;
                let lp = loss_of(&mut g, &x, &labels);
                param_slice_mut(&mut g, p)[j] = orig - h;
                let lm = loss_of(&mut g, &x, &labels);
                param_slice_mut(&mut g, p)[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.slice(p)[j];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                assert!(
                    rel <= 1e-4,
                    "node {} kind {:?} idx {j}: analytic {an} vs fd {fd} (rel {rel})",
                    p.node,
                    p.kind
                );
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn ste_passes_in_range_and_blocks_saturation() {
        let p = QuantParams::int8(0.1, 0).unwrap();
        let g = fake_quant_backward(&[1.0, 1.0, 1.0], &[0.25, 1000.0, -50.0], &p);
        assert_eq!(g, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn ste_matches_interval_averaged_slope() {
        let p = QuantParams::int8(0.1, 0).unwrap();
        // in-range interval: averaged true slope of the staircase ~ 1
        let (a, b) = (-2.0f64, 2.0f64);
        let slope = (fake_quantize(b, &p).unwrap() - fake_quantize(a, &p).unwrap()) / (b - a);
        let ste: f64 = fake_quant_backward(&[1.0], &[0.0], &p)[0] as f64;
        assert!((slope - ste).abs() / slope.abs() <= 0.10, "slope {slope} vs ste {ste}");
        // fully saturated interval: true slope 0, STE 0
        let (a, b) = (20.0f64, 30.0f64);
        let slope = (fake_quantize(b, &p).unwrap() - fake_quantize(a, &p).unwrap()) / (b - a);
        let ste = fake_quant_backward(&[1.0], &[25.0], &p)[0] as f64;
        assert_eq!(slope, 0.0);
        assert_eq!(ste, 0.0);
    }

    #[test]
    fn insert_fake_quant_placement() {
        // fused conv-relu graph: one fq on the input, one after the conv-relu
        let mut rng = Rng::new(3);
        let mut g = LayerGraph::new(Shape::new(&[2, 5, 5]).unwrap());
        let c = g.push(
            OpKind::FusedConvRelu(conv_params(&mut rng, 3, 2, 3, ConvSpec::new(1, 1).unwrap())),
            vec![0],
        );
        g.push(OpKind::GlobalAvgPool, vec![c]);
        let fq = insert_fake_quant(&g).unwrap();
        let n_fq = fq
            .nodes
            .iter()
            .filter(|n| matches!(n.op, OpKind::FakeQuant { .. }))
            .count();
        assert_eq!(n_fq, 2);
        assert_eq!(fq.observers.len(), 2);
        assert_eq!(fq.mode, Mode::FakeQuant);
        // graphs that still carry batch norm are rejected
        let unfused = tiny_graph(1);
        assert!(matches!(insert_fake_quant(&unfused), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_respects_learning_rate() {
        let mut g = tiny_graph(7);
        let frozen = tiny_graph(7);
        let mut state = TrainState::new(&g);
        let mut rng = Rng::new(4);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let (logits, tape) = forward_train(&mut g, &x).unwrap();
        let (_, lg) = cross_entropy_batch(&logits, &[0]).unwrap();
        let grads = backward(&g, &tape, &lg).unwrap();
        // zero lr: parameters unchanged
        let cfg = QatConfig { learning_rate: 0.0, ..QatConfig::default() };
        adam_step(&mut g, &mut state, &grads, &cfg);
        for p in &state.params.clone() {
            assert_eq!(param_slice(&g, p), param_slice(&frozen, p));
        }
        // positive lr: loss decreases along the update for a fixed batch
        let before = loss_of(&mut g, &x, &[0]);
        let cfg = QatConfig { learning_rate: 1e-2, ..QatConfig::default() };
        let mut state = TrainState::new(&g);
        for _ in 0..5 {
            let (logits, tape) = forward_train(&mut g, &x).unwrap();
            let (_, lg) = cross_entropy_batch(&logits, &[0]).unwrap();
            let grads = backward(&g, &tape, &lg).unwrap();
            adam_step(&mut g, &mut state, &grads, &cfg);
        }
        let after = loss_of(&mut g, &x, &[0]);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = FloatTensor::new(
            Shape::new(&[1, 1, 2, 2]).unwrap(),
            vec![1.0, 5.0, 2.0, 3.0],
        )
        .unwrap();
        let (y, argmax) = maxpool_with_argmax(&x, 2, 2).unwrap();
        assert_eq!(y.data, vec![5.0]);
        assert_eq!(argmax, vec![1]);
    }

    #[test]
    fn training_is_deterministic() {
        let d = crate::data::generate_synthetic(5, 2, 8).unwrap();
        let cfg = QatConfig { epochs: 2, batch_size: 4, seed: 9, ..QatConfig::default() };
        let run = || {
            let mut g = LayerGraph::new(Shape::new(&[3, 8, 8]).unwrap());
            let mut rng = Rng::new(42);
            let c = g.push(
                OpKind::FusedConvRelu(conv_params(&mut rng, 4, 3, 3, ConvSpec::new(1, 1).unwrap())),
                vec![0],
            );
            let gp = g.push(OpKind::GlobalAvgPool, vec![c]);
            let lin = ConvParams {
                weight: Weights::Float(rand_tensor(&mut rng, &[9, 4], -0.5, 0.5)),
                bias: Bias::Float(vec![0.0; 9]),
                spec: ConvSpec::new(1, 0).unwrap(),
            };
            g.push(OpKind::Linear(lin), vec![gp]);
            train(g, &d, &d, &cfg).unwrap()
        };
        let (g1, h1) = run();
        let (g2, h2) = run();
        assert_eq!(h1, h2);
        for (a, b) in trainable_params(&g1).iter().zip(&trainable_params(&g2)) {
            assert_eq!(param_slice(&g1, a), param_slice(&g2, b));
        }
    }

    #[test]
    fn fake_quant_training_graph_runs_end_to_end() {
        let mut rng = Rng::new(8);
        let mut g = LayerGraph::new(Shape::new(&[2, 5, 5]).unwrap());
        let c = g.push(
            OpKind::FusedConvRelu(conv_params(&mut rng, 3, 2, 3, ConvSpec::new(1, 1).unwrap())),
            vec![0],
        );
        let gp = g.push(OpKind::GlobalAvgPool, vec![c]);
        let lin = ConvParams {
            weight: Weights::Float(rand_tensor(&mut rng, &[4, 3], -0.5, 0.5)),
            bias: Bias::Float(vec![0.0; 4]),
            spec: ConvSpec::new(1, 0).unwrap(),
        };
        g.push(OpKind::Linear(lin), vec![gp]);
        let mut fq = insert_fake_quant(&g).unwrap();
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let (logits, tape) = forward_train(&mut fq, &x).unwrap();
        assert_eq!(logits.shape.dims(), &[2, 4]);
        let (_, lg) = cross_entropy_batch(&logits, &[0, 2]).unwrap();
        let grads = backward(&fq, &tape, &lg).unwrap();
        // weight gradients exist for every conv/linear node
        for p in trainable_params(&fq) {
            assert!(!grads.slice(&p).is_empty());
        }
    }
}
