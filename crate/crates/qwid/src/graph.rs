//! Layer-graph representation and passes: Conv-ReLU / Conv-BN-ReLU fusion,
//! batch-norm folding, fp32 -> int8 conversion, forward execution in all
//! three numeric modes, and static analysis (OPs count, memory footprint).
//!
//! Node 0 is always the graph input; every other node references earlier
//! nodes only, and the last node is the single graph output.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, RequantSpec};
use crate::observer::MinMaxObserver;
use crate::quant::{QuantParams, INT8_QMAX, INT8_QMIN};
use crate::tensor::{
    dequantize_tensor, quantize_tensor, quantize_tensor_with, FloatTensor, QScheme, QuantTensor,
    QuantizeMode, Shape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fp32,
    FakeQuant,
    Int8,
}

/// Weight payload: fp32 before conversion, int8 after.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Float(FloatTensor),
    Quant(QuantTensor),
}

impl Weights {
    pub fn shape(&self) -> &Shape {
        match self {
            Weights::Float(t) => &t.shape,
            Weights::Quant(t) => &t.shape,
        }
    }

    pub fn as_float(&self) -> Result<&FloatTensor> {
        match self {
            Weights::Float(t) => Ok(t),
            Weights::Quant(_) => Err(Error::GraphInvalid("expected fp32 weights".into())),
        }
    }

    pub fn as_quant(&self) -> Result<&QuantTensor> {
        match self {
            Weights::Quant(t) => Ok(t),
            Weights::Float(_) => Err(Error::GraphInvalid("expected int8 weights".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bias {
    Float(Vec<f32>),
    Int(Vec<i32>),
}

impl Bias {
    pub fn as_float(&self) -> Result<&[f32]> {
        match self {
            Bias::Float(b) => Ok(b),
            Bias::Int(_) => Err(Error::GraphInvalid("expected fp32 bias".into())),
        }
    }

    pub fn as_int(&self) -> Result<&[i32]> {
        match self {
            Bias::Int(b) => Ok(b),
            Bias::Float(_) => Err(Error::GraphInvalid("expected i32 bias".into())),
        }
    }
}

/// Parameters of a conv or linear node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Weights,
    pub bias: Bias,
    pub spec: ConvSpec,
}

/// Batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Graph input placeholder; always node 0.
    Input,
    Conv(ConvParams),
    Linear(ConvParams),
    Relu,
    Add,
    Maxpool { window: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm(BnParams),
    FusedConvRelu(ConvParams),
    FusedConvBnRelu(ConvParams, BnParams),
    Concat,
    /// int8 mode: quantize the fp32 graph input with the recorded params.
    QuantizeStub(QuantParams),
    /// int8 mode: dequantize the final activation back to fp32 logits.
    DequantizeStub,
    /// Fake-quant simulation node paired with an observer.
    FakeQuant { observer: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv(_) => "conv",
            OpKind::Linear(_) => "linear",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Maxpool { .. } => "maxpool",
            OpKind::GlobalAvgPool => "gavgpool",
            OpKind::BatchNorm(_) => "batchnorm",
            OpKind::FusedConvRelu(_) => "conv-relu",
            OpKind::FusedConvBnRelu(..) => "conv-bn-relu",
            OpKind::Concat => "concat",
            OpKind::QuantizeStub(_) => "quantize",
            OpKind::DequantizeStub => "dequantize",
            OpKind::FakeQuant { .. } => "fake-quant",
        }
    }

    pub fn conv_params(&self) -> Option<&ConvParams> {
        match self {
            OpKind::Conv(p) | OpKind::Linear(p) | OpKind::FusedConvRelu(p) | OpKind::FusedConvBnRelu(p, _) => {
                Some(p)
            }
            _ => None,
        }
    }

    pub fn conv_params_mut(&mut self) -> Option<&mut ConvParams> {
        match self {
            OpKind::Conv(p) | OpKind::Linear(p) | OpKind::FusedConvRelu(p) | OpKind::FusedConvBnRelu(p, _) => {
                Some(p)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub op: OpKind,
    pub inputs: Vec<usize>,
    /// int8 mode: params of this node's output activation.
    pub out_params: Option<QuantParams>,
    /// int8 mode conv/linear: requantization spec.
    pub requant: Option<RequantSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub mode: Mode,
    pub nodes: Vec<Node>,
    pub observers: Vec<MinMaxObserver>,
    /// Activation input shape without the batch dim: (channels, height, width).
    pub input_shape: Shape,
    /// int8 mode: params the graph input is quantized with.
    pub input_params: Option<QuantParams>,
    /// When false (inference), fake-quant nodes stop updating observers.
    pub observers_live: bool,
}

/// Runtime value flowing along a graph edge.
#[derive(Debug, Clone)]
pub enum Value {
    F(FloatTensor),
    Q(QuantTensor),
}

impl Value {
    pub fn as_f(&self) -> Result<&FloatTensor> {
        match self {
            Value::F(t) => Ok(t),
            Value::Q(_) => Err(Error::GraphInvalid("expected fp32 value".into())),
        }
    }

    pub fn as_q(&self) -> Result<&QuantTensor> {
        match self {
            Value::Q(t) => Ok(t),
            Value::F(_) => Err(Error::GraphInvalid("expected quantized value".into())),
        }
    }
}

impl LayerGraph {
    /// Empty fp32 graph over inputs of shape (channels, height, width).
    pub fn new(input_shape: Shape) -> Self {
        let input = Node {
            id: 0,
            op: OpKind::Input,
            inputs: vec![],
            out_params: None,
            requant: None,
        };
        LayerGraph {
            mode: Mode::Fp32,
            nodes: vec![input],
            observers: Vec::new(),
            input_shape,
            input_params: None,
            observers_live: true,
        }
    }

    /// Append a node; returns its id.
    pub fn push(&mut self, op: OpKind, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { id, op, inputs, out_params: None, requant: None });
        id
    }

    pub fn output_id(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut consumed = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::GraphInvalid("node ids out of order".into()));
            }
            for &inp in &n.inputs {
                if inp >= i {
                    return Err(Error::GraphInvalid(format!("node {i} references later node {inp}")));
                }
                consumed[inp] = true;
            }
            if matches!(n.op, OpKind::Add) && n.inputs.len() != 2 {
                return Err(Error::GraphInvalid("add node needs exactly two inputs".into()));
            }
        }
        for (i, c) in consumed.iter().enumerate().take(self.nodes.len() - 1) {
            if !c {
                return Err(Error::GraphInvalid(format!("node {i} has no consumer")));
            }
        }
        Ok(())
    }

    fn consumers(&self) -> Vec<Vec<usize>> {
        let mut cs = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &inp in &n.inputs {
                cs[inp].push(n.id);
            }
        }
        cs
    }

    /// Infer output shape of every node for the given batch size.
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let shape = match &n.op {
                OpKind::Input => {
                    let d = self.input_shape.dims();
                    Shape::new(&[batch, d[0], d[1], d[2]])?
                }
                OpKind::QuantizeStub(_) | OpKind::DequantizeStub | OpKind::Relu | OpKind::FakeQuant { .. } => {
                    shapes[n.inputs[0]].clone()
                }
                OpKind::BatchNorm(_) => shapes[n.inputs[0]].clone(),
                OpKind::Add => {
                    let a = &shapes[n.inputs[0]];
                    if a != &shapes[n.inputs[1]] {
                        return Err(Error::ShapeMismatch("add operand shapes differ".into()));
                    }
                    a.clone()
                }
                OpKind::Concat => {
                    let first = shapes[n.inputs[0]].dims().to_vec();
                    let mut c = 0usize;
                    for &inp in &n.inputs {
                        c += shapes[inp].dims()[1];
                    }
                    Shape::new(&[first[0], c, first[2], first[3]])?
                }
                OpKind::Maxpool { window, stride } => {
                    let d = shapes[n.inputs[0]].dims().to_vec();
                    let spec = ConvSpec::new(*stride, 0)?;
                    Shape::new(&[d[0], d[1], spec.out_dim(d[2], *window)?, spec.out_dim(d[3], *window)?])?
                }
                OpKind::GlobalAvgPool => {
                    let d = shapes[n.inputs[0]].dims().to_vec();
                    Shape::new(&[d[0], d[1], 1, 1])?
                }
                OpKind::Conv(p) | OpKind::FusedConvRelu(p) | OpKind::FusedConvBnRelu(p, _) => {
                    let d = shapes[n.inputs[0]].dims().to_vec();
                    let w = p.weight.shape().dims();
                    Shape::new(&[
                        d[0],
                        w[0],
                        p.spec.out_dim(d[2], w[2])?,
                        p.spec.out_dim(d[3], w[3])?,
                    ])?
                }
                OpKind::Linear(p) => {
                    let d = shapes[n.inputs[0]].dims().to_vec();
                    Shape::new(&[d[0], p.weight.shape().dims()[0]])?
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Run the graph on a batch of fp32 inputs; returns fp32 logits.
    ///
    /// In fake-quant mode with live observers this updates the running
    /// ranges, which is why it takes `&mut self`.
    pub fn forward(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        match self.mode {
            Mode::Fp32 | Mode::FakeQuant => self.forward_real(x),
            Mode::Int8 => self.forward_int8(x),
        }
    }

    fn forward_real(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        let fake = self.mode == Mode::FakeQuant;
        let mut values: Vec<Option<FloatTensor>> = vec![None; self.nodes.len()];
        let n_nodes = self.nodes.len();
        for id in 0..n_nodes {
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let get = |values: &Vec<Option<FloatTensor>>, i: usize| -> FloatTensor {
                values[inputs[i]].clone().expect("topological order")
            };
            let out = match &op {
                OpKind::Input => x.clone(),
                OpKind::Conv(p) => {
                    let xin = get(&values, 0);
                    let (w, b) = self.effective_weights(p, fake)?;
                    kernels::conv2d_f32(&xin, &w, &b, &p.spec)?
                }
                OpKind::FusedConvRelu(p) => {
                    let xin = get(&values, 0);
                    let (w, b) = self.effective_weights(p, fake)?;
                    kernels::relu_f32(&kernels::conv2d_f32(&xin, &w, &b, &p.spec)?)
                }
                OpKind::FusedConvBnRelu(p, bn) => {
                    let xin = get(&values, 0);
                    let (w, b) = self.effective_weights(p, fake)?;
                    let y = kernels::conv2d_f32(&xin, &w, &b, &p.spec)?;
                    let y = kernels::batchnorm_f32(
                        &y,
                        &bn.gamma,
                        &bn.beta,
                        &bn.running_mean,
                        &bn.running_var,
                        bn.eps,
                    )?;
                    kernels::relu_f32(&y)
                }
                OpKind::Linear(p) => {
                    let xin = get(&values, 0);
                    let xin = flatten_spatial(&xin)?;
                    let (w, b) = self.effective_weights(p, fake)?;
                    kernels::linear_f32(&xin, &w, &b)?
                }
                OpKind::Relu => kernels::relu_f32(&get(&values, 0)),
                OpKind::Add => kernels::add_f32(&get(&values, 0), &get(&values, 1))?,
                OpKind::Concat => {
                    let ts: Vec<FloatTensor> = (0..inputs.len()).map(|i| get(&values, i)).collect();
                    let refs: Vec<&FloatTensor> = ts.iter().collect();
                    kernels::concat_f32(&refs)?
                }
                OpKind::Maxpool { window, stride } => kernels::maxpool2d_f32(&get(&values, 0), *window, *stride)?,
                OpKind::GlobalAvgPool => kernels::global_avgpool_f32(&get(&values, 0))?,
                OpKind::BatchNorm(bn) => kernels::batchnorm_f32(
                    &get(&values, 0),
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    bn.eps,
                )?,
                OpKind::FakeQuant { observer } => {
                    let xin = get(&values, 0);
                    if !fake {
                        return Err(Error::GraphInvalid("fake-quant node in fp32 graph".into()));
                    }
                    let obs = &mut self.observers[*observer];
                    if self.observers_live {
                        obs.observe(&xin)?;
                    }
                    let p = obs.finalize_per_tensor(INT8_QMIN, INT8_QMAX, false)?;
                    fake_quant_tensor(&xin, &p)
                }
                OpKind::QuantizeStub(_) | OpKind::DequantizeStub => {
                    return Err(Error::GraphInvalid("int8 stub in real-mode graph".into()))
                }
            };
            values[id] = Some(out);
        }
        Ok(values[n_nodes - 1].take().expect("graph output"))
    }

    /// Weights as used by the forward pass: fake-quantized per-channel in
    /// fake-quant mode, raw otherwise.
    fn effective_weights(&self, p: &ConvParams, fake: bool) -> Result<(FloatTensor, Vec<f32>)> {
        let w = p.weight.as_float()?;
        let b = p.bias.as_float()?.to_vec();
        if fake {
            let q = quantize_tensor(w, QuantizeMode::PerChannelSymmetric { axis: 0 })?;
            Ok((dequantize_tensor(&q), b))
        } else {
            Ok((w.clone(), b))
        }
    }

    fn forward_int8(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let mut values: Vec<Option<Value>> = vec![None; self.nodes.len()];
        for n in &self.nodes {
            let out = match &n.op {
                OpKind::Input => Value::F(x.clone()),
                OpKind::QuantizeStub(p) => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_f()?;
                    Value::Q(quantize_tensor_with(xin, &QScheme::PerTensor(*p)))
                }
                OpKind::DequantizeStub => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    Value::F(dequantize_tensor(xin))
                }
                OpKind::Conv(p) | OpKind::FusedConvRelu(p) => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    let w = p.weight.as_quant()?;
                    let b = p.bias.as_int()?;
                    let rq = n
                        .requant
                        .as_ref()
                        .ok_or_else(|| Error::GraphInvalid("conv missing requant spec".into()))?;
                    let y = if matches!(n.op, OpKind::FusedConvRelu(_)) {
                        kernels::qconv2d_relu(xin, w, b, &p.spec, rq)?
                    } else {
                        kernels::qconv2d(xin, w, b, &p.spec, rq)?
                    };
                    Value::Q(y)
                }
                OpKind::Linear(p) => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    let xin = flatten_spatial_q(xin)?;
                    let w = p.weight.as_quant()?;
                    let b = p.bias.as_int()?;
                    let rq = n
                        .requant
                        .as_ref()
                        .ok_or_else(|| Error::GraphInvalid("linear missing requant spec".into()))?;
                    Value::Q(kernels::qlinear(&xin, w, b, rq)?)
                }
                OpKind::Relu => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    let p = n
                        .out_params
                        .or_else(|| xin.qscheme.per_tensor().copied())
                        .ok_or_else(|| Error::GraphInvalid("relu missing params".into()))?;
                    Value::Q(kernels::qrelu(xin, p)?)
                }
                OpKind::Add => {
                    let a = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    let b = values[n.inputs[1]].as_ref().unwrap().as_q()?;
                    let p = n
                        .out_params
                        .ok_or_else(|| Error::GraphInvalid("add missing output params".into()))?;
                    Value::Q(kernels::qadd(a, b, p)?)
                }
                OpKind::Concat => {
                    let ts: Vec<&QuantTensor> = n
                        .inputs
                        .iter()
                        .map(|&i| values[i].as_ref().unwrap().as_q())
                        .collect::<Result<_>>()?;
                    let p = n
                        .out_params
                        .ok_or_else(|| Error::GraphInvalid("concat missing output params".into()))?;
                    Value::Q(kernels::qconcat(&ts, p)?)
                }
                OpKind::Maxpool { window, stride } => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    Value::Q(kernels::maxpool2d_q(xin, *window, *stride)?)
                }
                OpKind::GlobalAvgPool => {
                    let xin = values[n.inputs[0]].as_ref().unwrap().as_q()?;
                    let p = n
                        .out_params
                        .or_else(|| xin.qscheme.per_tensor().copied())
                        .ok_or_else(|| Error::GraphInvalid("gavgpool missing params".into()))?;
                    Value::Q(kernels::global_avgpool_q(xin, p)?)
                }
                OpKind::BatchNorm(_) | OpKind::FusedConvBnRelu(..) | OpKind::FakeQuant { .. } => {
                    return Err(Error::GraphInvalid(format!(
                        "{} node not valid in int8 mode",
                        n.op.name()
                    )))
                }
            };
            values[n.id] = Some(out);
        }
        match values[self.output_id()].take().unwrap() {
            Value::F(t) => Ok(t),
            Value::Q(_) => Err(Error::GraphInvalid("int8 graph must end in a dequantize stub".into())),
        }
    }

    /// Fuse Conv-ReLU and Conv-BN-ReLU chains into single nodes.
    pub fn fuse(&self) -> Result<LayerGraph> {
        if self.mode != Mode::Fp32 {
            return Err(Error::Contract("fuse expects an fp32 graph".into()));
        }
        let consumers = self.consumers();
        let sole = |id: usize| -> Option<usize> {
            if consumers[id].len() == 1 {
                Some(consumers[id][0])
            } else {
                None
            }
        };
        let mut g = LayerGraph::new(self.input_shape.clone());
        g.nodes.clear();
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut skip = vec![false; self.nodes.len()];
        for n in &self.nodes {
            if skip[n.id] {
                continue;
            }
            let new_inputs: Vec<usize> = n.inputs.iter().map(|&i| map[i]).collect();
            let new_id = g.nodes.len();
            let mut mapped_tail = n.id;
            let op = match &n.op {
                OpKind::Conv(p) => {
                    // conv -> relu, or conv -> bn -> relu, each link exclusive
                    match sole(n.id).map(|j| (&self.nodes[j].op, j)) {
                        Some((OpKind::Relu, j)) => {
                            skip[j] = true;
                            mapped_tail = j;
                            OpKind::FusedConvRelu(p.clone())
                        }
                        Some((OpKind::BatchNorm(bn), j)) => match sole(j).map(|k| (&self.nodes[k].op, k)) {
                            Some((OpKind::Relu, k)) => {
                                skip[j] = true;
                                skip[k] = true;
                                map[j] = new_id;
                                mapped_tail = k;
                                OpKind::FusedConvBnRelu(p.clone(), bn.clone())
                            }
                            _ => OpKind::Conv(p.clone()),
                        },
                        _ => OpKind::Conv(p.clone()),
                    }
                }
                other => other.clone(),
            };
            g.nodes.push(Node { id: new_id, op, inputs: new_inputs, out_params: None, requant: None });
            map[n.id] = new_id;
            map[mapped_tail] = new_id;
        }
        g.validate()?;
        Ok(g)
    }

    /// Fold every batch norm (standalone after conv, or inside a fused
    /// conv-bn-relu) into the preceding conv's weights using running stats.
    pub fn fold_batchnorm(&self) -> Result<LayerGraph> {
        if self.mode != Mode::Fp32 {
            return Err(Error::Contract("fold_batchnorm expects an fp32 graph".into()));
        }
        let consumers = self.consumers();
        let mut g = LayerGraph::new(self.input_shape.clone());
        g.nodes.clear();
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut skip = vec![false; self.nodes.len()];
        for n in &self.nodes {
            if skip[n.id] {
                continue;
            }
            let new_inputs: Vec<usize> = n.inputs.iter().map(|&i| map[i]).collect();
            let new_id = g.nodes.len();
            let mut mapped_tail = n.id;
            let op = match &n.op {
                OpKind::FusedConvBnRelu(p, bn) => {
                    let folded = fold_conv_params(p, bn)?;
                    OpKind::FusedConvRelu(folded)
                }
                OpKind::Conv(p) => {
                    // standalone conv -> bn chain (bn not followed by relu,
                    // otherwise fuse() would have absorbed it)
                    if consumers[n.id].len() == 1 {
                        let j = consumers[n.id][0];
                        if let OpKind::BatchNorm(bn) = &self.nodes[j].op {
                            skip[j] = true;
                            mapped_tail = j;
                            OpKind::Conv(fold_conv_params(p, bn)?)
                        } else {
                            OpKind::Conv(p.clone())
                        }
                    } else {
                        OpKind::Conv(p.clone())
                    }
                }
                other => other.clone(),
            };
            g.nodes.push(Node { id: new_id, op, inputs: new_inputs, out_params: None, requant: None });
            map[n.id] = new_id;
            map[mapped_tail] = new_id;
        }
        g.validate()?;
        Ok(g)
    }

    /// Convert a trained fake-quant graph into an integer-only graph.
    ///
    /// Weights go per-channel symmetric, activations per-tensor asymmetric
    /// from the finalized observers; fake-quant nodes disappear; a
    /// quantize stub is placed at the input and a dequantize stub at the
    /// output.
    pub fn convert(&self) -> Result<LayerGraph> {
        if self.mode != Mode::FakeQuant {
            return Err(Error::Conversion("convert expects a fake-quant graph".into()));
        }
        // annotate each producing node with the params of the fake-quant
        // node that consumes it; passthrough ops inherit their input's
        let mut ann: Vec<Option<QuantParams>> = vec![None; self.nodes.len()];
        for n in &self.nodes {
            if let OpKind::FakeQuant { observer } = &n.op {
                let obs = &self.observers[*observer];
                if obs.count() == 0 {
                    return Err(Error::Conversion(format!(
                        "observer {observer} was never updated"
                    )));
                }
                let p = obs.finalize_per_tensor(INT8_QMIN, INT8_QMAX, false)?;
                ann[n.inputs[0]] = Some(p);
                ann[n.id] = Some(p);
            }
        }
        for n in &self.nodes {
            if ann[n.id].is_none() {
                match &n.op {
                    OpKind::Relu | OpKind::Maxpool { .. } | OpKind::GlobalAvgPool => {
                        ann[n.id] = ann[n.inputs[0]];
                    }
                    _ => {}
                }
            }
        }

        let mut g = LayerGraph::new(self.input_shape.clone());
        g.mode = Mode::Int8;
        let mut map = vec![usize::MAX; self.nodes.len()];
        for n in &self.nodes {
            match &n.op {
                OpKind::Input => {
                    map[n.id] = 0;
                }
                OpKind::FakeQuant { .. } => {
                    let src = n.inputs[0];
                    if matches!(self.nodes[src].op, OpKind::Input) {
                        // input fake-quant becomes the quantize stub
                        let p = ann[n.id].unwrap();
                        let id = g.push(OpKind::QuantizeStub(p), vec![map[src]]);
                        g.nodes[id].out_params = Some(p);
                        g.input_params = Some(p);
                        map[n.id] = id;
                    } else {
                        map[n.id] = map[src];
                    }
                }
                OpKind::Conv(p) | OpKind::FusedConvRelu(p) | OpKind::Linear(p) => {
                    let in_params = self
                        .nodes_input_params(&ann, n)
                        .ok_or_else(|| Error::Conversion(format!("node {} lacks input params", n.id)))?;
                    let out_params = ann[n.id].ok_or_else(|| {
                        Error::Conversion(format!("node {} output was never observed", n.id))
                    })?;
                    let wq = quantize_tensor(p.weight.as_float()?, QuantizeMode::PerChannelSymmetric { axis: 0 })?;
                    let bias = kernels::quantize_bias(p.bias.as_float()?, in_params.scale, &wq.qscheme);
                    let rq = RequantSpec::from_params(&in_params, &wq.qscheme, out_params)?;
                    let params = ConvParams { weight: Weights::Quant(wq), bias: Bias::Int(bias), spec: p.spec };
                    let op = match &n.op {
                        OpKind::Conv(_) => OpKind::Conv(params),
                        OpKind::FusedConvRelu(_) => OpKind::FusedConvRelu(params),
                        _ => OpKind::Linear(params),
                    };
                    let inputs = n.inputs.iter().map(|&i| map[i]).collect();
                    let id = g.push(op, inputs);
                    g.nodes[id].out_params = Some(out_params);
                    g.nodes[id].requant = Some(RequantSpec::new(rq.multipliers, out_params)?);
                    map[n.id] = id;
                }
                OpKind::FusedConvBnRelu(..) | OpKind::BatchNorm(_) => {
                    return Err(Error::Conversion(
                        "batch norm must be folded before conversion".into(),
                    ))
                }
                OpKind::Relu | OpKind::Add | OpKind::Concat | OpKind::Maxpool { .. } | OpKind::GlobalAvgPool => {
                    let inputs: Vec<usize> = n.inputs.iter().map(|&i| map[i]).collect();
                    let id = g.push(n.op.clone(), inputs);
                    g.nodes[id].out_params = ann[n.id];
                    map[n.id] = id;
                }
                OpKind::QuantizeStub(_) | OpKind::DequantizeStub => {
                    return Err(Error::Conversion("graph already converted".into()))
                }
            }
        }
        let out = g.output_id();
        g.push(OpKind::DequantizeStub, vec![out]);
        g.validate()?;
        Ok(g)
    }

    fn nodes_input_params(&self, ann: &[Option<QuantParams>], n: &Node) -> Option<QuantParams> {
        ann[n.inputs[0]]
    }

    /// Total operations for one forward pass at batch 1. Conv/linear count
    /// two ops per multiply-accumulate; elementwise layers one per output
    /// element; quantize/dequantize/fake-quant bookkeeping counts zero, so
    /// conversion leaves the number unchanged.
    pub fn count_ops(&self) -> Result<f64> {
        if self.nodes.len() <= 1 {
            return Ok(0.0);
        }
        let shapes = self.infer_shapes(1)?;
        let mut total = 0.0f64;
        for n in &self.nodes {
            let out_elems = shapes[n.id].len() as f64;
            total += match &n.op {
                OpKind::Conv(p) | OpKind::FusedConvRelu(p) | OpKind::FusedConvBnRelu(p, _) => {
                    let w = p.weight.shape().dims();
                    let spatial = (shapes[n.id].dims()[2] * shapes[n.id].dims()[3]) as f64;
                    let mac = 2.0 * (w[1] * w[2] * w[3]) as f64 * w[0] as f64 * spatial;
                    let extra = match &n.op {
                        OpKind::FusedConvRelu(_) => out_elems,
                        OpKind::FusedConvBnRelu(..) => 2.0 * out_elems,
                        _ => 0.0,
                    };
                    mac + extra
                }
                OpKind::Linear(p) => {
                    let w = p.weight.shape().dims();
                    2.0 * (w[0] * w[1]) as f64
                }
                OpKind::Relu | OpKind::Add | OpKind::Maxpool { .. } | OpKind::GlobalAvgPool | OpKind::BatchNorm(_) => {
                    out_elems
                }
                OpKind::Input | OpKind::Concat | OpKind::QuantizeStub(_) | OpKind::DequantizeStub | OpKind::FakeQuant { .. } => 0.0,
            };
        }
        Ok(total)
    }

    /// Peak per-layer activation memory for a single image: max over nodes
    /// of input + output activation bytes (4 bytes/element fp32, 1 int8).
    pub fn memory_footprint(&self) -> Result<u64> {
        let shapes = self.infer_shapes(1)?;
        let bpe: u64 = if self.mode == Mode::Int8 { 1 } else { 4 };
        let mut peak = 0u64;
        for n in &self.nodes {
            if matches!(
                n.op,
                OpKind::Input | OpKind::QuantizeStub(_) | OpKind::DequantizeStub | OpKind::FakeQuant { .. }
            ) {
                continue;
            }
            let in_bytes: u64 = n.inputs.iter().map(|&i| shapes[i].len() as u64 * bpe).sum();
            let out_bytes = shapes[n.id].len() as u64 * bpe;
            peak = peak.max(in_bytes + out_bytes);
        }
        Ok(peak)
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                OpKind::Conv(p) | OpKind::Linear(p) | OpKind::FusedConvRelu(p) | OpKind::FusedConvBnRelu(p, _) => {
                    let w = p.weight.shape().len();
                    let b = match &p.bias {
                        Bias::Float(b) => b.len(),
                        Bias::Int(b) => b.len(),
                    };
                    let bn = match &n.op {
                        OpKind::FusedConvBnRelu(_, bn) => bn.gamma.len() * 2,
                        _ => 0,
                    };
                    w + b + bn
                }
                OpKind::BatchNorm(bn) => bn.gamma.len() * 2,
                _ => 0,
            })
            .sum()
    }
}

/// Fold batch-norm statistics into conv weights and bias:
/// `w' = w * gamma / sqrt(var + eps)` per output channel,
/// `b' = beta + (b - mean) * gamma / sqrt(var + eps)`.
pub fn fold_batchnorm(
    w: &FloatTensor,
    b: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<(FloatTensor, Vec<f32>)> {
    let c_out = w.shape.dims()[0];
    if [b.len(), gamma.len(), beta.len(), mean.len(), var.len()] != [c_out; 5] {
        return Err(Error::ShapeMismatch("batchnorm fold channel mismatch".into()));
    }
    let per = w.shape.len() / c_out;
    let mut wd = w.data.clone();
    let mut bd = vec![0.0f32; c_out];
    for oc in 0..c_out {
        let k = gamma[oc] / (var[oc] + eps).sqrt();
        for v in &mut wd[oc * per..(oc + 1) * per] {
            *v *= k;
        }
        bd[oc] = beta[oc] + (b[oc] - mean[oc]) * k;
    }
    Ok((FloatTensor::new(w.shape.clone(), wd)?, bd))
}

fn fold_conv_params(p: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    let (w, b) = fold_batchnorm(
        p.weight.as_float()?,
        p.bias.as_float()?,
        &bn.gamma,
        &bn.beta,
        &bn.running_mean,
        &bn.running_var,
        bn.eps,
    )?;
    Ok(ConvParams { weight: Weights::Float(w), bias: Bias::Float(b), spec: p.spec })
}

/// Project every element of a tensor onto the quantization lattice of `p`.
pub fn fake_quant_tensor(x: &FloatTensor, p: &QuantParams) -> FloatTensor {
    FloatTensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| crate::quant::fake_quantize_unchecked(v as f64, p) as f32)
            .collect(),
    }
}

/// Reshape (n, c, 1, 1) activations to (n, c) for the linear head.
pub fn flatten_spatial(x: &FloatTensor) -> Result<FloatTensor> {
    match x.shape.dims() {
        [n, c] => FloatTensor::new(Shape::new(&[*n, *c])?, x.data.clone()),
        [n, c, h, w] => FloatTensor::new(Shape::new(&[*n, c * h * w])?, x.data.clone()),
        d => Err(Error::ShapeMismatch(format!("cannot flatten shape {d:?}"))),
    }
}

fn flatten_spatial_q(x: &QuantTensor) -> Result<QuantTensor> {
    let dims = x.shape.dims();
    let (n, rest) = (dims[0], dims[1..].iter().product::<usize>());
    Ok(QuantTensor {
        shape: Shape::new(&[n, rest])?,
        data: x.data.clone(),
        qscheme: x.qscheme.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn conv_params(c_in: usize, c_out: usize, k: usize, pad: usize, rng: &mut Rng) -> ConvParams {
        let n = c_out * c_in * k * k;
        let w = FloatTensor::new(
            Shape::new(&[c_out, c_in, k, k]).unwrap(),
            (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        )
        .unwrap();
        let b = (0..c_out).map(|_| rng.uniform(-0.1, 0.1)).collect();
        ConvParams { weight: Weights::Float(w), bias: Bias::Float(b), spec: ConvSpec::new(1, pad).unwrap() }
    }

    fn rand_input(c: usize, h: usize, w: usize, rng: &mut Rng) -> FloatTensor {
        FloatTensor::new(
            Shape::new(&[1, c, h, w]).unwrap(),
            (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fuse_conv_relu_chain() {
        let mut rng = Rng::new(1);
        let mut g = LayerGraph::new(Shape::new(&[1, 4, 4]).unwrap());
        let c = g.push(OpKind::Conv(conv_params(1, 2, 3, 1, &mut rng)), vec![0]);
        g.push(OpKind::Relu, vec![c]);
        let f = g.fuse().unwrap();
        assert_eq!(f.nodes.len(), 2);
        assert!(matches!(f.nodes[1].op, OpKind::FusedConvRelu(_)));
    }

    #[test]
    fn fuse_conv_bn_relu_chain() {
        let mut rng = Rng::new(2);
        let mut g = LayerGraph::new(Shape::new(&[1, 4, 4]).unwrap());
        let c = g.push(OpKind::Conv(conv_params(1, 2, 3, 1, &mut rng)), vec![0]);
        let b = g.push(OpKind::BatchNorm(BnParams::identity(2)), vec![c]);
        g.push(OpKind::Relu, vec![b]);
        let f = g.fuse().unwrap();
        assert_eq!(f.nodes.len(), 2);
        assert!(matches!(f.nodes[1].op, OpKind::FusedConvBnRelu(..)));
    }

    #[test]
    fn conv_feeding_add_stays_unfused() {
        let mut rng = Rng::new(3);
        let mut g = LayerGraph::new(Shape::new(&[2, 4, 4]).unwrap());
        let c = g.push(OpKind::Conv(conv_params(2, 2, 3, 1, &mut rng)), vec![0]);
        let a = g.push(OpKind::Add, vec![c, 0]);
        g.push(OpKind::Relu, vec![a]);
        let f = g.fuse().unwrap();
        assert!(f.nodes.iter().any(|n| matches!(n.op, OpKind::Conv(_))));
        assert!(!f.nodes.iter().any(|n| matches!(n.op, OpKind::FusedConvRelu(_))));
    }

    #[test]
    fn fold_batchnorm_hand_example() {
        // gamma=2, var=4, eps=0, mu=1, beta=5, w=3, b=1 -> w'=3, b'=5
        let w = FloatTensor::new(Shape::new(&[1, 1, 1, 1]).unwrap(), vec![3.0]).unwrap();
        let (wf, bf) = fold_batchnorm(&w, &[1.0], &[2.0], &[5.0], &[1.0], &[4.0], 0.0).unwrap();
        assert_eq!(wf.data, vec![3.0]);
        assert_eq!(bf, vec![5.0]);

        // identity bn leaves params unchanged
        let (wf, bf) = fold_batchnorm(&w, &[1.0], &[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(wf.data, vec![3.0]);
        assert_eq!(bf, vec![1.0]);
    }

    #[test]
    fn folded_graph_matches_unfolded_forward() {
        let mut rng = Rng::new(4);
        let mut g = LayerGraph::new(Shape::new(&[2, 6, 6]).unwrap());
        let p = conv_params(2, 3, 3, 1, &mut rng);
        let c = g.push(OpKind::Conv(p), vec![0]);
        let bn = BnParams {
            gamma: vec![1.2, 0.8, 1.5],
            beta: vec![0.1, -0.2, 0.3],
            running_mean: vec![0.05, -0.1, 0.2],
            running_var: vec![0.9, 1.3, 0.6],
            eps: 1e-5,
            momentum: 0.1,
        };
        let b = g.push(OpKind::BatchNorm(bn), vec![c]);
        g.push(OpKind::Relu, vec![b]);
        let mut folded = g.fuse().unwrap().fold_batchnorm().unwrap();
        let x = rand_input(2, 6, 6, &mut rng);
        let y0 = g.forward(&x).unwrap();
        let y1 = folded.forward(&x).unwrap();
        for (a, b) in y0.data.iter().zip(&y1.data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fusion_equivalence_fp32() {
        let mut rng = Rng::new(5);
        let mut g = LayerGraph::new(Shape::new(&[3, 8, 8]).unwrap());
        let c1 = g.push(OpKind::Conv(conv_params(3, 4, 3, 1, &mut rng)), vec![0]);
        let r1 = g.push(OpKind::Relu, vec![c1]);
        let c2 = g.push(OpKind::Conv(conv_params(4, 4, 3, 1, &mut rng)), vec![r1]);
        let b2 = g.push(OpKind::BatchNorm(BnParams::identity(4)), vec![c2]);
        g.push(OpKind::Relu, vec![b2]);
        let mut fused = g.fuse().unwrap();
        for seed in 0..5 {
            let x = rand_input(3, 8, 8, &mut Rng::new(100 + seed));
            let y0 = g.forward(&x).unwrap();
            let y1 = fused.forward(&x).unwrap();
            for (a, b) in y0.data.iter().zip(&y1.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn int8_fused_conv_relu_bit_identical_to_sequential() {
        use crate::tensor::{quantize_tensor, QuantizeMode};
        let mut rng = Rng::new(6);
        let x = rand_input(2, 5, 5, &mut rng);
        let qx = quantize_tensor(&x, QuantizeMode::PerTensorAffine).unwrap();
        let wf = FloatTensor::new(
            Shape::new(&[3, 2, 3, 3]).unwrap(),
            (0..54).map(|_| rng.uniform(-0.8, 0.8)).collect(),
        )
        .unwrap();
        let qw = quantize_tensor(&wf, QuantizeMode::PerChannelSymmetric { axis: 0 }).unwrap();
        let out = QuantParams::int8(0.02, -30).unwrap();
        let xp = *qx.qscheme.per_tensor().unwrap();
        let rq = RequantSpec::from_params(&xp, &qw.qscheme, out).unwrap();
        let spec = ConvSpec::new(1, 1).unwrap();
        let bias = vec![5, -3, 2];
        let fused = kernels::qconv2d_relu(&qx, &qw, &bias, &spec, &rq).unwrap();
        let seq = kernels::qrelu(&kernels::qconv2d(&qx, &qw, &bias, &spec, &rq).unwrap(), out).unwrap();
        assert_eq!(fused.data, seq.data);
    }

    #[test]
    fn count_ops_examples() {
        let mut rng = Rng::new(7);
        // 3x3 conv, c_in = c_out = 1, output 8x8 -> 1152 ops
        let mut g = LayerGraph::new(Shape::new(&[1, 8, 8]).unwrap());
        g.push(OpKind::Conv(conv_params(1, 1, 3, 1, &mut rng)), vec![0]);
        assert_eq!(g.count_ops().unwrap(), 1152.0);

        let empty = LayerGraph::new(Shape::new(&[1, 8, 8]).unwrap());
        assert_eq!(empty.count_ops().unwrap(), 0.0);
    }

    #[test]
    fn memory_footprint_examples() {
        let mut rng = Rng::new(8);
        let mut g = LayerGraph::new(Shape::new(&[3, 32, 32]).unwrap());
        g.push(OpKind::Conv(conv_params(3, 16, 3, 1, &mut rng)), vec![0]);
        assert_eq!(g.memory_footprint().unwrap(), 77_824);

        let mut int8 = g.clone();
        int8.mode = Mode::Int8;
        assert_eq!(int8.memory_footprint().unwrap(), 77_824 / 4);
    }

    #[test]
    fn convert_reproduces_worked_conv_example() {
        let mut g = LayerGraph::new(Shape::new(&[1, 1, 1]).unwrap());
        g.mode = Mode::FakeQuant;
        let fq_in = g.observers.len();
        g.observers.push(MinMaxObserver::from_range(-1.0, 1.0, 1).unwrap());
        let a = g.push(OpKind::FakeQuant { observer: fq_in }, vec![0]);
        let w = FloatTensor::new(Shape::new(&[1, 1, 1, 1]).unwrap(), vec![2.0]).unwrap();
        let c = g.push(
            OpKind::Conv(ConvParams {
                weight: Weights::Float(w),
                bias: Bias::Float(vec![0.0]),
                spec: ConvSpec::new(1, 0).unwrap(),
            }),
            vec![a],
        );
        let fq_out = g.observers.len();
        g.observers.push(MinMaxObserver::from_range(0.0, 4.0, 1).unwrap());
        g.push(OpKind::FakeQuant { observer: fq_out }, vec![c]);

        let mut q = g.convert().unwrap();
        assert_eq!(q.mode, Mode::Int8);
        assert!(matches!(q.nodes[1].op, OpKind::QuantizeStub(_)));
        assert!(matches!(q.nodes.last().unwrap().op, OpKind::DequantizeStub));
        let x = FloatTensor::new(Shape::new(&[1, 1, 1, 1]).unwrap(), vec![1.0]).unwrap();
        let y = q.forward(&x).unwrap();
        assert!((y.data[0] - 1.9922).abs() < 1e-3, "{}", y.data[0]);
    }

    #[test]
    fn convert_requires_observed_ranges() {
        let mut g = LayerGraph::new(Shape::new(&[1, 1, 1]).unwrap());
        g.mode = Mode::FakeQuant;
        g.observers.push(MinMaxObserver::per_tensor());
        g.push(OpKind::FakeQuant { observer: 0 }, vec![0]);
        assert!(matches!(g.convert(), Err(Error::Conversion(_))));
    }

    #[test]
    fn conversion_preserves_count_ops_and_quarters_footprint() {
        let mut rng = Rng::new(9);
        let mut g = LayerGraph::new(Shape::new(&[2, 6, 6]).unwrap());
        let c = g.push(OpKind::Conv(conv_params(2, 3, 3, 1, &mut rng)), vec![0]);
        g.push(OpKind::Relu, vec![c]);
        let fused = g.fuse().unwrap();

        // hand-build the fake-quant version with seeded observers
        let mut fq = fused.clone();
        fq.mode = Mode::FakeQuant;
        fq.observers.push(MinMaxObserver::from_range(-1.0, 1.0, 1).unwrap());
        fq.observers.push(MinMaxObserver::from_range(0.0, 3.0, 1).unwrap());
        let conv_id = 1;
        fq.nodes[conv_id].inputs = vec![2]; // rewire through input fake-quant
        let tail = fq.nodes.pop().unwrap(); // temporarily drop to splice
        assert!(matches!(tail.op, OpKind::FusedConvRelu(_)));
        fq.push(OpKind::FakeQuant { observer: 0 }, vec![0]);
        let c2 = fq.push(tail.op, vec![1]);
        fq.push(OpKind::FakeQuant { observer: 1 }, vec![c2]);
        // rebuild ids
        for (i, n) in fq.nodes.iter_mut().enumerate() {
            n.id = i;
        }
        let q = fq.convert().unwrap();
        assert_eq!(q.count_ops().unwrap(), fused.count_ops().unwrap());
        assert_eq!(q.memory_footprint().unwrap() * 4, fused.memory_footprint().unwrap());
    }
}
