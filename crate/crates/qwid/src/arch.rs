//! Reference network builders used by the CLI and the benchmark suite.
//!
//! Both architectures take 3x32x32 inputs and emit 9 logits. Weight
//! initialization is He-style uniform driven by the crate's own seeded
//! generator, so a given seed always yields the same parameters.

use crate::data::NUM_CLASSES;
use crate::error::Result;
use crate::graph::{Bias, BnParams, ConvParams, LayerGraph, OpKind, Weights};
use crate::kernels::ConvSpec;
use crate::rng::Rng;
use crate::tensor::{FloatTensor, Shape};

pub const INPUT_SIZE: usize = 32;

/// Supported architecture names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    TinyResnet,
    TinyInception,
}

impl Arch {
    pub fn parse(s: &str) -> Option<Arch> {
        match s {
            "tinyresnet" => Some(Arch::TinyResnet),
            "tinyinception" => Some(Arch::TinyInception),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::TinyResnet => "tinyresnet",
            Arch::TinyInception => "tinyinception",
        }
    }

    pub fn build(&self, seed: u64) -> Result<LayerGraph> {
        match self {
            Arch::TinyResnet => tiny_resnet(seed),
            Arch::TinyInception => tiny_inception(seed),
        }
    }
}

fn he_weight(rng: &mut Rng, dims: &[usize]) -> Result<FloatTensor> {
    let fan_in: usize = dims[1..].iter().product();
    let bound = (6.0 / fan_in as f32).sqrt();
    let shape = Shape::new(dims)?;
    let data = (0..shape.len()).map(|_| rng.uniform(-bound, bound)).collect();
    FloatTensor::new(shape, data)
}

fn conv(rng: &mut Rng, c_out: usize, c_in: usize, k: usize, padding: usize) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: Weights::Float(he_weight(rng, &[c_out, c_in, k, k])?),
        bias: Bias::Float(vec![0.0; c_out]),
        spec: ConvSpec::new(1, padding)?,
    })
}

fn linear(rng: &mut Rng, c_out: usize, c_in: usize) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: Weights::Float(he_weight(rng, &[c_out, c_in])?),
        bias: Bias::Float(vec![0.0; c_out]),
        spec: ConvSpec::new(1, 0)?,
    })
}

fn conv_bn_relu(
    g: &mut LayerGraph,
    rng: &mut Rng,
    input: usize,
    c_out: usize,
    c_in: usize,
    k: usize,
    padding: usize,
) -> Result<usize> {
    let c = g.push(OpKind::Conv(conv(rng, c_out, c_in, k, padding)?), vec![input]);
    let bn = g.push(OpKind::BatchNorm(BnParams::identity(c_out)), vec![c]);
    Ok(g.push(OpKind::Relu, vec![bn]))
}

/// Small residual network: a conv-bn-relu stem, two residual blocks
/// separated by 2x2 max pools, global average pooling, and a 9-way
/// linear head. 24 channels throughout.
pub fn tiny_resnet(seed: u64) -> Result<LayerGraph> {
    let mut rng = Rng::new(seed);
    let ch = 24;
    let mut g = LayerGraph::new(Shape::new(&[3, INPUT_SIZE, INPUT_SIZE])?);
    let stem = conv_bn_relu(&mut g, &mut rng, 0, ch, 3, 3, 1)?;
    let mut x = g.push(OpKind::Maxpool { window: 2, stride: 2 }, vec![stem]);
    for _ in 0..2 {
        let skip = x;
        let a = conv_bn_relu(&mut g, &mut rng, x, ch, ch, 3, 1)?;
        let b = g.push(OpKind::Conv(conv(&mut rng, ch, ch, 3, 1)?), vec![a]);
        let bn = g.push(OpKind::BatchNorm(BnParams::identity(ch)), vec![b]);
        let add = g.push(OpKind::Add, vec![bn, skip]);
        let relu = g.push(OpKind::Relu, vec![add]);
        x = g.push(OpKind::Maxpool { window: 2, stride: 2 }, vec![relu]);
    }
    let gp = g.push(OpKind::GlobalAvgPool, vec![x]);
    g.push(OpKind::Linear(linear(&mut rng, NUM_CLASSES, ch)?), vec![gp]);
    g.validate()?;
    Ok(g)
}

/// Small inception-style network: a conv-bn-relu stem, one block with
/// parallel 1x1 and 3x3 branches joined by channel concat, global
/// average pooling, and a 9-way linear head.
pub fn tiny_inception(seed: u64) -> Result<LayerGraph> {
    let mut rng = Rng::new(seed);
    let ch = 16;
    let mut g = LayerGraph::new(Shape::new(&[3, INPUT_SIZE, INPUT_SIZE])?);
    let stem = conv_bn_relu(&mut g, &mut rng, 0, ch, 3, 3, 1)?;
    let pooled = g.push(OpKind::Maxpool { window: 2, stride: 2 }, vec![stem]);
    let b1 = conv_bn_relu(&mut g, &mut rng, pooled, ch / 2, ch, 1, 0)?;
    let b3 = conv_bn_relu(&mut g, &mut rng, pooled, ch / 2, ch, 3, 1)?;
    let cat = g.push(OpKind::Concat, vec![b1, b3]);
    let pooled2 = g.push(OpKind::Maxpool { window: 2, stride: 2 }, vec![cat]);
    let gp = g.push(OpKind::GlobalAvgPool, vec![pooled2]);
    g.push(OpKind::Linear(linear(&mut rng, NUM_CLASSES, ch)?), vec![gp]);
    g.validate()?;
    Ok(g)
}
