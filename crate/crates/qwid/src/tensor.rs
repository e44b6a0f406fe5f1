//! Dense real and quantized tensor containers.
//!
//! Activations are row-major `(batch, channels, height, width)`;
//! convolution weights are `(c_out, c_in, f_h, f_w)`; fully connected
//! weights are `(c_out, c_in)`.

use crate::error::{Error, Result};
use crate::quant::{self, compute_qparams, QuantParams, RealRange, INT8_QMAX, INT8_QMIN};

/// Tensor shape; all dims >= 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("invalid dims {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }
}

/// fp32 tensor; payload finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != element count {}",
                data.len(),
                shape.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        FloatTensor { shape, data: vec![0.0; n] }
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in &self.data {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        (lo, hi)
    }
}

/// Per-tensor or per-channel quantization scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum QScheme {
    PerTensor(QuantParams),
    /// One params entry per slice along `axis` (the c_out axis of weights).
    PerChannel { axis: usize, params: Vec<QuantParams> },
}

impl QScheme {
    /// Params governing the slice at `channel` along the scheme's axis.
    pub fn params_for(&self, channel: usize) -> &QuantParams {
        match self {
            QScheme::PerTensor(p) => p,
            QScheme::PerChannel { params, .. } => &params[channel],
        }
    }

    pub fn per_tensor(&self) -> Option<&QuantParams> {
        match self {
            QScheme::PerTensor(p) => Some(p),
            QScheme::PerChannel { .. } => None,
        }
    }
}

/// int8 tensor plus the params that map it back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Shape,
    pub data: Vec<i8>,
    pub qscheme: QScheme,
}

/// i32 accumulator tensor used inside integer kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumTensor {
    pub shape: Shape,
    pub data: Vec<i32>,
}

/// How [`quantize_tensor`] derives its params.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// One asymmetric params pair from the tensor's global min/max.
    PerTensorAffine,
    /// One symmetric params pair from the tensor's global magnitude.
    PerTensorSymmetric,
    /// Symmetric params per slice along `axis` (weights' c_out axis).
    PerChannelSymmetric { axis: usize },
}

fn slice_stride(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    // (outer, axis_len, inner) so that flat = (o * axis_len + a) * inner + i
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Quantize with params derived from the given tensor itself.
pub fn quantize_tensor(t: &FloatTensor, mode: QuantizeMode) -> Result<QuantTensor> {
    match mode {
        QuantizeMode::PerTensorAffine | QuantizeMode::PerTensorSymmetric => {
            let (lo, hi) = t.min_max();
            let p = compute_qparams(
                RealRange::new(lo as f64, hi as f64)?,
                INT8_QMIN,
                INT8_QMAX,
                matches!(mode, QuantizeMode::PerTensorSymmetric),
            )?;
            Ok(quantize_tensor_with(t, &QScheme::PerTensor(p)))
        }
        QuantizeMode::PerChannelSymmetric { axis } => {
            if axis >= t.shape.dims().len() {
                return Err(Error::ShapeMismatch(format!("axis {axis} out of rank")));
            }
            let dims = t.shape.dims().to_vec();
            let (outer, axis_len, inner) = slice_stride(&dims, axis);
            let mut params = Vec::with_capacity(axis_len);
            for a in 0..axis_len {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for o in 0..outer {
                    let base = (o * axis_len + a) * inner;
                    for &x in &t.data[base..base + inner] {
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                params.push(compute_qparams(
                    RealRange::new(lo as f64, hi as f64)?,
                    INT8_QMIN,
                    INT8_QMAX,
                    true,
                )?);
            }
            Ok(quantize_tensor_with(t, &QScheme::PerChannel { axis, params }))
        }
    }
}

/// Quantize with externally supplied params (e.g. from calibration).
pub fn quantize_tensor_with(t: &FloatTensor, qscheme: &QScheme) -> QuantTensor {
    let data = match qscheme {
        QScheme::PerTensor(p) => t
            .data
            .iter()
            .map(|&x| quant::quantize_unchecked(x as f64, p) as i8)
            .collect(),
        QScheme::PerChannel { axis, params } => {
            let dims = t.shape.dims();
            let (_, axis_len, inner) = slice_stride(dims, *axis);
            t.data
                .iter()
                .enumerate()
                .map(|(flat, &x)| {
                    let a = (flat / inner) % axis_len;
                    quant::quantize_unchecked(x as f64, &params[a]) as i8
                })
                .collect()
        }
    };
    QuantTensor { shape: t.shape.clone(), data, qscheme: qscheme.clone() }
}

/// Elementwise dequantize back to fp32.
pub fn dequantize_tensor(t: &QuantTensor) -> FloatTensor {
    let data = match &t.qscheme {
        QScheme::PerTensor(p) => t
            .data
            .iter()
            .map(|&q| quant::dequantize(q as i32, p) as f32)
            .collect(),
        QScheme::PerChannel { axis, params } => {
            let dims = t.shape.dims();
            let (_, axis_len, inner) = slice_stride(dims, *axis);
            t.data
                .iter()
                .enumerate()
                .map(|(flat, &q)| {
                    let a = (flat / inner) % axis_len;
                    quant::dequantize(q as i32, &params[a]) as f32
                })
                .collect()
        }
    };
    FloatTensor { shape: t.shape.clone(), data }
}
