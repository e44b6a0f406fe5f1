//! Layer kernels: fp32 reference implementations and their int8
//! counterparts.
//!
//! Quantized conv/linear accumulate `(x_q - z_x) * w_q` in i32 (weights are
//! symmetric so no weight zero-point cross term appears), add the
//! pre-quantized i32 bias, then requantize with a real multiplier
//! `M = s_x * s_w / s_y` applied in f64 with half-to-even rounding.
//! Accumulators stay within i32 for kernel sizes up to 7x7x512 channels
//! (127 * 127 * 7 * 7 * 512 < 2^31).

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{AccumTensor, FloatTensor, QScheme, QuantTensor, Shape};

/// Convolution hyperparameters. Padding is zero padding on both spatial
/// sides; in the integer domain the pad value is `z_x` (real zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Contract("stride must be >= 1".into()));
        }
        Ok(ConvSpec { stride, padding })
    }

    pub fn out_dim(&self, input: usize, filter: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if filter > padded {
            return Err(Error::ShapeMismatch(format!(
                "filter {filter} larger than padded input {padded}"
            )));
        }
        Ok((padded - filter) / self.stride + 1)
    }
}

/// Requantization parameters for one integer conv/linear node.
#[derive(Debug, Clone, PartialEq)]
pub struct RequantSpec {
    /// `s_x * s_w / s_y`; one entry for per-tensor weights, one per output
    /// channel for per-channel weights.
    pub multipliers: Vec<f64>,
    pub out: QuantParams,
}

impl RequantSpec {
    pub fn new(multipliers: Vec<f64>, out: QuantParams) -> Result<Self> {
        if multipliers.is_empty() || multipliers.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::Contract("requant multipliers must be positive".into()));
        }
        Ok(RequantSpec { multipliers, out })
    }

    /// Derive the multipliers for a conv/linear from its surrounding params.
    pub fn from_params(x: &QuantParams, w: &QScheme, out: QuantParams) -> Result<Self> {
        let ms = match w {
            QScheme::PerTensor(p) => vec![x.scale * p.scale / out.scale],
            QScheme::PerChannel { params, .. } => params
                .iter()
                .map(|p| x.scale * p.scale / out.scale)
                .collect(),
        };
        Self::new(ms, out)
    }

    fn multiplier_for(&self, channel: usize) -> f64 {
        if self.multipliers.len() == 1 {
            self.multipliers[0]
        } else {
            self.multipliers[channel]
        }
    }
}

/// Quantize an fp32 bias to i32 at scale `s_x * s_w` (zero point 0).
pub fn quantize_bias(bias: &[f32], x_scale: f64, w: &QScheme) -> Vec<i32> {
    bias.iter()
        .enumerate()
        .map(|(c, &b)| {
            let s_w = w.params_for(if matches!(w, QScheme::PerTensor(_)) { 0 } else { c }).scale;
            (b as f64 / (x_scale * s_w)).round_ties_even() as i32
        })
        .collect()
}

fn check_weight_symmetric(w: &QuantTensor) -> Result<()> {
    let ok = match &w.qscheme {
        QScheme::PerTensor(p) => p.zero_point == 0,
        QScheme::PerChannel { axis, params } => *axis == 0 && params.iter().all(|p| p.zero_point == 0),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Contract("quantized weights must be symmetric (zero point 0)".into()))
    }
}

fn x_params(x: &QuantTensor) -> Result<&QuantParams> {
    x.qscheme
        .per_tensor()
        .ok_or_else(|| Error::Contract("activations must be per-tensor quantized".into()))
}

fn nchw(shape: &Shape) -> Result<(usize, usize, usize, usize)> {
    match shape.dims() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        d => Err(Error::ShapeMismatch(format!("expected rank-4 activation, got {d:?}"))),
    }
}

fn oihw(shape: &Shape) -> Result<(usize, usize, usize, usize)> {
    match shape.dims() {
        [o, i, h, w] => Ok((*o, *i, *h, *w)),
        d => Err(Error::ShapeMismatch(format!("expected rank-4 weight, got {d:?}"))),
    }
}

// ---------------------------------------------------------------------------
// fp32 reference kernels
// ---------------------------------------------------------------------------

/// Cross-correlation with zero padding and per-output-channel bias.
pub fn conv2d_f32(x: &FloatTensor, w: &FloatTensor, b: &[f32], spec: &ConvSpec) -> Result<FloatTensor> {
    let (n, c_in, h, wid) = nchw(&x.shape)?;
    let (c_out, wc_in, fh, fw) = oihw(&w.shape)?;
    if wc_in != c_in {
        return Err(Error::ShapeMismatch(format!("conv channels {c_in} vs weight {wc_in}")));
    }
    if b.len() != c_out {
        return Err(Error::ShapeMismatch("bias length != c_out".into()));
    }
    let oh = spec.out_dim(h, fh)?;
    let ow = spec.out_dim(wid, fw)?;
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    for ni in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ic in 0..c_in {
                        let xc = (ni * c_in + ic) * h;
                        let wc = ((oc * c_in + ic) * fh) * fw;
                        for ky in 0..fh {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let xrow = (xc + iy as usize) * wid;
                            let wrow = wc + ky * fw;
                            for kx in 0..fw {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix < 0 || ix as usize >= wid {
                                    continue;
                                }
                                acc += x.data[xrow + ix as usize] * w.data[wrow + kx];
                            }
                        }
                    }
                    out[((ni * c_out + oc) * oh + oy) * ow + ox] = acc + b[oc];
                }
            }
        }
    }
    FloatTensor::new(Shape::new(&[n, c_out, oh, ow])?, out)
}

/// `y = x w^T + b` with x `(batch, c_in)` and w `(c_out, c_in)`.
pub fn linear_f32(x: &FloatTensor, w: &FloatTensor, b: &[f32]) -> Result<FloatTensor> {
    let (n, c_in) = match x.shape.dims() {
        [n, c] => (*n, *c),
        d => return Err(Error::ShapeMismatch(format!("expected rank-2 input, got {d:?}"))),
    };
    let (c_out, wc_in) = match w.shape.dims() {
        [o, i] => (*o, *i),
        d => return Err(Error::ShapeMismatch(format!("expected rank-2 weight, got {d:?}"))),
    };
    if wc_in != c_in || b.len() != c_out {
        return Err(Error::ShapeMismatch("linear shape mismatch".into()));
    }
    let mut out = vec![0.0f32; n * c_out];
    for ni in 0..n {
        for oc in 0..c_out {
            let mut acc = b[oc];
            for ic in 0..c_in {
                acc += x.data[ni * c_in + ic] * w.data[oc * c_in + ic];
            }
            out[ni * c_out + oc] = acc;
        }
    }
    FloatTensor::new(Shape::new(&[n, c_out])?, out)
}

pub fn relu_f32(x: &FloatTensor) -> FloatTensor {
    FloatTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn add_f32(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch("add operands differ in shape".into()));
    }
    Ok(FloatTensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn maxpool2d_f32(x: &FloatTensor, window: usize, stride: usize) -> Result<FloatTensor> {
    let (n, c, h, w) = nchw(&x.shape)?;
    let spec = ConvSpec::new(stride, 0)?;
    let oh = spec.out_dim(h, window)?;
    let ow = spec.out_dim(w, window)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            m = m.max(x.data[((ni * c + ci) * h + iy) * w + ix]);
                        }
                    }
                    out[((ni * c + ci) * oh + oy) * ow + ox] = m;
                }
            }
        }
    }
    FloatTensor::new(Shape::new(&[n, c, oh, ow])?, out)
}

/// Mean over the spatial dims, output shape `(batch, channels, 1, 1)`.
pub fn global_avgpool_f32(x: &FloatTensor) -> Result<FloatTensor> {
    let (n, c, h, w) = nchw(&x.shape)?;
    let mut out = vec![0.0f32; n * c];
    let denom = (h * w) as f32;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let sum: f32 = x.data[base..base + h * w].iter().sum();
            out[ni * c + ci] = sum / denom;
        }
    }
    FloatTensor::new(Shape::new(&[n, c, 1, 1])?, out)
}

/// Concatenate along the channel axis.
pub fn concat_f32(inputs: &[&FloatTensor]) -> Result<FloatTensor> {
    if inputs.is_empty() {
        return Err(Error::ShapeMismatch("concat needs at least one input".into()));
    }
    let (n, _, h, w) = nchw(&inputs[0].shape)?;
    let mut c_total = 0usize;
    for t in inputs {
        let (tn, tc, th, tw) = nchw(&t.shape)?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::ShapeMismatch("concat inputs disagree outside channel axis".into()));
        }
        c_total += tc;
    }
    let mut out = vec![0.0f32; n * c_total * h * w];
    for ni in 0..n {
        let mut c_off = 0usize;
        for t in inputs {
            let tc = t.shape.dims()[1];
            let src = ni * tc * h * w;
            let dst = (ni * c_total + c_off) * h * w;
            out[dst..dst + tc * h * w].copy_from_slice(&t.data[src..src + tc * h * w]);
            c_off += tc;
        }
    }
    FloatTensor::new(Shape::new(&[n, c_total, h, w])?, out)
}

/// Inference-mode batch normalization using running statistics.
pub fn batchnorm_f32(
    x: &FloatTensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<FloatTensor> {
    let (n, c, h, w) = nchw(&x.shape)?;
    if [gamma.len(), beta.len(), mean.len(), var.len()] != [c; 4] {
        return Err(Error::ShapeMismatch("batchnorm channel mismatch".into()));
    }
    let mut out = vec![0.0f32; x.data.len()];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + eps).sqrt();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in base..base + h * w {
                out[i] = gamma[ci] * (x.data[i] - mean[ci]) * inv + beta[ci];
            }
        }
    }
    FloatTensor::new(x.shape.clone(), out)
}

/// Per-channel mean and (biased) variance over batch and spatial dims.
pub fn batch_stats(x: &FloatTensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = nchw(&x.shape)?;
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &v in &x.data[base..base + h * w] {
                sum += v as f64;
            }
        }
        let m = sum / count;
        let mut ss = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &v in &x.data[base..base + h * w] {
                ss += (v as f64 - m).powi(2);
            }
        }
        mean[ci] = m as f32;
        var[ci] = (ss / count) as f32;
    }
    Ok((mean, var))
}

// ---------------------------------------------------------------------------
// int8 kernels
// ---------------------------------------------------------------------------

#[inline]
fn requant(acc: i32, m: f64, out: &QuantParams) -> i8 {
    let y = (m * acc as f64).round_ties_even() as i64 + out.zero_point as i64;
    y.clamp(out.qmin as i64, out.qmax as i64) as i8
}

fn qconv2d_impl(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: &[i32],
    spec: &ConvSpec,
    rq: &RequantSpec,
    relu_fused: bool,
) -> Result<QuantTensor> {
    check_weight_symmetric(w)?;
    let xp = *x_params(x)?;
    let (n, c_in, h, wid) = nchw(&x.shape)?;
    let (c_out, wc_in, fh, fw) = oihw(&w.shape)?;
    if wc_in != c_in {
        return Err(Error::ShapeMismatch(format!("conv channels {c_in} vs weight {wc_in}")));
    }
    if bias.len() != c_out {
        return Err(Error::ShapeMismatch("bias length != c_out".into()));
    }
    if rq.multipliers.len() != 1 && rq.multipliers.len() != c_out {
        return Err(Error::Contract("requant multiplier count mismatch".into()));
    }
    let oh = spec.out_dim(h, fh)?;
    let ow = spec.out_dim(wid, fw)?;
    let out = rq.out;
    // fused ReLU = raising the lower clamp to the output zero point
    let lo = if relu_fused { out.zero_point.max(out.qmin) } else { out.qmin };
    let mut data = vec![0i8; n * c_out * oh * ow];
    let stride = spec.stride;
    let pad = spec.padding as isize;
    // padding contributes zero after centering, so each (ky, kx) tap only
    // touches the output range whose source rows/cols are in bounds
    let tap_range = |k: usize, limit: usize, out_len: usize| -> (usize, usize) {
        let mut lo = 0usize;
        while lo < out_len && (lo * stride + k) as isize - pad < 0 {
            lo += 1;
        }
        let mut hi = out_len;
        while hi > lo && ((hi - 1) * stride + k) as isize - pad >= limit as isize {
            hi -= 1;
        }
        (lo, hi)
    };
    let mut centered = vec![0i16; c_in * h * wid];
    let mut acc = vec![0i32; oh * ow];
    for ni in 0..n {
        // subtract the input zero point once per image
        let base = ni * c_in * h * wid;
        for (c, &v) in centered.iter_mut().zip(&x.data[base..base + c_in * h * wid]) {
            *c = (v as i32 - xp.zero_point) as i16;
        }
        for oc in 0..c_out {
            acc.fill(bias[oc]);
            for ic in 0..c_in {
                let xplane = &centered[ic * h * wid..(ic + 1) * h * wid];
                let wbase = (oc * c_in + ic) * fh * fw;
                for ky in 0..fh {
                    let (oy_lo, oy_hi) = tap_range(ky, h, oh);
                    for kx in 0..fw {
                        let wv = w.data[wbase + ky * fw + kx] as i32;
                        if wv == 0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(kx, wid, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride + ky) as isize - pad;
                            let xrow = iy as usize * wid;
                            let arow = oy * ow;
                            if stride == 1 {
                                let ix0 = (ox_lo + kx) as isize - pad;
                                let xs = &xplane[xrow + ix0 as usize..xrow + ix0 as usize + (ox_hi - ox_lo)];
                                for (a, &xv) in acc[arow + ox_lo..arow + ox_hi].iter_mut().zip(xs) {
                                    *a += xv as i32 * wv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride + kx) as isize - pad) as usize;
                                    acc[arow + ox] += xplane[xrow + ix] as i32 * wv;
                                }
                            }
                        }
                    }
                }
            }
            let m = rq.multiplier_for(oc);
            let obase = (ni * c_out + oc) * oh * ow;
            for (dst, &a) in data[obase..obase + oh * ow].iter_mut().zip(acc.iter()) {
                let y = (m * a as f64).round_ties_even() as i64 + out.zero_point as i64;
                *dst = y.clamp(lo as i64, out.qmax as i64) as i8;
            }
        }
    }
    Ok(QuantTensor {
        shape: Shape::new(&[n, c_out, oh, ow])?,
        data,
        qscheme: QScheme::PerTensor(out),
    })
}

/// Integer conv: i32 accumulation, requantize into the output int8 grid.
pub fn qconv2d(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: &[i32],
    spec: &ConvSpec,
    rq: &RequantSpec,
) -> Result<QuantTensor> {
    qconv2d_impl(x, w, bias, spec, rq, false)
}

/// Conv with the ReLU folded into the output clamp.
pub fn qconv2d_relu(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: &[i32],
    spec: &ConvSpec,
    rq: &RequantSpec,
) -> Result<QuantTensor> {
    qconv2d_impl(x, w, bias, spec, rq, true)
}

/// Integer fully connected layer; x `(batch, c_in)`, w `(c_out, c_in)`.
pub fn qlinear(x: &QuantTensor, w: &QuantTensor, bias: &[i32], rq: &RequantSpec) -> Result<QuantTensor> {
    check_weight_symmetric(w)?;
    let xp = *x_params(x)?;
    let (n, c_in) = match x.shape.dims() {
        [n, c] => (*n, *c),
        d => return Err(Error::ShapeMismatch(format!("expected rank-2 input, got {d:?}"))),
    };
    let (c_out, wc_in) = match w.shape.dims() {
        [o, i] => (*o, *i),
        d => return Err(Error::ShapeMismatch(format!("expected rank-2 weight, got {d:?}"))),
    };
    if wc_in != c_in || bias.len() != c_out {
        return Err(Error::ShapeMismatch("linear shape mismatch".into()));
    }
    if rq.multipliers.len() != 1 && rq.multipliers.len() != c_out {
        return Err(Error::Contract("requant multiplier count mismatch".into()));
    }
    let mut data = vec![0i8; n * c_out];
    for ni in 0..n {
        for oc in 0..c_out {
            let mut acc: i32 = bias[oc];
            for ic in 0..c_in {
                acc += (x.data[ni * c_in + ic] as i32 - xp.zero_point) * w.data[oc * c_in + ic] as i32;
            }
            data[ni * c_out + oc] = requant(acc, rq.multiplier_for(oc), &rq.out);
        }
    }
    Ok(QuantTensor {
        shape: Shape::new(&[n, c_out])?,
        data,
        qscheme: QScheme::PerTensor(rq.out),
    })
}

/// Quantized ReLU: `z_y` below the input zero point, rescale above it.
pub fn qrelu(x: &QuantTensor, out: QuantParams) -> Result<QuantTensor> {
    let xp = *x_params(x)?;
    let ratio = xp.scale / out.scale;
    let data = x
        .data
        .iter()
        .map(|&q| {
            let q = q as i32;
            if q < xp.zero_point {
                out.zero_point as i8
            } else {
                let y = (out.zero_point as f64 + ratio * (q - xp.zero_point) as f64).round_ties_even() as i64;
                y.clamp(out.qmin as i64, out.qmax as i64) as i8
            }
        })
        .collect();
    Ok(QuantTensor { shape: x.shape.clone(), data, qscheme: QScheme::PerTensor(out) })
}

/// Requantized elementwise add.
pub fn qadd(a: &QuantTensor, b: &QuantTensor, out: QuantParams) -> Result<QuantTensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch("add operands differ in shape".into()));
    }
    let ap = *x_params(a)?;
    let bp = *x_params(b)?;
    let ra = ap.scale / out.scale;
    let rb = bp.scale / out.scale;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&qa, &qb)| {
            let v = out.zero_point as f64
                + ra * (qa as i32 - ap.zero_point) as f64
                + rb * (qb as i32 - bp.zero_point) as f64;
            (v.round_ties_even() as i64).clamp(out.qmin as i64, out.qmax as i64) as i8
        })
        .collect();
    Ok(QuantTensor { shape: a.shape.clone(), data, qscheme: QScheme::PerTensor(out) })
}

/// Max pooling on int8 data; params pass through unchanged (max is
/// monotone, the dynamic range cannot grow).
pub fn maxpool2d_q(x: &QuantTensor, window: usize, stride: usize) -> Result<QuantTensor> {
    let xscheme = x.qscheme.clone();
    let (n, c, h, w) = nchw(&x.shape)?;
    let spec = ConvSpec::new(stride, 0)?;
    let oh = spec.out_dim(h, window)?;
    let ow = spec.out_dim(w, window)?;
    let mut data = vec![0i8; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = i8::MIN;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            m = m.max(x.data[((ni * c + ci) * h + iy) * w + ix]);
                        }
                    }
                    data[((ni * c + ci) * oh + oy) * ow + ox] = m;
                }
            }
        }
    }
    Ok(QuantTensor { shape: Shape::new(&[n, c, oh, ow])?, data, qscheme: xscheme })
}

/// Integer global average pool: sum `(x_q - z_x)` in i32, rescale by
/// `s_x / (H * W * s_y)`.
pub fn global_avgpool_q(x: &QuantTensor, out: QuantParams) -> Result<QuantTensor> {
    let xp = *x_params(x)?;
    let (n, c, h, w) = nchw(&x.shape)?;
    let m = xp.scale / ((h * w) as f64 * out.scale);
    let mut data = vec![0i8; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let acc: i32 = x.data[base..base + h * w]
                .iter()
                .map(|&q| q as i32 - xp.zero_point)
                .sum();
            data[ni * c + ci] = requant(acc, m, &out);
        }
    }
    Ok(QuantTensor {
        shape: Shape::new(&[n, c, 1, 1])?,
        data,
        qscheme: QScheme::PerTensor(out),
    })
}

/// Channel concat; each input is rescaled into the shared output params.
pub fn qconcat(inputs: &[&QuantTensor], out: QuantParams) -> Result<QuantTensor> {
    if inputs.is_empty() {
        return Err(Error::ShapeMismatch("concat needs at least one input".into()));
    }
    let (n, _, h, w) = nchw(&inputs[0].shape)?;
    let mut c_total = 0usize;
    for t in inputs {
        let (tn, tc, th, tw) = nchw(&t.shape)?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::ShapeMismatch("concat inputs disagree outside channel axis".into()));
        }
        c_total += tc;
    }
    let mut data = vec![0i8; n * c_total * h * w];
    for ni in 0..n {
        let mut c_off = 0usize;
        for t in inputs {
            let tp = *x_params(t)?;
            let ratio = tp.scale / out.scale;
            let tc = t.shape.dims()[1];
            for i in 0..tc * h * w {
                let q = t.data[ni * tc * h * w + i] as i32;
                let v = out.zero_point as f64 + ratio * (q - tp.zero_point) as f64;
                data[(ni * c_total + c_off) * h * w + i] =
                    (v.round_ties_even() as i64).clamp(out.qmin as i64, out.qmax as i64) as i8;
            }
            c_off += tc;
        }
    }
    Ok(QuantTensor {
        shape: Shape::new(&[n, c_total, h, w])?,
        data,
        qscheme: QScheme::PerTensor(out),
    })
}

/// Raw i32 accumulator of a conv, exposed for tests that inspect headroom.
pub fn qconv2d_accum(x: &QuantTensor, w: &QuantTensor, bias: &[i32], spec: &ConvSpec) -> Result<AccumTensor> {
    check_weight_symmetric(w)?;
    let xp = *x_params(x)?;
    let (n, c_in, h, wid) = nchw(&x.shape)?;
    let (c_out, _, fh, fw) = oihw(&w.shape)?;
    let oh = spec.out_dim(h, fh)?;
    let ow = spec.out_dim(wid, fw)?;
    let mut data = vec![0i32; n * c_out * oh * ow];
    for ni in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i32 = bias[oc];
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
                                let xv = x.data[((ni * c_in + ic) * h + iy as usize) * wid + ix as usize]
                                    as i32
                                    - xp.zero_point;
                                acc += xv * w.data[((oc * c_in + ic) * fh + ky) * fw + kx] as i32;
                            }
                        }
                    }
                    data[((ni * c_out + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(AccumTensor { shape: Shape::new(&[n, c_out, oh, ow])?, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{INT8_QMAX, INT8_QMIN};
    use crate::tensor::{dequantize_tensor, quantize_tensor, quantize_tensor_with, QuantizeMode};

    fn ft(dims: &[usize], data: Vec<f32>) -> FloatTensor {
        FloatTensor::new(Shape::new(dims).unwrap(), data).unwrap()
    }

    #[test]
    fn conv_f32_examples() {
        let spec = ConvSpec::new(1, 0).unwrap();
        let x = ft(&[1, 1, 1, 1], vec![1.0]);
        let w = ft(&[1, 1, 1, 1], vec![2.0]);
        assert_eq!(conv2d_f32(&x, &w, &[0.0], &spec).unwrap().data, vec![2.0]);

        // identity 1x1 weight
        let x = ft(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]);
        let id = ft(&[1, 1, 1, 1], vec![1.0]);
        assert_eq!(conv2d_f32(&x, &id, &[0.0], &spec).unwrap().data, x.data);

        // 3x3 ones over 3x3 ones
        let x = ft(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = ft(&[1, 1, 3, 3], vec![1.0; 9]);
        assert_eq!(conv2d_f32(&x, &w, &[0.0], &spec).unwrap().data, vec![9.0]);
    }

    #[test]
    fn conv_f32_shape_mismatch() {
        let spec = ConvSpec::new(1, 0).unwrap();
        let x = ft(&[1, 2, 2, 2], vec![0.0; 8]);
        let w = ft(&[1, 3, 1, 1], vec![0.0; 3]);
        assert!(conv2d_f32(&x, &w, &[0.0], &spec).is_err());
    }

    #[test]
    fn qconv2d_worked_example() {
        // x = 1.0 at s_x = 2/255, z_x = 0 -> x_q = 127 (saturated)
        let xp = QuantParams::int8(2.0 / 255.0, 0).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![127],
            qscheme: QScheme::PerTensor(xp),
        };
        let wp = QuantParams::int8(2.0 / 127.0, 0).unwrap();
        let w = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![127],
            qscheme: QScheme::PerTensor(wp),
        };
        let out = QuantParams::int8(4.0 / 255.0, -128).unwrap();
        let rq = RequantSpec::from_params(&xp, &w.qscheme, out).unwrap();
        assert!((rq.multipliers[0] - 1.0 / 127.0).abs() < 1e-15);
        let spec = ConvSpec::new(1, 0).unwrap();

        let acc = qconv2d_accum(&x, &w, &[0], &spec).unwrap();
        assert_eq!(acc.data, vec![16129]);

        let y = qconv2d(&x, &w, &[0], &spec, &rq).unwrap();
        assert_eq!(y.data, vec![-1]);
        let back = dequantize_tensor(&y);
        assert!((back.data[0] - 1.9922).abs() < 1e-3);
    }

    #[test]
    fn qconv2d_zero_input_zero_bias() {
        let xp = QuantParams::int8(0.1, 3).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[1, 1, 2, 2]).unwrap(),
            data: vec![3; 4], // all real zero
            qscheme: QScheme::PerTensor(xp),
        };
        let wp = QuantParams::int8(0.05, 0).unwrap();
        let w = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![40],
            qscheme: QScheme::PerTensor(wp),
        };
        let out = QuantParams::int8(0.2, 7).unwrap();
        let rq = RequantSpec::from_params(&xp, &w.qscheme, out).unwrap();
        let y = qconv2d(&x, &w, &[0], &ConvSpec::new(1, 0).unwrap(), &rq).unwrap();
        assert!(y.data.iter().all(|&v| v as i32 == out.zero_point));
    }

    #[test]
    fn qconv2d_rejects_asymmetric_weights() {
        let xp = QuantParams::int8(0.1, 0).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![1],
            qscheme: QScheme::PerTensor(xp),
        };
        let w = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![1],
            qscheme: QScheme::PerTensor(QuantParams::int8(0.1, 5).unwrap()),
        };
        let rq = RequantSpec::new(vec![1.0], xp).unwrap();
        assert!(matches!(
            qconv2d(&x, &w, &[0], &ConvSpec::new(1, 0).unwrap(), &rq),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn qrelu_examples() {
        // below the input zero point -> z_y
        let xp = QuantParams::int8(0.1, 10).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![5],
            qscheme: QScheme::PerTensor(xp),
        };
        let out = QuantParams::int8(0.1, -7).unwrap();
        assert_eq!(qrelu(&x, out).unwrap().data, vec![-7]);

        // identity when params match and input non-negative
        let xp = QuantParams::int8(0.1, 0).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![64],
            qscheme: QScheme::PerTensor(xp),
        };
        assert_eq!(qrelu(&x, xp).unwrap().data, vec![64]);

        // rescale branch: s_x = 0.1, s_y = 0.05, z_y = -128, x_q = 50
        let xp = QuantParams::int8(0.1, 0).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[1, 1, 1, 1]).unwrap(),
            data: vec![50],
            qscheme: QScheme::PerTensor(xp),
        };
        let out = QuantParams::int8(0.05, -128).unwrap();
        let y = qrelu(&x, out).unwrap();
        assert_eq!(y.data, vec![-28]);
        assert!((dequantize_tensor(&y).data[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn qrelu_idempotent_with_matched_params() {
        let p = QuantParams::int8(0.07, -11).unwrap();
        let x = QuantTensor {
            shape: Shape::new(&[8]).unwrap(),
            data: vec![-128, -12, -11, -10, 0, 50, 126, 127],
            qscheme: QScheme::PerTensor(p),
        };
        let once = qrelu(&x, p).unwrap();
        let twice = qrelu(&once, p).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn qadd_example() {
        let pa = QuantParams::int8(0.1, 0).unwrap();
        let a = QuantTensor {
            shape: Shape::new(&[1]).unwrap(),
            data: vec![10],
            qscheme: QScheme::PerTensor(pa),
        };
        let b = QuantTensor {
            shape: Shape::new(&[1]).unwrap(),
            data: vec![20],
            qscheme: QScheme::PerTensor(pa),
        };
        let out = QuantParams::int8(0.2, 0).unwrap();
        let y = qadd(&a, &b, out).unwrap();
        assert_eq!(y.data, vec![15]);
        assert!((dequantize_tensor(&y).data[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn qadd_zero_operand_rescales_other() {
        let p = QuantParams::int8(0.1, 4).unwrap();
        let a = QuantTensor {
            shape: Shape::new(&[3]).unwrap(),
            data: vec![14, 24, -6],
            qscheme: QScheme::PerTensor(p),
        };
        let zeros = QuantTensor {
            shape: Shape::new(&[3]).unwrap(),
            data: vec![4; 3],
            qscheme: QScheme::PerTensor(p),
        };
        let y = qadd(&a, &zeros, p).unwrap();
        assert_eq!(y.data, a.data);
    }

    #[test]
    fn maxpool_examples() {
        let x = ft(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d_f32(&x, 2, 2).unwrap().data, vec![4.0]);

        let c = ft(&[1, 1, 4, 4], vec![0.7; 16]);
        assert!(maxpool2d_f32(&c, 2, 2).unwrap().data.iter().all(|&v| v == 0.7));

        // window larger than input
        assert!(maxpool2d_f32(&x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_commutes_with_quantization() {
        let mut rng = crate::rng::Rng::new(21);
        for _ in 0..20 {
            let data: Vec<f32> = (0..64).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let x = ft(&[1, 4, 4, 4], data);
            let q = quantize_tensor(&x, QuantizeMode::PerTensorAffine).unwrap();
            let a = maxpool2d_q(&q, 2, 2).unwrap();
            let pooled = maxpool2d_f32(&dequantize_tensor(&q), 2, 2).unwrap();
            let b = quantize_tensor_with(&pooled, &q.qscheme);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn global_avgpool_examples() {
        let c = ft(&[1, 2, 2, 2], vec![0.5; 8]);
        assert!(global_avgpool_f32(&c).unwrap().data.iter().all(|&v| (v - 0.5).abs() < 1e-7));

        let x = ft(&[1, 1, 1, 2], vec![0.0, 2.0]);
        assert_eq!(global_avgpool_f32(&x).unwrap().data, vec![1.0]);
    }

    #[test]
    fn batchnorm_examples() {
        let x = ft(&[1, 1, 1, 1], vec![1.0]);
        // identity normalization
        let y = batchnorm_f32(&x, &[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(y.data, vec![1.0]);
        // gamma=2, mu=1, var=4, beta=5 at x=1 -> 5
        let y = batchnorm_f32(&x, &[2.0], &[5.0], &[1.0], &[4.0], 0.0).unwrap();
        assert_eq!(y.data, vec![5.0]);
        // zero variance guarded by eps
        let y = batchnorm_f32(&x, &[1.0], &[0.0], &[0.0], &[0.0], 1e-5).unwrap();
        assert!(y.data[0].is_finite());
        // channel mismatch
        assert!(batchnorm_f32(&x, &[1.0, 1.0], &[0.0], &[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn concat_float_and_quant_agree() {
        let mut rng = crate::rng::Rng::new(9);
        let a = ft(&[1, 2, 2, 2], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let b = ft(&[1, 3, 2, 2], (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let fcat = concat_f32(&[&a, &b]).unwrap();
        assert_eq!(fcat.shape.dims(), &[1, 5, 2, 2]);

        let qa = quantize_tensor(&a, QuantizeMode::PerTensorAffine).unwrap();
        let qb = quantize_tensor(&b, QuantizeMode::PerTensorAffine).unwrap();
        let out = crate::quant::compute_qparams(
            crate::quant::RealRange::new(-2.0, 2.0).unwrap(),
            INT8_QMIN,
            INT8_QMAX,
            false,
        )
        .unwrap();
        let qcat = qconcat(&[&qa, &qb], out).unwrap();
        let back = dequantize_tensor(&qcat);
        for (x, y) in fcat.data.iter().zip(&back.data) {
            assert!((x - y).abs() <= (3.0 * out.scale) as f32);
        }
    }

    #[test]
    fn accumulator_headroom_documented_bound() {
        // 127 * 127 * 7 * 7 * 512 must fit i32
        let worst: i64 = 127 * 127 * 7 * 7 * 512;
        assert!(worst < i64::from(i32::MAX));
    }
}
