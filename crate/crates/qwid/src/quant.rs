//! Scalar affine quantization math: scale/zero-point derivation,
//! quantize, dequantize, clip, and fake-quantize.
//!
//! The affine map is `x_q = round(x/s + z)` with inverse `x = s(x_q - z)`.
//! All rounding is half-to-even so repeated roundings stay unbiased and
//! results are bit-reproducible.

use crate::error::{Error, Result};

pub const INT8_QMIN: i32 = -128;
pub const INT8_QMAX: i32 = 127;

/// Scale, zero point and the integer range they map into.
///
/// Invariants: `scale > 0`, `qmin < qmax`, `qmin <= zero_point <= qmax`,
/// and real zero is exactly representable (`dequantize(zero_point) == 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, qmin: i32, qmax: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidRange { lo: scale, hi: scale });
        }
        if qmin >= qmax {
            return Err(Error::InvalidBounds { qmin, qmax });
        }
        if zero_point < qmin || zero_point > qmax {
            return Err(Error::InvalidBounds { qmin, qmax });
        }
        Ok(QuantParams { scale, zero_point, qmin, qmax })
    }

    /// int8 params with the given scale and zero point.
    pub fn int8(scale: f64, zero_point: i32) -> Result<Self> {
        Self::new(scale, zero_point, INT8_QMIN, INT8_QMAX)
    }

    pub fn is_symmetric(&self) -> bool {
        self.zero_point == 0
    }
}

/// Real-valued range `[lo, hi]` observed for a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealRange {
    pub lo: f64,
    pub hi: f64,
}

impl RealRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidRange { lo, hi });
        }
        Ok(RealRange { lo, hi })
    }
}

/// Derive quantization parameters for a real range.
///
/// Asymmetric mode nudges the range to contain zero, then
/// `scale = (hi' - lo')/(qmax - qmin)` and
/// `zero_point = clip(round(qmin - lo'/scale), qmin, qmax)`.
/// Symmetric mode widens to `[-m, m]`, `m = max(|lo|, |hi|)`, forces
/// `zero_point = 0` and uses `scale = m/qmax` so the magnitude bound maps
/// onto `qmax` exactly. A degenerate range `lo == hi == c` falls back to
/// `scale = max(|c|, 1)/qmax` with `zero_point = 0`.
pub fn compute_qparams(range: RealRange, qmin: i32, qmax: i32, symmetric: bool) -> Result<QuantParams> {
    if qmin >= qmax {
        return Err(Error::InvalidBounds { qmin, qmax });
    }
    let RealRange { lo, hi } = range;

    if lo == hi {
        let scale = lo.abs().max(1.0) / qmax as f64;
        return QuantParams::new(scale, 0, qmin, qmax);
    }

    if symmetric {
        let m = lo.abs().max(hi.abs());
        let scale = m / qmax as f64;
        return QuantParams::new(scale, 0, qmin, qmax);
    }

    // Nudge so zero is inside the represented range; zero-padding must be
    // exactly representable.
    let lo_n = lo.min(0.0);
    let hi_n = hi.max(0.0);
    let scale = (hi_n - lo_n) / (qmax - qmin) as f64;
    let z = clip((qmin as f64 - lo_n / scale).round_ties_even() as i64, qmin as i64, qmax as i64)? as i32;
    QuantParams::new(scale, z, qmin, qmax)
}

/// Saturating clip of `x` into `[lo, hi]`.
pub fn clip<T: PartialOrd>(x: T, lo: T, hi: T) -> Result<T> {
    if lo > hi {
        return Err(Error::ClipBounds);
    }
    Ok(if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    })
}

/// `clip(round(x/s + z), qmin, qmax)` with half-to-even rounding.
pub fn quantize(x: f64, p: &QuantParams) -> Result<i32> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    Ok(quantize_unchecked(x, p))
}

/// Same as [`quantize`] for inputs already known finite (tensor payloads
/// carry that invariant from construction).
#[inline]
pub(crate) fn quantize_unchecked(x: f64, p: &QuantParams) -> i32 {
    let q = (x / p.scale + p.zero_point as f64).round_ties_even();
    // round of a finite/scale may still overflow i32 range before the clip
    if q <= p.qmin as f64 {
        p.qmin
    } else if q >= p.qmax as f64 {
        p.qmax
    } else {
        q as i32
    }
}

/// `s * (x_q - z)`.
#[inline]
pub fn dequantize(x_q: i32, p: &QuantParams) -> f64 {
    p.scale * (x_q - p.zero_point) as f64
}

/// Quantize-then-dequantize: projects `x` onto the quantization lattice.
pub fn fake_quantize(x: f64, p: &QuantParams) -> Result<f64> {
    Ok(dequantize(quantize(x, p)?, p))
}

#[inline]
pub(crate) fn fake_quantize_unchecked(x: f64, p: &QuantParams) -> f64 {
    dequantize(quantize_unchecked(x, p), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(scale: f64, z: i32) -> QuantParams {
        QuantParams::int8(scale, z).unwrap()
    }

    #[test]
    fn qparams_unit_range_asym() {
        let q = compute_qparams(RealRange::new(-1.0, 1.0).unwrap(), -128, 127, false).unwrap();
        assert!((q.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(q.zero_point, 0); // round(-0.5) is 0 under ties-to-even
    }

    #[test]
    fn qparams_degenerate_zero() {
        let q = compute_qparams(RealRange::new(0.0, 0.0).unwrap(), -128, 127, false).unwrap();
        assert!((q.scale - 1.0 / 127.0).abs() < 1e-15);
        assert_eq!(q.zero_point, 0);
        assert_eq!(dequantize(q.zero_point, &q), 0.0);
    }

    #[test]
    fn qparams_relu_style_range() {
        let q = compute_qparams(RealRange::new(0.0, 6.0).unwrap(), -128, 127, false).unwrap();
        assert!((q.scale - 6.0 / 255.0).abs() < 1e-15);
        assert_eq!(q.zero_point, -128);
    }

    #[test]
    fn qparams_symmetric_forces_zero_point() {
        let q = compute_qparams(RealRange::new(-0.4, 1.0).unwrap(), -128, 127, true).unwrap();
        assert_eq!(q.zero_point, 0);
        assert!((q.scale - 1.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn qparams_rejects_bad_inputs() {
        assert!(RealRange::new(1.0, -1.0).is_err());
        assert!(RealRange::new(f64::NAN, 1.0).is_err());
        assert!(compute_qparams(RealRange::new(0.0, 1.0).unwrap(), 127, -128, false).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = p(2.0 / 255.0, 0);
        assert_eq!(quantize(0.5, &q).unwrap(), 64); // round(63.75)
        assert_eq!(quantize(0.0, &q).unwrap(), 0);
        assert_eq!(quantize(10.0, &q).unwrap(), 127);
        assert!(quantize(f64::INFINITY, &q).is_err());
    }

    #[test]
    fn quantize_zero_maps_to_zero_point() {
        for z in [-128, -5, 0, 64, 127] {
            let q = p(0.1, z);
            assert_eq!(quantize(0.0, &q).unwrap(), z);
        }
    }

    #[test]
    fn dequantize_examples() {
        let q = p(2.0 / 255.0, 0);
        assert!((dequantize(64, &q) - 0.50196078).abs() < 1e-6);
        assert_eq!(dequantize(0, &q), 0.0);
        let q2 = p(6.0 / 255.0, -128);
        assert_eq!(dequantize(-128, &q2), 0.0);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(5, -128, 127).unwrap(), 5);
        assert_eq!(clip(-200, -128, 127).unwrap(), -128);
        assert_eq!(clip(300, -128, 127).unwrap(), 127);
        assert!(clip(0, 1, -1).is_err());
    }

    #[test]
    fn fake_quantize_examples() {
        let q = p(0.1, 0);
        assert!((fake_quantize(0.303, &q).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(fake_quantize(0.0, &q).unwrap(), 0.0);
        assert!((fake_quantize(1000.0, &q).unwrap() - 12.7).abs() < 1e-12);
    }

    #[test]
    fn fake_quantize_idempotent() {
        let q = p(0.037, -17);
        let mut x = -3.0;
        while x < 3.0 {
            let once = fake_quantize(x, &q).unwrap();
            assert_eq!(fake_quantize(once, &q).unwrap(), once);
            x += 0.013;
        }
    }

    #[test]
    fn round_trip_bound_uniform_samples() {
        let range = RealRange::new(-1.3, 2.7).unwrap();
        let q = compute_qparams(range, -128, 127, false).unwrap();
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..10_000 {
            let x = rng.uniform(range.lo as f32, range.hi as f32) as f64;
            let err = (x - fake_quantize(x, &q).unwrap()).abs();
            assert!(err <= q.scale / 2.0 + 1e-9, "x={x} err={err}");
        }
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let q = p(0.05, 3);
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(x, &q).unwrap() <= quantize(y, &q).unwrap());
        }

        #[test]
        fn zero_exact_for_any_valid_params(
            scale in 1e-4f64..10.0,
            z in -128i32..=127,
        ) {
            let q = p(scale, z);
            prop_assert_eq!(fake_quantize(0.0, &q).unwrap(), 0.0);
        }
    }
}
