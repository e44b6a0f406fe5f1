//! Running min/max range statistics collected during calibration and QAT,
//! finalized into quantization params.
//!
//! The observer keeps a global running envelope (no decay), so observed
//! ranges never shrink and the result is independent of observation order.

use crate::error::{Error, Result};
use crate::quant::{compute_qparams, QuantParams, RealRange};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, PartialEq)]
enum Ranges {
    PerTensor(Option<(f32, f32)>),
    PerChannel { axis: usize, pairs: Option<Vec<(f32, f32)>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxObserver {
    ranges: Ranges,
    count: u64,
}

impl MinMaxObserver {
    pub fn per_tensor() -> Self {
        MinMaxObserver { ranges: Ranges::PerTensor(None), count: 0 }
    }

    pub fn per_channel(axis: usize) -> Self {
        MinMaxObserver { ranges: Ranges::PerChannel { axis, pairs: None }, count: 0 }
    }

    /// Rebuild a per-tensor observer from a previously recorded range.
    pub fn from_range(lo: f64, hi: f64, count: u64) -> Result<Self> {
        RealRange::new(lo, hi)?;
        Ok(MinMaxObserver {
            ranges: Ranges::PerTensor(Some((lo as f32, hi as f32))),
            count: count.max(1),
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Tracked per-tensor range, if any data has been seen.
    pub fn range(&self) -> Option<(f32, f32)> {
        match &self.ranges {
            Ranges::PerTensor(r) => *r,
            Ranges::PerChannel { .. } => None,
        }
    }

    pub fn channel_ranges(&self) -> Option<&[(f32, f32)]> {
        match &self.ranges {
            Ranges::PerChannel { pairs: Some(p), .. } => Some(p),
            _ => None,
        }
    }

    /// Fold a tensor's values into the running envelope.
    pub fn observe(&mut self, t: &FloatTensor) -> Result<()> {
        match &mut self.ranges {
            Ranges::PerTensor(r) => {
                let (lo, hi) = t.min_max();
                *r = Some(match *r {
                    None => (lo, hi),
                    Some((a, b)) => (a.min(lo), b.max(hi)),
                });
            }
            Ranges::PerChannel { axis, pairs } => {
                let dims = t.shape.dims();
                if *axis >= dims.len() {
                    return Err(Error::ShapeMismatch(format!("axis {axis} out of rank")));
                }
                let axis_len = dims[*axis];
                if let Some(p) = pairs {
                    if p.len() != axis_len {
                        return Err(Error::ShapeMismatch(format!(
                            "axis length {axis_len} != tracked {}",
                            p.len()
                        )));
                    }
                }
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[*axis + 1..].iter().product();
                let p = pairs.get_or_insert_with(|| vec![(f32::INFINITY, f32::NEG_INFINITY); axis_len]);
                for a in 0..axis_len {
                    for o in 0..outer {
                        let base = (o * axis_len + a) * inner;
                        for &x in &t.data[base..base + inner] {
                            p[a].0 = p[a].0.min(x);
                            p[a].1 = p[a].1.max(x);
                        }
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Derive params from the tracked range(s).
    pub fn finalize(&self, qmin: i32, qmax: i32, symmetric: bool) -> Result<Vec<QuantParams>> {
        if self.count == 0 {
            return Err(Error::EmptyObserver);
        }
        match &self.ranges {
            Ranges::PerTensor(Some((lo, hi))) => Ok(vec![compute_qparams(
                RealRange::new(*lo as f64, *hi as f64)?,
                qmin,
                qmax,
                symmetric,
            )?]),
            Ranges::PerChannel { pairs: Some(pairs), .. } => pairs
                .iter()
                .map(|&(lo, hi)| {
                    compute_qparams(RealRange::new(lo as f64, hi as f64)?, qmin, qmax, symmetric)
                })
                .collect(),
            _ => Err(Error::EmptyObserver),
        }
    }

    /// Per-tensor finalize convenience.
    pub fn finalize_per_tensor(&self, qmin: i32, qmax: i32, symmetric: bool) -> Result<QuantParams> {
        Ok(self.finalize(qmin, qmax, symmetric)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{INT8_QMAX, INT8_QMIN};
    use crate::tensor::Shape;

    fn t(data: Vec<f32>) -> FloatTensor {
        let n = data.len();
        FloatTensor::new(Shape::new(&[n]).unwrap(), data).unwrap()
    }

    #[test]
    fn fresh_observer_takes_first_range() {
        let mut o = MinMaxObserver::per_tensor();
        o.observe(&t(vec![-2.0, 0.5, 3.0])).unwrap();
        assert_eq!(o.range(), Some((-2.0, 3.0)));
    }

    #[test]
    fn envelope_is_monotone() {
        let mut o = MinMaxObserver::per_tensor();
        o.observe(&t(vec![-2.0, 3.0])).unwrap();
        o.observe(&t(vec![-1.0, 5.0])).unwrap();
        assert_eq!(o.range(), Some((-2.0, 5.0)));
        // narrower tensor never shrinks the envelope
        o.observe(&t(vec![0.0, 0.1])).unwrap();
        assert_eq!(o.range(), Some((-2.0, 5.0)));
    }

    #[test]
    fn order_independent() {
        let batches = [vec![-2.0f32, 3.0], vec![-1.0, 5.0], vec![0.0, 0.25]];
        let mut fwd = MinMaxObserver::per_tensor();
        let mut rev = MinMaxObserver::per_tensor();
        for b in &batches {
            fwd.observe(&t(b.clone())).unwrap();
        }
        for b in batches.iter().rev() {
            rev.observe(&t(b.clone())).unwrap();
        }
        assert_eq!(fwd.range(), rev.range());
    }

    #[test]
    fn per_channel_tracks_slices_independently() {
        let mut o = MinMaxObserver::per_channel(0);
        let w = FloatTensor::new(
            Shape::new(&[2, 2]).unwrap(),
            vec![-1.0, 1.0, -4.0, 2.0],
        )
        .unwrap();
        o.observe(&w).unwrap();
        assert_eq!(o.channel_ranges().unwrap(), &[(-1.0, 1.0), (-4.0, 2.0)]);
        let ps = o.finalize(INT8_QMIN, INT8_QMAX, true).unwrap();
        assert!((ps[0].scale - 1.0 / 127.0).abs() < 1e-15);
        assert!((ps[1].scale - 4.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn finalize_matches_compute_qparams() {
        let mut o = MinMaxObserver::per_tensor();
        o.observe(&t(vec![-1.0, 1.0])).unwrap();
        let p = o.finalize_per_tensor(INT8_QMIN, INT8_QMAX, false).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn degenerate_range_finalizes() {
        let mut o = MinMaxObserver::per_tensor();
        o.observe(&t(vec![0.0, 0.0])).unwrap();
        let p = o.finalize_per_tensor(INT8_QMIN, INT8_QMAX, false).unwrap();
        assert!((p.scale - 1.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn empty_observer_errors() {
        let o = MinMaxObserver::per_tensor();
        assert!(matches!(
            o.finalize(INT8_QMIN, INT8_QMAX, false),
            Err(Error::EmptyObserver)
        ));
    }

    #[test]
    fn per_channel_axis_mismatch_errors() {
        let mut o = MinMaxObserver::per_channel(0);
        o.observe(&FloatTensor::zeros(Shape::new(&[2, 3]).unwrap())).unwrap();
        assert!(o.observe(&FloatTensor::zeros(Shape::new(&[4, 3]).unwrap())).is_err());
    }
}
