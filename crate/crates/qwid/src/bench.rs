//! Latency/throughput measurement for graph inference.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::model_io;
use crate::tensor::FloatTensor;

pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_WARMUP: usize = 10;

/// Results of one benchmark run (single image, single thread).
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub iterations: usize,
    pub warmup: usize,
    pub mean_latency_s: f64,
    pub median_latency_s: f64,
    pub min_latency_s: f64,
    /// Arithmetic ops per forward pass divided by mean latency.
    pub throughput_ops_per_s: f64,
    pub model_size_bytes: u64,
    pub memory_footprint_bytes: u64,
    pub hardware: String,
}

/// Best-effort CPU description for report provenance.
pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!("{cpu} ({}-{})", std::env::consts::ARCH, std::env::consts::OS)
}

/// Time repeated forward passes over a prepared input. Warmup passes run
/// first and are not recorded; only the forward call itself is timed.
pub fn benchmark(
    g: &mut LayerGraph,
    x: &FloatTensor,
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Contract("benchmark needs at least one iteration".into()));
    }
    let live = g.observers_live;
    g.observers_live = false;
    for _ in 0..warmup {
        g.forward(x)?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        g.forward(x)?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    g.observers_live = live;
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = samples.iter().sum::<f64>() / iterations as f64;
    let median = if iterations % 2 == 1 {
        samples[iterations / 2]
    } else {
        0.5 * (samples[iterations / 2 - 1] + samples[iterations / 2])
    };
    let ops = g.count_ops()?;
    Ok(BenchReport {
        iterations,
        warmup,
        mean_latency_s: mean,
        median_latency_s: median,
        min_latency_s: samples[0],
        throughput_ops_per_s: ops / mean,
        model_size_bytes: model_io::serialized_size(g)?,
        memory_footprint_bytes: g.memory_footprint()?,
        hardware: hardware_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::rng::Rng;
    use crate::tensor::Shape;

    fn input() -> FloatTensor {
        let mut rng = Rng::new(1);
        let shape = Shape::new(&[1, 3, 32, 32]).unwrap();
        let data = (0..shape.len()).map(|_| rng.uniform(0.0, 1.0)).collect();
        FloatTensor::new(shape, data).unwrap()
    }

    #[test]
    fn report_statistics_are_consistent() {
        let mut g = arch::tiny_inception(1).unwrap();
        let r = benchmark(&mut g, &input(), 5, 1).unwrap();
        assert_eq!(r.iterations, 5);
        assert_eq!(r.warmup, 1);
        assert!(r.min_latency_s > 0.0);
        assert!(r.min_latency_s <= r.median_latency_s);
        assert!(r.min_latency_s <= r.mean_latency_s);
        assert!(r.throughput_ops_per_s > 0.0);
        assert!(r.model_size_bytes > 0);
        assert!(r.memory_footprint_bytes > 0);
        assert!(!r.hardware.is_empty());
    }

    #[test]
    fn zero_iterations_is_an_error() {
        let mut g = arch::tiny_inception(1).unwrap();
        assert!(benchmark(&mut g, &input(), 0, 0).is_err());
    }
}
