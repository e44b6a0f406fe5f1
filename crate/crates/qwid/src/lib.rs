//! qwid: an int8 affine quantization engine and benchmark harness for
//! small convolutional classifiers.
//!
//! The crate covers the whole pipeline at desk scale: affine quantization
//! math, per-channel weight quantization, min/max calibration, integer
//! inference kernels, layer fusion and batch-norm folding, fp32 -> int8
//! model conversion, quantization-aware training with straight-through
//! gradients, a binary model format, and the measurement protocol
//! (model size, latency, OPs throughput, memory footprint, confusion
//! matrix).

pub mod arch;
pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod model_io;
pub mod observer;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
