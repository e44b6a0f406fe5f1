//! Command-line front end: train, quantize, evaluate, and benchmark
//! small image classifiers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qwid::arch::{Arch, INPUT_SIZE};
use qwid::bench;
use qwid::data::{self, Dataset};
use qwid::eval;
use qwid::graph::{LayerGraph, Mode};
use qwid::model_io;
use qwid::qat::{self, QatConfig};
use qwid::rng::Rng;
use qwid::tensor::{FloatTensor, Shape};

#[derive(Parser)]
#[command(name = "qwid", version, about = "int8 quantization engine and benchmark harness for small CNNs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an fp32 baseline model
    Train(TrainArgs),
    /// Fine-tune a trained fp32 model with quantization-aware training
    Qat(QatArgs),
    /// Convert a QAT checkpoint to an integer-only int8 model
    Convert(ConvertArgs),
    /// Evaluate a model on the held-out test split
    Eval(EvalArgs),
    /// Measure single-image inference latency and throughput
    Bench(BenchArgs),
    /// Print a model file's structure and statistics
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// "synthetic" or a directory of per-class PPM subdirectories
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Images per minority class for the synthetic set
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Seed for data generation and the train/val/test split
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "tinyresnet")]
    arch: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Output model path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QatArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained fp32 model to start from (omit for a cold start)
    #[arg(long, visible_alias = "init-from")]
    model: Option<PathBuf>,
    /// Architecture for a cold start (ignored when --model is given)
    #[arg(long, default_value = "tinyresnet")]
    arch: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// QAT checkpoint to convert
    #[arg(long)]
    model: PathBuf,
    /// Output int8 model path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Free-text hardware description recorded in the report (default: detected CPU)
    #[arg(long)]
    hardware: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn load_splits(args: &DataArgs) -> Result<(Dataset, Dataset, Dataset)> {
    let full = if args.data == "synthetic" {
        data::generate_synthetic(args.seed, args.per_class, INPUT_SIZE)
            .context("generating synthetic dataset")?
    } else {
        data::load_image_dir(Path::new(&args.data), INPUT_SIZE)
            .with_context(|| format!("loading image directory {}", args.data))?
    };
    Ok(data::split(&full, args.seed)?)
}

fn load_model(path: &Path) -> Result<LayerGraph> {
    model_io::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Fp32 => "fp32",
        Mode::FakeQuant => "fake-quant",
        Mode::Int8 => "int8",
    }
}

fn print_history(history: &[qat::EpochRecord]) {
    for r in history {
        println!(
            "epoch={} train_loss={:.4} train_acc={:.4} val_acc={:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let Some(arch) = Arch::parse(&a.arch) else {
        bail!("unknown architecture '{}' (expected tinyresnet or tinyinception)", a.arch);
    };
    let (train, val, test) = load_splits(&a.data)?;
    println!(
        "dataset train={} val={} test={} arch={} seed={}",
        train.len(),
        val.len(),
        test.len(),
        arch.name(),
        a.data.seed
    );
    let g = arch.build(a.data.seed)?;
    let cfg = QatConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.data.seed,
        ..QatConfig::default()
    };
    let (mut g, history) = qat::train(g, &train, &val, &cfg)?;
    print_history(&history);
    let report = eval::evaluate(&mut g, &test, a.batch)?;
    println!("test_top1={:.4} test_top3={:.4}", report.top1, report.top3);
    model_io::save(&g, &a.out)?;
    println!("saved={}", a.out.display());
    Ok(())
}

fn cmd_qat(a: QatArgs) -> Result<()> {
    let g = match &a.model {
        Some(path) => {
            let g = load_model(path)?;
            if g.mode != Mode::Fp32 {
                bail!("qat expects an fp32 model, got {}", mode_name(g.mode));
            }
            g
        }
        None => {
            let Some(arch) = Arch::parse(&a.arch) else {
                bail!("unknown architecture '{}' (expected tinyresnet or tinyinception)", a.arch);
            };
            arch.build(a.data.seed)?
        }
    };
    let (train, val, test) = load_splits(&a.data)?;
    let fused = g.fuse()?.fold_batchnorm()?;
    let mut fq = qat::insert_fake_quant(&fused)?;
    fq.observers_live = true;
    let cfg = QatConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.data.seed,
        ..QatConfig::default()
    };
    let (mut fq, history) = qat::train(fq, &train, &val, &cfg)?;
    print_history(&history);
    // freeze observers: the saved checkpoint carries the final ranges
    fq.observers_live = false;
    let report = eval::evaluate(&mut fq, &test, a.batch)?;
    println!("test_top1={:.4} test_top3={:.4}", report.top1, report.top3);
    model_io::save(&fq, &a.out)?;
    println!("saved={}", a.out.display());
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let g = load_model(&a.model)?;
    if g.mode != Mode::FakeQuant {
        bail!("convert expects a fake-quant checkpoint, got {}", mode_name(g.mode));
    }
    let int8 = g.convert()?;
    model_io::save(&int8, &a.out)?;
    let before = model_io::model_size_bytes(&a.model)?;
    let after = model_io::model_size_bytes(&a.out)?;
    println!("saved={} bytes={} checkpoint_bytes={}", a.out.display(), after, before);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut g = load_model(&a.model)?;
    let (_, _, test) = load_splits(&a.data)?;
    let report = eval::evaluate(&mut g, &test, a.batch)?;
    println!(
        "mode={} samples={} top1={:.4} top3={:.4}",
        mode_name(g.mode),
        report.samples,
        report.top1,
        report.top3
    );
    print!("{}", report.render_confusion());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut g = load_model(&a.model)?;
    let mut rng = Rng::new(a.seed);
    let dims = g.input_shape.dims().to_vec();
    let shape = Shape::new(&[1, dims[0], dims[1], dims[2]])?;
    let data = (0..shape.len()).map(|_| rng.uniform(0.0, 1.0)).collect();
    let x = FloatTensor::new(shape, data)?;
    let mut r = bench::benchmark(&mut g, &x, a.iters, a.warmup)?;
    if let Some(hw) = a.hardware {
        r.hardware = hw;
    }
    println!("hardware={}", r.hardware);
    println!(
        "mode={} iterations={} warmup={} mean_ms={:.4} median_ms={:.4} min_ms={:.4}",
        mode_name(g.mode),
        r.iterations,
        r.warmup,
        r.mean_latency_s * 1e3,
        r.median_latency_s * 1e3,
        r.min_latency_s * 1e3
    );
    println!(
        "throughput_gops={:.4} model_bytes={} footprint_bytes={}",
        r.throughput_ops_per_s / 1e9,
        r.model_size_bytes,
        r.memory_footprint_bytes
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let g = load_model(&a.model)?;
    println!("mode={}", mode_name(g.mode));
    println!("input_shape={:?}", g.input_shape.dims());
    println!("nodes={}", g.nodes.len());
    println!("params={}", g.param_count());
    println!("ops_per_image={:.0}", g.count_ops()?);
    println!("model_bytes={}", model_io::model_size_bytes(&a.model)?);
    println!("footprint_bytes={}", g.memory_footprint()?);
    for n in &g.nodes {
        let inputs: Vec<String> = n.inputs.iter().map(|i| i.to_string()).collect();
        let mut line = format!("node {:>3}  {:<12} <- [{}]", n.id, n.op.name(), inputs.join(","));
        if let Some(p) = &n.out_params {
            line.push_str(&format!("  scale={:.6} zp={}", p.scale, p.zero_point));
        }
        println!("{line}");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Qat(a) => cmd_qat(a),
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    }
}
