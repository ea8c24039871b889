//! Command-line front end: quantize checkpoints, score existing quantized
//! checkpoints against a base/fine-tune pair, and run the synthetic
//! strategy benchmark.
//!
//! All commands print an aligned text table to stdout and, except for the
//! benchmark, write the same numbers as a JSON report. The process exits 0
//! only after the report has been written in full.

use clap::{Args, Parser, Subcommand};
use deltaquant_core::checkpoint::QuantPolicy;
use deltaquant_core::metrics::MetricKind;
use deltaquant_core::pipeline::{
    evaluate_checkpoint, quantize_checkpoint, EvaluateOptions, QuantizeOptions,
};
use deltaquant_core::quant::Granularity;
use deltaquant_core::report::RunReport;
use deltaquant_core::search::{ScaleGrid, SearchConfig};
use deltaquant_core::synth::{run_bench, Strategy, SynthSpec};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "deltaquant", version, about = "Delta-aware FP8 checkpoint quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a fine-tuned checkpoint, searching per-layer scales that
    /// keep its delta against the base checkpoint intact
    Quantize(QuantizeArgs),
    /// Score an existing checkpoint against a base/fine-tune pair
    Evaluate(EvaluateArgs),
    /// Compare scaling strategies on seeded synthetic layers
    BenchSynthetic(BenchArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Scale-multiplier search range "lo,hi"; needs 0 < lo <= 1 <= hi
    #[arg(long, value_parser = parse_range, default_value = "0.8,1.25")]
    range: (f64, f64),
    /// Candidates in the coarse stage
    #[arg(long, default_value_t = 5)]
    coarse: usize,
    /// Candidates in the fine stage
    #[arg(long, default_value_t = 10)]
    fine: usize,
}

impl GridArgs {
    fn grid(&self) -> ScaleGrid {
        ScaleGrid {
            alpha_min: self.range.0,
            alpha_max: self.range.1,
            n_coarse: self.coarse,
            n_fine: self.fine,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Worker threads (default: all cores; results do not depend on this)
    #[arg(long)]
    workers: Option<usize>,
    /// Where to write the JSON report (default: next to the output)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write a per-layer CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Base checkpoint: .safetensors file, index JSON, or directory
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint with the same tensor names and shapes
    #[arg(long)]
    post: PathBuf,
    /// Where to write the quantized checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Search objective: mse, sign, or cosine
    #[arg(long, default_value = "sign")]
    metric: MetricKind,
    /// Scale grouping: tensor, channel, or block[:RxC]
    #[arg(long, default_value_t = Granularity::default())]
    granularity: Granularity,
    #[command(flatten)]
    grid: GridArgs,
    /// Fine-stage half-width around the best coarse alpha (default: one
    /// coarse step)
    #[arg(long)]
    delta: Option<f64>,
    /// Quantize only tensors matching one of these comma-separated globs
    #[arg(long, value_delimiter = ',', default_value = "*")]
    include: Vec<String>,
    /// Keep tensors matching any of these globs at full precision
    #[arg(long, value_delimiter = ',', default_value = "*embed*,*lm_head*")]
    exclude: Vec<String>,
    /// Keep tensors with fewer dimensions than this at full precision
    #[arg(long, default_value_t = 2)]
    min_rank: usize,
    /// Keep tensors with fewer elements than this at full precision
    #[arg(long, default_value_t = 4096)]
    min_elements: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Base checkpoint: .safetensors file, index JSON, or directory
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint the quantized one should approximate
    #[arg(long)]
    post: PathBuf,
    /// Checkpoint to score: FP8 quantize output or any plain checkpoint
    #[arg(long)]
    quant: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// RNG seed; fixes the synthetic data exactly
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    rows: usize,
    #[arg(long, default_value_t = 256)]
    cols: usize,
    /// Standard deviation of the base weights
    #[arg(long, default_value_t = 1.0)]
    base_sigma: f64,
    /// Standard deviation of the fine-tuning delta
    #[arg(long, default_value_t = 0.01)]
    delta_sigma: f64,
    /// Comma-separated strategies to compare: absmax, mse, sign, cosine
    #[arg(long, value_delimiter = ',', default_value = "absmax,mse,sign,cosine")]
    configs: Vec<Strategy>,
    /// Scale grouping: tensor, channel, or block[:RxC]
    #[arg(long, default_value_t = Granularity::default())]
    granularity: Granularity,
    #[command(flatten)]
    grid: GridArgs,
    /// Worker threads (default: all cores; results do not depend on this)
    #[arg(long)]
    workers: Option<usize>,
    /// Also write the comparison table to this file
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"lo,hi\", got {s:?}"))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound {lo:?}: {e}"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad upper bound {hi:?}: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= 1.0 && 1.0 <= hi) {
        return Err(format!(
            "range must satisfy 0 < lo <= 1 <= hi so plain absmax scaling stays a candidate, got {lo},{hi}"
        ));
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> deltaquant_core::Result<()> {
    match command {
        Command::Quantize(args) => {
            let opts = QuantizeOptions {
                search: SearchConfig {
                    grid: args.grid.grid(),
                    metric: args.metric,
                    granularity: args.granularity,
                    delta: args.delta,
                },
                policy: QuantPolicy {
                    include: args.include,
                    exclude: args.exclude,
                    min_rank: args.min_rank,
                    min_elements: args.min_elements,
                },
                workers: args.common.workers,
            };
            let report = quantize_checkpoint(&args.base, &args.post, &args.out, &opts)?;
            emit(&report, &args.common, with_suffix(&args.out, ".report.json"))
        }
        Command::Evaluate(args) => {
            let opts = EvaluateOptions {
                metric: None,
                workers: args.common.workers,
            };
            let report = evaluate_checkpoint(&args.base, &args.post, &args.quant, &opts)?;
            emit(&report, &args.common, with_suffix(&args.quant, ".eval.json"))
        }
        Command::BenchSynthetic(args) => {
            let spec = SynthSpec {
                layers: args.layers,
                rows: args.rows,
                cols: args.cols,
                base_std: args.base_sigma,
                delta_std: args.delta_sigma,
                seed: args.seed,
            };
            let report = run_bench(
                &spec,
                args.grid.grid(),
                args.granularity,
                &args.configs,
                args.workers,
            )?;
            let rendered = report.render();
            print!("{rendered}");
            if let Some(path) = &args.report {
                std::fs::write(path, rendered.as_bytes())?;
            }
            Ok(())
        }
    }
}

/// Prints the table, writes the JSON report (and optional CSV), and notes
/// the report location on stderr so stdout stays machine-comparable.
fn emit(
    report: &RunReport,
    common: &CommonArgs,
    default_path: PathBuf,
) -> deltaquant_core::Result<()> {
    print!("{}", report.render_table());
    let path = common.report.clone().unwrap_or(default_path);
    std::fs::write(&path, report.to_json() + "\n")?;
    if let Some(csv_path) = &common.csv {
        let file = std::fs::File::create(csv_path)?;
        report.write_csv(std::io::BufWriter::new(file))?;
    }
    eprintln!("report: {}", path.display());
    Ok(())
}

/// `quant.safetensors` -> `quant.safetensors.report.json` and similar.
fn with_suffix(anchor: &Path, suffix: &str) -> PathBuf {
    let mut name = anchor.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    anchor.with_file_name(name)
}
