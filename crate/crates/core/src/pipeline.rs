//! End-to-end quantize and evaluate flows over checkpoint files.
//!
//! Both flows are deterministic for a given input: layers are processed in
//! name order, per-layer work is sequential, and rayon only distributes
//! whole layers across threads with order-preserving collection. Running
//! with one worker or many produces identical reports and identical output
//! files.

use crate::checkpoint::{self, LoadedCheckpoint, QuantPolicy};
use crate::error::{Error, Result};
use crate::metrics::{self, LayerPair, MetricKind};
use crate::quant::{self, QuantizedLayer};
use crate::report::{Aggregate, GridSummary, LayerReport, RunReport};
use crate::search::{self, SearchConfig};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Runs a closure inside a rayon pool of the requested size. `None` and
/// `Some(0)` use the global default pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None | Some(0) => Ok(f()),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build {n}-thread pool: {e}")))?
            .install(f)),
    }
}

#[derive(Debug, Clone)]
pub struct QuantizeOptions {
    pub search: SearchConfig,
    pub policy: QuantPolicy,
    pub workers: Option<usize>,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        QuantizeOptions {
            search: SearchConfig::default(),
            policy: QuantPolicy::default(),
            workers: None,
        }
    }
}

/// Searches scales for every policy-selected layer of the fine-tuned
/// checkpoint, writes the quantized container to `out`, and reports per
/// layer.
pub fn quantize_checkpoint(
    base: &Path,
    post: &Path,
    out: &Path,
    opts: &QuantizeOptions,
) -> Result<RunReport> {
    let started = Instant::now();
    opts.search.validate()?;
    let base_ckpt = checkpoint::load_checkpoint(base)?;
    let post_ckpt = checkpoint::load_checkpoint(post)?;
    let paired = checkpoint::pair_checkpoints(&base_ckpt, &post_ckpt, &opts.policy)?;

    let searched = with_workers(opts.workers, || {
        search::search_model(&paired.pairs, &opts.search)
    })??;

    let granularity_tag = opts.search.granularity.tag();
    let mut reports = Vec::with_capacity(searched.len());
    let mut quantized = Vec::with_capacity(searched.len());
    let mut alphas = BTreeMap::new();
    for (pair, (outcome, layer)) in paired.pairs.iter().zip(searched) {
        let w_hat = layer.dequantize()?;
        let mut report = LayerReport::measure(pair, &w_hat)?;
        report.granularity = granularity_tag.clone();
        report.alpha = Some(outcome.alpha);
        report.baseline_metric = Some(outcome.baseline_metric);
        report.best_metric = Some(outcome.best_metric);
        alphas.insert(pair.name.clone(), outcome.alpha);
        quantized.push((pair.name.clone(), layer));
        reports.push(report);
    }

    let extra = BTreeMap::from([(
        "quant.metric".to_string(),
        opts.search.metric.name().to_string(),
    )]);
    checkpoint::write_quantized(
        out,
        &quantized,
        &paired.passthrough,
        opts.search.granularity,
        &alphas,
        &extra,
    )?;

    Ok(RunReport {
        command: "quantize".to_string(),
        metric: opts.search.metric.name().to_string(),
        granularity: granularity_tag,
        grid: Some(GridSummary {
            alpha_min: opts.search.grid.alpha_min,
            alpha_max: opts.search.grid.alpha_max,
            n_coarse: opts.search.grid.n_coarse,
            n_fine: opts.search.grid.n_fine,
        }),
        aggregate: Aggregate::from_layers(&reports),
        layers: reports,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    /// Objective used for the baseline/best echoes. `None` picks up the
    /// metric recorded in the quantized checkpoint, falling back to sign
    /// rate.
    pub metric: Option<MetricKind>,
    pub workers: Option<usize>,
}

/// One tensor the evaluate flow will score: either real FP8 codes or a
/// plain tensor standing in for its own reconstruction.
enum EvalTarget<'a> {
    Quantized(&'a QuantizedLayer),
    Plain(&'a crate::container::StoredTensor),
}

/// Scores an existing checkpoint against the base/fine-tune pair it was
/// built from. FP8 tensors are dequantized through exactly the code path
/// the quantizer reported on, so evaluating a quantize run's output
/// reproduces its report bit for bit; plain tensors are scored as their
/// own reconstruction, which makes identity and base-as-quantized
/// comparisons expressible.
pub fn evaluate_checkpoint(
    base: &Path,
    post: &Path,
    quantized: &Path,
    opts: &EvaluateOptions,
) -> Result<RunReport> {
    let started = Instant::now();
    let base_ckpt = checkpoint::load_checkpoint(base)?;
    let post_ckpt = checkpoint::load_checkpoint(post)?;
    let quant_ckpt = checkpoint::read_quantized(quantized)?;

    let metric = match opts.metric {
        Some(m) => m,
        None => quant_ckpt
            .metadata
            .get("quant.metric")
            .map(|name| name.parse())
            .transpose()?
            .unwrap_or(MetricKind::SignRate),
    };

    // Merge quantized layers and plain tensors into one name-ordered list.
    let mut targets: BTreeMap<&str, EvalTarget> = BTreeMap::new();
    for (name, layer) in &quant_ckpt.layers {
        targets.insert(name, EvalTarget::Quantized(layer));
    }
    for (name, tensor) in &quant_ckpt.passthrough {
        targets.insert(name, EvalTarget::Plain(tensor));
    }
    let targets: Vec<(&str, EvalTarget)> = targets.into_iter().collect();

    let reports: Vec<LayerReport> = with_workers(opts.workers, || {
        targets
            .par_iter()
            .map(|(name, target)| {
                evaluate_target(&base_ckpt, &post_ckpt, &quant_ckpt, name, target, metric)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let granularity = quant_ckpt
        .metadata
        .get(checkpoint::GRANULARITY_KEY)
        .cloned()
        .unwrap_or_else(|| "none".to_string());

    Ok(RunReport {
        command: "evaluate".to_string(),
        metric: metric.name().to_string(),
        granularity,
        grid: None,
        aggregate: Aggregate::from_layers(&reports),
        layers: reports,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn evaluate_target(
    base: &LoadedCheckpoint,
    post: &LoadedCheckpoint,
    ckpt: &checkpoint::QuantizedCheckpoint,
    name: &str,
    target: &EvalTarget,
    metric: MetricKind,
) -> Result<LayerReport> {
    let lookup = |ckpt: &LoadedCheckpoint, which: &str| -> Result<Tensor> {
        ckpt.file
            .tensors
            .get(name)
            .ok_or_else(|| {
                Error::Pairing(format!(
                    "tensor {name:?} is missing from the {which} checkpoint"
                ))
            })
            .and_then(|t| t.to_f64())
    };
    let pair = LayerPair::new(name, lookup(base, "base")?, lookup(post, "fine-tuned")?)?;

    match target {
        EvalTarget::Quantized(layer) => {
            let w_hat = layer.dequantize()?;
            if w_hat.shape() != pair.post.shape() {
                return Err(Error::Shape(format!(
                    "quantized tensor {name:?} has shape {:?}, checkpoints have {:?}",
                    w_hat.shape(),
                    pair.post.shape()
                )));
            }
            let mut report = LayerReport::measure(&pair, &w_hat)?;
            report.granularity = layer.granularity.tag();
            report.alpha = ckpt.alpha_for(name);
            report.best_metric = Some(metrics::evaluate(metric, &pair, &w_hat)?);
            // Baseline: re-quantize the fine-tuned weights at alpha = 1,
            // the same computation the search's probe performs.
            let baseline_hat = quant::quant_dequant(&pair.post, layer.granularity, 1.0)?;
            report.baseline_metric = Some(metrics::evaluate(metric, &pair, &baseline_hat)?);
            Ok(report)
        }
        EvalTarget::Plain(tensor) => {
            let w_hat = tensor.to_f64()?;
            if w_hat.shape() != pair.post.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name:?} has shape {:?}, checkpoints have {:?}",
                    w_hat.shape(),
                    pair.post.shape()
                )));
            }
            LayerReport::measure(&pair, &w_hat)
        }
    }
}
