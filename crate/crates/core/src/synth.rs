//! Seeded synthetic checkpoints and the strategy comparison bench.
//!
//! Layer pairs are drawn as base ~ N(0, base_std^2) with an additive
//! delta ~ N(0, delta_std^2), the regime where plain absmax scaling hurts:
//! the delta is two orders of magnitude below the weights, so quantization
//! noise at the default scale wipes out most of its signs. All draws come
//! from a single ChaCha8 stream, so a seed fully determines the data.
//!
//! The bench quantizes the same synthetic layers once per strategy (plain
//! absmax, or a scale search driven by one of the metrics) and tabulates
//! the pooled delta metrics. Its output contains no timing, so identical
//! invocations render identical bytes.

use crate::error::{Error, Result};
use crate::metrics::{LayerPair, MetricKind};
use crate::pipeline::with_workers;
use crate::quant::{self, Granularity};
use crate::report::{Aggregate, LayerReport};
use crate::search::{self, ScaleGrid, SearchConfig};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    pub base_std: f64,
    pub delta_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layers: 8,
            rows: 256,
            cols: 256,
            base_std: 1.0,
            delta_std: 0.01,
            seed: 0,
        }
    }
}

/// Draws the layer pairs for a spec. Sampling is sequential on one seeded
/// stream: per layer, all base values first, then all deltas.
pub fn generate_pairs(spec: &SynthSpec) -> Result<Vec<LayerPair>> {
    let base_dist = Normal::new(0.0, spec.base_std)
        .map_err(|e| Error::InvalidConfig(format!("base_std: {e}")))?;
    let delta_dist = Normal::new(0.0, spec.delta_std)
        .map_err(|e| Error::InvalidConfig(format!("delta_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.rows * spec.cols;
    let mut pairs = Vec::with_capacity(spec.layers);
    for k in 0..spec.layers {
        let base: Vec<f64> = (0..n).map(|_| base_dist.sample(&mut rng)).collect();
        let post: Vec<f64> = base
            .iter()
            .map(|b| b + delta_dist.sample(&mut rng))
            .collect();
        pairs.push(LayerPair::new(
            format!("synth.{k}.weight"),
            Tensor::new(vec![spec.rows, spec.cols], base)?,
            Tensor::new(vec![spec.rows, spec.cols], post)?,
        )?);
    }
    Ok(pairs)
}

/// How to pick each layer's scale in the bench.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Plain absmax scaling, alpha pinned to 1.
    Absmax,
    /// Grid search maximizing the given metric.
    Search(MetricKind),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Absmax => "absmax",
            Strategy::Search(m) => m.name(),
        }
    }

    /// Every supported strategy, in the order the bench reports them.
    pub fn all() -> Vec<Strategy> {
        vec![
            Strategy::Absmax,
            Strategy::Search(MetricKind::NegMse),
            Strategy::Search(MetricKind::SignRate),
            Strategy::Search(MetricKind::CosSim),
        ]
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "absmax" {
            return Ok(Strategy::Absmax);
        }
        s.parse::<MetricKind>().map(Strategy::Search).map_err(|_| {
            Error::InvalidConfig(format!(
                "unknown strategy {s:?}; expected absmax, mse, sign, or cosine"
            ))
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One strategy's pooled results over the synthetic layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub strategy: String,
    pub mean_alpha: f64,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub spec: SynthSpec,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Aligned text table. Deliberately timing-free.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "synthetic: {} layers of {}x{}, base_std {}, delta_std {}, seed {}",
            self.spec.layers,
            self.spec.rows,
            self.spec.cols,
            self.spec.base_std,
            self.spec.delta_std,
            self.spec.seed
        );
        let header = format!(
            "{:<10}  {:>10}  {:>12}  {:>9}  {:>9}  {:>12}",
            "strategy", "mean_alpha", "mse", "sign", "cosine", "delta_l2"
        );
        let rule = "-".repeat(header.len());
        out.push_str(&header);
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<10}  {:>10.4}  {:>12.4e}  {:>8.2}%  {:>9.6}  {:>12.4e}",
                row.strategy,
                row.mean_alpha,
                row.aggregate.mse,
                row.aggregate.sign_rate * 100.0,
                row.aggregate.cos_sim,
                row.aggregate.delta_l2
            );
        }
        out
    }
}

/// Quantizes the spec's layers under each requested strategy and pools the
/// delta metrics per strategy.
pub fn run_bench(
    spec: &SynthSpec,
    grid: ScaleGrid,
    granularity: Granularity,
    strategies: &[Strategy],
    workers: Option<usize>,
) -> Result<BenchReport> {
    grid.validate()?;
    if strategies.is_empty() {
        return Err(Error::InvalidConfig(
            "bench needs at least one strategy".to_string(),
        ));
    }
    let pairs = generate_pairs(spec)?;
    let mut rows = Vec::new();

    for strategy in strategies {
        let row = match strategy {
            Strategy::Absmax => {
                let reports: Vec<LayerReport> = with_workers(workers, || {
                    pairs
                        .par_iter()
                        .map(|pair| measure_at(pair, granularity, 1.0))
                        .collect::<Result<Vec<_>>>()
                })??;
                BenchRow {
                    strategy: strategy.name().to_string(),
                    mean_alpha: 1.0,
                    aggregate: Aggregate::from_layers(&reports),
                }
            }
            Strategy::Search(metric) => {
                let config = SearchConfig {
                    grid,
                    metric: *metric,
                    granularity,
                    delta: None,
                };
                let searched = with_workers(workers, || search::search_model(&pairs, &config))??;
                let reports: Vec<LayerReport> = pairs
                    .iter()
                    .zip(&searched)
                    .map(|(pair, (_, layer))| {
                        let w_hat = layer.dequantize()?;
                        let mut report = LayerReport::measure(pair, &w_hat)?;
                        report.granularity = granularity.tag();
                        Ok(report)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mean_alpha = searched.iter().map(|(o, _)| o.alpha).sum::<f64>()
                    / searched.len().max(1) as f64;
                BenchRow {
                    strategy: strategy.name().to_string(),
                    mean_alpha,
                    aggregate: Aggregate::from_layers(&reports),
                }
            }
        };
        rows.push(row);
    }
    Ok(BenchReport { spec: *spec, rows })
}

fn measure_at(pair: &LayerPair, granularity: Granularity, alpha: f64) -> Result<LayerReport> {
    let w_hat = quant::quant_dequant(&pair.post, granularity, alpha)?;
    let mut report = LayerReport::measure(pair, &w_hat)?;
    report.granularity = granularity.tag();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            layers: 2,
            rows: 32,
            cols: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_pairs(&small_spec()).unwrap();
        let b = generate_pairs(&small_spec()).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.base.data(), y.base.data());
            assert_eq!(x.post.data(), y.post.data());
        }
        let other = generate_pairs(&SynthSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a[0].base.data(), other[0].base.data());
    }

    #[test]
    fn deltas_have_the_requested_scale() {
        let pairs = generate_pairs(&small_spec()).unwrap();
        let pair = &pairs[0];
        let delta = pair.delta();
        let rms = (delta.iter().map(|d| d * d).sum::<f64>() / delta.len() as f64).sqrt();
        assert!((0.005..0.02).contains(&rms), "delta rms {rms}");
        let base_rms =
            (pair.base.data().iter().map(|b| b * b).sum::<f64>() / delta.len() as f64).sqrt();
        assert!((0.8..1.2).contains(&base_rms), "base rms {base_rms}");
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::all() {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fastest".parse::<Strategy>().is_err());
    }

    #[test]
    fn bench_renders_identically_across_runs_and_workers() {
        let spec = small_spec();
        let grid = ScaleGrid {
            n_coarse: 3,
            n_fine: 4,
            ..ScaleGrid::default()
        };
        let g = Granularity::Block { rows: 16, cols: 16 };
        let one = run_bench(&spec, grid, g, &Strategy::all(), Some(1)).unwrap();
        let four = run_bench(&spec, grid, g, &Strategy::all(), Some(4)).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.render(), four.render());
        assert_eq!(one.rows.len(), 4);
        assert_eq!(one.rows[0].strategy, "absmax");
    }

    #[test]
    fn search_strategies_beat_absmax_on_sign_preservation() {
        let report = run_bench(
            &small_spec(),
            ScaleGrid::default(),
            Granularity::Block { rows: 16, cols: 16 },
            &[Strategy::Absmax, Strategy::Search(MetricKind::SignRate)],
            None,
        )
        .unwrap();
        let absmax = &report.rows[0].aggregate;
        let searched = &report.rows[1].aggregate;
        assert!(
            searched.sign_rate > absmax.sign_rate,
            "search {} vs absmax {}",
            searched.sign_rate,
            absmax.sign_rate
        );
    }
}
