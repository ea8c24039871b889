//! Coarse-to-fine grid search over the scale multiplier alpha.
//!
//! Every candidate scale is `alpha * absmax/448` per group. The search
//! first scores alpha = 1 (plain absmax scaling, which is also the
//! reported baseline), then a coarse linspace over the alpha range, then a
//! fine linspace centered on the coarse winner and clipped to the range.
//! Updates use a strict `>`, so on ties the earliest candidate wins and
//! alpha = 1 can never lose to an equally-good candidate.
//!
//! Layers whose fine-tune delta is exactly zero skip the grid stages:
//! nothing about the delta can be improved, so they keep alpha = 1 and are
//! flagged in the outcome.
//!
//! Layers are searched in parallel; candidates within a layer are scored
//! sequentially in grid order. Results are therefore independent of the
//! worker count.

use crate::error::{Error, Result};
use crate::metrics::{self, LayerPair, MetricKind};
use crate::quant::{self, Granularity, QuantizedLayer};
use rayon::prelude::*;
use std::collections::HashSet;

/// Alpha range and resolution for the two search stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleGrid {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Default for ScaleGrid {
    fn default() -> Self {
        ScaleGrid {
            alpha_min: 0.8,
            alpha_max: 1.25,
            n_coarse: 5,
            n_fine: 10,
        }
    }
}

impl ScaleGrid {
    pub fn new(alpha_min: f64, alpha_max: f64, n_coarse: usize, n_fine: usize) -> Result<Self> {
        let grid = ScaleGrid {
            alpha_min,
            alpha_max,
            n_coarse,
            n_fine,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min.is_finite() && self.alpha_max.is_finite()) || self.alpha_min <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha range [{}, {}] must be finite and positive",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.alpha_min > self.alpha_max {
            return Err(Error::InvalidConfig(format!(
                "alpha range [{}, {}] is inverted",
                self.alpha_min, self.alpha_max
            )));
        }
        if !(self.alpha_min <= 1.0 && 1.0 <= self.alpha_max) {
            return Err(Error::InvalidConfig(format!(
                "alpha range [{}, {}] must contain 1 so absmax scaling stays a candidate",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.n_coarse < 2 || self.n_fine < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid needs at least 2 points per stage, got {} coarse / {} fine",
                self.n_coarse, self.n_fine
            )));
        }
        Ok(())
    }

    /// Spacing of the coarse grid; also the default fine-stage half-width.
    pub fn coarse_step(&self) -> f64 {
        (self.alpha_max - self.alpha_min) / (self.n_coarse - 1) as f64
    }

    pub fn coarse(&self) -> Result<Vec<f64>> {
        linspace(self.alpha_min, self.alpha_max, self.n_coarse)
    }

    /// Fine grid of half-width `delta` (one coarse step when `None`)
    /// around a center, clipped to the alpha range.
    pub fn fine(&self, center: f64, delta: Option<f64>) -> Result<Vec<f64>> {
        let radius = delta.unwrap_or_else(|| self.coarse_step());
        linspace(
            (center - radius).max(self.alpha_min),
            (center + radius).min(self.alpha_max),
            self.n_fine,
        )
    }
}

/// Evenly spaced points with both endpoints exact; a single point yields
/// just `lo`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "linspace needs at least one point".to_string(),
        ));
    }
    if !(lo <= hi) {
        return Err(Error::InvalidConfig(format!(
            "linspace bounds [{lo}, {hi}] are inverted"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { hi } else { lo + i as f64 * step })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub grid: ScaleGrid,
    pub metric: MetricKind,
    pub granularity: Granularity,
    /// Fine-stage half-width; one coarse step when unset.
    pub delta: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            grid: ScaleGrid::default(),
            metric: MetricKind::SignRate,
            granularity: Granularity::default(),
            delta: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if let Some(d) = self.delta {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "fine half-width must be positive and finite, got {d}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of the search for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Winning scale multiplier.
    pub alpha: f64,
    /// Metric at the winning alpha.
    pub best_metric: f64,
    /// Metric at alpha = 1, i.e. plain absmax scaling.
    pub baseline_metric: f64,
    /// Every `(alpha, metric)` evaluation in order: the alpha = 1 probe,
    /// the coarse stage, then the fine stage. No deduplication. Zero-delta
    /// layers stop after the probe.
    pub trace: Vec<(f64, f64)>,
    /// True when the fine-tuned layer equals its base exactly.
    pub zero_delta: bool,
}

/// Runs the two-stage search for a single layer and quantizes it at the
/// winning alpha.
pub fn search_layer(
    pair: &LayerPair,
    config: &SearchConfig,
) -> Result<(SearchOutcome, QuantizedLayer)> {
    config.validate()?;
    let prepared = quant::prepare(&pair.post, config.granularity)?;
    let score = |alpha: f64| -> Result<f64> {
        let w_hat = prepared.quant_dequant(alpha)?;
        metrics::evaluate(config.metric, pair, &w_hat)
    };

    let baseline = score(1.0)?;
    let mut trace = Vec::with_capacity(1 + config.grid.n_coarse + config.grid.n_fine);
    trace.push((1.0, baseline));

    if pair.is_zero_delta() {
        let outcome = SearchOutcome {
            alpha: 1.0,
            best_metric: baseline,
            baseline_metric: baseline,
            trace,
            zero_delta: true,
        };
        let layer = prepared.quantize(1.0)?;
        return Ok((outcome, layer));
    }

    let mut best_alpha = 1.0;
    let mut best_metric = baseline;
    let run_stage = |alphas: Vec<f64>,
                         trace: &mut Vec<(f64, f64)>,
                         best_alpha: &mut f64,
                         best_metric: &mut f64|
     -> Result<()> {
        for alpha in alphas {
            let m = score(alpha)?;
            trace.push((alpha, m));
            if m > *best_metric {
                *best_alpha = alpha;
                *best_metric = m;
            }
        }
        Ok(())
    };
    run_stage(
        config.grid.coarse()?,
        &mut trace,
        &mut best_alpha,
        &mut best_metric,
    )?;
    run_stage(
        config.grid.fine(best_alpha, config.delta)?,
        &mut trace,
        &mut best_alpha,
        &mut best_metric,
    )?;

    let layer = prepared.quantize(best_alpha)?;
    Ok((
        SearchOutcome {
            alpha: best_alpha,
            best_metric,
            baseline_metric: baseline,
            trace,
            zero_delta: false,
        },
        layer,
    ))
}

/// Searches many layers in parallel. Output order matches input order and
/// the per-layer results are identical to sequential runs.
pub fn search_model(
    pairs: &[LayerPair],
    config: &SearchConfig,
) -> Result<Vec<(SearchOutcome, QuantizedLayer)>> {
    let mut seen = HashSet::new();
    for pair in pairs {
        if !seen.insert(pair.name.as_str()) {
            return Err(Error::Manifest(format!(
                "duplicate layer name {:?}",
                pair.name
            )));
        }
    }
    pairs
        .par_iter()
        .map(|pair| search_layer(pair, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair_from(base: Vec<f64>, post: Vec<f64>) -> LayerPair {
        let n = base.len();
        LayerPair::new(
            "w",
            Tensor::new(vec![n], base).unwrap(),
            Tensor::new(vec![n], post).unwrap(),
        )
        .unwrap()
    }

    fn per_tensor_config(grid: ScaleGrid, metric: MetricKind) -> SearchConfig {
        SearchConfig {
            grid,
            metric,
            granularity: Granularity::PerTensor,
            delta: None,
        }
    }

    #[test]
    fn linspace_examples() {
        assert_eq!(
            linspace(0.5, 2.0, 5).unwrap(),
            vec![0.5, 0.875, 1.25, 1.625, 2.0]
        );
        assert_eq!(linspace(1.0, 1.0, 3).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(linspace(0.0, 1.0, 2).unwrap(), vec![0.0, 1.0]);
        assert_eq!(linspace(0.7, 0.9, 1).unwrap(), vec![0.7]);
        assert!(linspace(2.0, 1.0, 3).is_err());
        assert!(linspace(0.0, 1.0, 0).is_err());
        let v = linspace(0.8, 1.25, 5).unwrap();
        assert_eq!((v[0], v[4]), (0.8, 1.25));
    }

    #[test]
    fn grid_validation_rejects_bad_ranges() {
        assert!(ScaleGrid::new(2.0, 0.5, 5, 10).is_err());
        assert!(ScaleGrid::new(0.0, 1.0, 5, 10).is_err());
        assert!(ScaleGrid::new(-1.0, 1.0, 5, 10).is_err());
        // Range must bracket alpha = 1.
        assert!(ScaleGrid::new(1.1, 2.0, 5, 10).is_err());
        assert!(ScaleGrid::new(0.5, 0.9, 5, 10).is_err());
        assert!(ScaleGrid::new(0.8, 1.25, 1, 10).is_err());
        assert!(ScaleGrid::new(0.8, 1.25, 5, 0).is_err());
        assert!(ScaleGrid::new(0.8, 1.25, 5, 10).is_ok());
        assert!(ScaleGrid::new(1.0, 1.0, 2, 2).is_ok());
    }

    #[test]
    fn bad_fine_width_is_rejected() {
        let pair = pair_from(vec![1.0, 2.0], vec![1.1, 2.2]);
        for delta in [0.0, -0.5, f64::NAN] {
            let config = SearchConfig {
                delta: Some(delta),
                granularity: Granularity::PerTensor,
                ..SearchConfig::default()
            };
            assert!(search_layer(&pair, &config).is_err(), "delta {delta}");
        }
    }

    #[test]
    fn trace_has_probe_plus_both_stages() {
        let pair = pair_from(vec![0.1, -0.4, 0.9], vec![0.12, -0.38, 0.95]);
        let config = per_tensor_config(ScaleGrid::default(), MetricKind::NegMse);
        let (outcome, _) = search_layer(&pair, &config).unwrap();
        assert_eq!(outcome.trace.len(), 1 + 5 + 10);
        assert_eq!(outcome.trace[0].0, 1.0);
        assert_eq!(outcome.trace[0].1, outcome.baseline_metric);
    }

    #[test]
    fn best_never_loses_to_baseline() {
        let pair = pair_from(
            (0..64).map(|i| (i as f64 * 0.37).sin()).collect(),
            (0..64).map(|i| (i as f64 * 0.37).sin() + 0.01).collect(),
        );
        for metric in [MetricKind::NegMse, MetricKind::SignRate, MetricKind::CosSim] {
            let config = per_tensor_config(ScaleGrid::default(), metric);
            let (outcome, layer) = search_layer(&pair, &config).unwrap();
            assert!(
                outcome.best_metric >= outcome.baseline_metric,
                "{metric}: {} < {}",
                outcome.best_metric,
                outcome.baseline_metric
            );
            let max_in_trace = outcome
                .trace
                .iter()
                .map(|&(_, m)| m)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(outcome.best_metric, max_in_trace);
            // The returned layer is the winner's quantization.
            let direct = quant::quantize(&pair.post, Granularity::PerTensor, outcome.alpha).unwrap();
            assert_eq!(layer, direct);
        }
    }

    #[test]
    fn zero_delta_layers_skip_the_grid() {
        let pair = pair_from(vec![0.31, -0.7, 0.123], vec![0.31, -0.7, 0.123]);
        let config = per_tensor_config(ScaleGrid::default(), MetricKind::SignRate);
        let (outcome, _) = search_layer(&pair, &config).unwrap();
        assert!(outcome.zero_delta);
        assert_eq!(outcome.alpha, 1.0);
        assert_eq!(outcome.trace.len(), 1);
        assert_eq!(outcome.best_metric, outcome.baseline_metric);
    }

    #[test]
    fn ties_keep_the_earliest_alpha() {
        // The fine-tuned values are exact fp8 values and absmax is 448, so
        // every candidate alpha = 1 evaluation reconstructs perfectly and
        // ties; with the degenerate [1, 1] grid all candidates tie and the
        // probe must stay the winner.
        let pair = pair_from(vec![448.0, -224.0, 112.0], vec![448.0, -224.0, 56.0]);
        let grid = ScaleGrid::new(1.0, 1.0, 2, 2).unwrap();
        let config = per_tensor_config(grid, MetricKind::SignRate);
        let (outcome, _) = search_layer(&pair, &config).unwrap();
        assert!(!outcome.zero_delta);
        assert_eq!(outcome.trace.len(), 5);
        assert_eq!(outcome.alpha, 1.0);
        assert_eq!(outcome.best_metric, 1.0);
        assert!(outcome.trace.iter().all(|&(a, m)| a == 1.0 && m == 1.0));
    }

    #[test]
    fn fine_stage_clips_to_range() {
        let pair = pair_from(
            (0..32).map(|i| 0.01 * i as f64).collect(),
            (0..32).map(|i| 0.01 * i as f64 + 0.005).collect(),
        );
        let config = per_tensor_config(ScaleGrid::default(), MetricKind::NegMse);
        let (outcome, _) = search_layer(&pair, &config).unwrap();
        for &(alpha, _) in &outcome.trace {
            assert!((0.8..=1.25).contains(&alpha), "alpha {alpha} out of range");
        }
        assert!(
            (0.8..=1.25).contains(&outcome.alpha),
            "alpha {} out of range",
            outcome.alpha
        );
    }

    #[test]
    fn explicit_fine_width_narrows_the_fine_stage() {
        let pair = pair_from(
            (0..32).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.1).collect(),
            (0..32)
                .map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.1 + 0.003)
                .collect(),
        );
        let config = SearchConfig {
            delta: Some(0.01),
            granularity: Granularity::PerTensor,
            metric: MetricKind::NegMse,
            ..SearchConfig::default()
        };
        let (outcome, _) = search_layer(&pair, &config).unwrap();
        // Fine candidates are the last n_fine trace entries; their spread
        // can be at most 2 * delta.
        let fine = &outcome.trace[1 + config.grid.n_coarse..];
        let lo = fine.iter().map(|&(a, _)| a).fold(f64::INFINITY, f64::min);
        let hi = fine
            .iter()
            .map(|&(a, _)| a)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo <= 0.02 + 1e-12, "spread {}", hi - lo);
    }

    #[test]
    fn model_search_preserves_layer_order() {
        let pairs: Vec<LayerPair> = (0..8)
            .map(|k| {
                let base: Vec<f64> = (0..16).map(|i| ((i + k) as f64 * 0.29).cos()).collect();
                let post: Vec<f64> = base.iter().map(|v| v + 0.02).collect();
                let mut p = pair_from(base, post);
                p.name = format!("layer{k}");
                p
            })
            .collect();
        let config = per_tensor_config(ScaleGrid::default(), MetricKind::CosSim);
        let sequential: Vec<(SearchOutcome, QuantizedLayer)> = pairs
            .iter()
            .map(|p| search_layer(p, &config).unwrap())
            .collect();
        let parallel = search_model(&pairs, &config).unwrap();
        assert_eq!(parallel.len(), sequential.len());
        for (a, b) in parallel.iter().zip(&sequential) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }

        // Permuting the input permutes the output, values unchanged.
        let mut reversed: Vec<LayerPair> = pairs.clone();
        reversed.reverse();
        let back = search_model(&reversed, &config).unwrap();
        for (a, b) in back.iter().zip(parallel.iter().rev()) {
            assert_eq!(a.0, b.0);
        }

        assert!(search_model(&[], &config).unwrap().is_empty());
    }

    #[test]
    fn duplicate_layer_names_are_rejected() {
        let p = pair_from(vec![1.0], vec![1.5]);
        let q = pair_from(vec![2.0], vec![2.5]);
        let config = per_tensor_config(ScaleGrid::default(), MetricKind::NegMse);
        assert!(matches!(
            search_model(&[p, q], &config),
            Err(Error::Manifest(_))
        ));
    }
}
