//! Per-layer and per-run reports.
//!
//! Every layer row carries both the human-facing numbers (MSE, sign rate,
//! cosine, delta L2) and the raw sums they were derived from (squared
//! error, match count, dot product, squared delta norms). The aggregate is
//! computed only from those sums, so a report consumer can rebuild it from
//! the rows, and layer rows from different runs can be pooled.

use crate::error::Result;
use crate::metrics::{self, DeltaPair, LayerPair};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Everything measured for one quantized layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub elements: usize,
    /// Scale grouping the layer was quantized under; "none" for tensors
    /// scored without quantization.
    pub granularity: String,
    /// Scale multiplier the layer was quantized with, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Objective value at alpha = 1 (plain absmax scaling).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_metric: Option<f64>,
    /// Objective value at the chosen alpha.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_metric: Option<f64>,
    /// True when the fine-tuned layer equals its base exactly.
    pub zero_delta: bool,

    pub mse: f64,
    pub sign_rate: f64,
    pub cos_sim: f64,
    pub delta_l2: f64,

    /// Sum of squared reconstruction error; `mse * elements` and
    /// `delta_l2^2` up to rounding.
    pub err_sq: f64,
    /// Number of positions whose delta sign survived.
    pub sign_matches: u64,
    /// Dot product of reconstructed and reference deltas.
    pub delta_dot: f64,
    /// Squared norm of the reference delta.
    pub ref_delta_sq: f64,
    /// Squared norm of the reconstructed delta.
    pub rec_delta_sq: f64,
}

impl LayerReport {
    /// Measures a reconstruction against its layer pair. Search-related
    /// fields start out empty.
    pub fn measure(pair: &LayerPair, w_hat: &Tensor) -> Result<Self> {
        let deltas = DeltaPair::new(pair, w_hat)?;
        let n = deltas.reference.len();

        let mut err_sq = 0.0f64;
        let mut delta_dot = 0.0f64;
        let mut ref_sq = 0.0f64;
        let mut rec_sq = 0.0f64;
        let mut sign_matches = 0u64;
        for (&rec, &reference) in deltas.reconstructed.iter().zip(&deltas.reference) {
            let err = rec - reference;
            err_sq += err * err;
            delta_dot += rec * reference;
            ref_sq += reference * reference;
            rec_sq += rec * rec;
            if sign_of(rec) == sign_of(reference) {
                sign_matches += 1;
            }
        }

        Ok(LayerReport {
            name: pair.name.clone(),
            elements: n,
            granularity: "none".to_string(),
            alpha: None,
            baseline_metric: None,
            best_metric: None,
            zero_delta: pair.is_zero_delta(),
            mse: if n == 0 { 0.0 } else { err_sq / n as f64 },
            sign_rate: if n == 0 {
                1.0
            } else {
                sign_matches as f64 / n as f64
            },
            cos_sim: metrics::cos_from_sums(delta_dot, ref_sq, rec_sq),
            delta_l2: err_sq.sqrt(),
            err_sq,
            sign_matches,
            delta_dot,
            ref_delta_sq: ref_sq,
            rec_delta_sq: rec_sq,
        })
    }
}

fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Pooled metrics over a set of layer rows, derived purely from the raw
/// sums in those rows. An empty set degenerates the same way the metric
/// conventions do: perfect sign rate and cosine, zero error.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub layers: usize,
    pub elements: usize,
    pub mse: f64,
    pub sign_rate: f64,
    pub cos_sim: f64,
    pub delta_l2: f64,
}

impl Aggregate {
    pub fn from_layers(layers: &[LayerReport]) -> Self {
        let elements: usize = layers.iter().map(|l| l.elements).sum();
        let err_sq: f64 = layers.iter().map(|l| l.err_sq).sum();
        let matches: u64 = layers.iter().map(|l| l.sign_matches).sum();
        let dot: f64 = layers.iter().map(|l| l.delta_dot).sum();
        let ref_sq: f64 = layers.iter().map(|l| l.ref_delta_sq).sum();
        let rec_sq: f64 = layers.iter().map(|l| l.rec_delta_sq).sum();
        Aggregate {
            layers: layers.len(),
            elements,
            mse: if elements == 0 {
                0.0
            } else {
                err_sq / elements as f64
            },
            sign_rate: if elements == 0 {
                1.0
            } else {
                matches as f64 / elements as f64
            },
            cos_sim: metrics::cos_from_sums(dot, ref_sq, rec_sq),
            delta_l2: err_sq.sqrt(),
        }
    }
}

/// Grid parameters echoed into a report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSummary {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
}

/// Full result of a quantize or evaluate run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub command: String,
    pub metric: String,
    pub granularity: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSummary>,
    pub layers: Vec<LayerReport>,
    pub aggregate: Aggregate,
    /// Wall-clock time of the run. Excluded from any output that is
    /// compared byte-for-byte across runs.
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain aligned text table, one row per layer plus a total row.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<[String; 7]> = vec![[
            "layer".into(),
            "elements".into(),
            "alpha".into(),
            "mse".into(),
            "sign".into(),
            "cosine".into(),
            "delta_l2".into(),
        ]];
        for l in &self.layers {
            rows.push([
                l.name.clone(),
                l.elements.to_string(),
                l.alpha.map_or("-".to_string(), |a| format!("{a:.4}")),
                format!("{:.4e}", l.mse),
                format!("{:.2}%", l.sign_rate * 100.0),
                format!("{:.6}", l.cos_sim),
                format!("{:.4e}", l.delta_l2),
            ]);
        }
        let agg = &self.aggregate;
        rows.push([
            format!("total ({} layers)", agg.layers),
            agg.elements.to_string(),
            "-".to_string(),
            format!("{:.4e}", agg.mse),
            format!("{:.2}%", agg.sign_rate * 100.0),
            format!("{:.6}", agg.cos_sim),
            format!("{:.4e}", agg.delta_l2),
        ]);

        let mut widths = [0usize; 7];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if j > 0 {
                    out.push_str("  ");
                }
                if j == 0 {
                    let _ = write!(out, "{:<width$}", cell, width = widths[j]);
                } else {
                    let _ = write!(out, "{:>width$}", cell, width = widths[j]);
                }
            }
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    /// One CSV row per layer.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record([
            "name",
            "elements",
            "granularity",
            "alpha",
            "baseline_metric",
            "best_metric",
            "zero_delta",
            "mse",
            "sign_rate",
            "cos_sim",
            "delta_l2",
        ])
        .map_err(csv_err)?;
        for l in &self.layers {
            csv.write_record([
                l.name.clone(),
                l.elements.to_string(),
                l.granularity.clone(),
                l.alpha.map_or(String::new(), |v| format!("{v}")),
                l.baseline_metric.map_or(String::new(), |v| format!("{v}")),
                l.best_metric.map_or(String::new(), |v| format!("{v}")),
                l.zero_delta.to_string(),
                format!("{}", l.mse),
                format!("{}", l.sign_rate),
                format!("{}", l.cos_sim),
                format!("{}", l.delta_l2),
            ])
            .map_err(csv_err)?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{cos_sim, l2_distance, mse, sign_rate};
    use proptest::prelude::*;

    fn random_report(seed: u64, layers: usize) -> (Vec<LayerReport>, Vec<(Vec<f64>, Vec<f64>)>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut reports = Vec::new();
        let mut deltas = Vec::new();
        for k in 0..layers {
            let n = rng.gen_range(1..40);
            let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let post: Vec<f64> = base.iter().map(|b| b + rng.gen_range(-0.1..0.1)).collect();
            let what: Vec<f64> = post.iter().map(|p| p + rng.gen_range(-0.01..0.01)).collect();
            let pair = LayerPair::new(
                format!("l{k}"),
                Tensor::new(vec![n], base.clone()).unwrap(),
                Tensor::new(vec![n], post.clone()).unwrap(),
            )
            .unwrap();
            let w_hat = Tensor::new(vec![n], what.clone()).unwrap();
            reports.push(LayerReport::measure(&pair, &w_hat).unwrap());
            let d_ref: Vec<f64> = post.iter().zip(&base).map(|(p, b)| p - b).collect();
            let d_rec: Vec<f64> = what.iter().zip(&base).map(|(w, b)| w - b).collect();
            deltas.push((d_rec, d_ref));
        }
        (reports, deltas)
    }

    #[test]
    fn layer_measurements_match_metric_functions() {
        let (reports, deltas) = random_report(7, 5);
        for (report, (d_rec, d_ref)) in reports.iter().zip(&deltas) {
            assert_eq!(report.sign_rate, sign_rate(d_rec, d_ref));
            assert!((report.cos_sim - cos_sim(d_rec, d_ref)).abs() < 1e-12);
            assert!((report.mse - mse(d_rec, d_ref)).abs() < 1e-15);
            assert!((report.delta_l2 - l2_distance(d_rec, d_ref)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_pooled_recomputation() {
        let (reports, deltas) = random_report(13, 6);
        let agg = Aggregate::from_layers(&reports);

        let all_rec: Vec<f64> = deltas.iter().flat_map(|d| d.0.clone()).collect();
        let all_ref: Vec<f64> = deltas.iter().flat_map(|d| d.1.clone()).collect();
        assert_eq!(agg.elements, all_ref.len());
        assert!((agg.mse - mse(&all_rec, &all_ref)).abs() < 1e-12);
        assert_eq!(agg.sign_rate, sign_rate(&all_rec, &all_ref));
        assert!((agg.cos_sim - cos_sim(&all_rec, &all_ref)).abs() < 1e-12);
        assert!((agg.delta_l2 - l2_distance(&all_rec, &all_ref)).abs() < 1e-9);
    }

    #[test]
    fn empty_aggregate_uses_degenerate_conventions() {
        let agg = Aggregate::from_layers(&[]);
        assert_eq!(agg.mse, 0.0);
        assert_eq!(agg.sign_rate, 1.0);
        assert_eq!(agg.cos_sim, 1.0);
        assert_eq!(agg.delta_l2, 0.0);
    }

    #[test]
    fn json_roundtrip_and_table_shape() {
        let (reports, _) = random_report(3, 2);
        let report = RunReport {
            command: "quantize".into(),
            metric: "sign".into(),
            granularity: "block:128x128".into(),
            grid: Some(GridSummary {
                alpha_min: 0.8,
                alpha_max: 1.25,
                n_coarse: 5,
                n_fine: 10,
            }),
            aggregate: Aggregate::from_layers(&reports),
            layers: reports,
            wall_seconds: 0.0,
        };
        let parsed: RunReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed, report);

        let table = report.render_table();
        // header + rule + 2 layers + total
        assert_eq!(table.lines().count(), 5);
        assert!(table.contains('%'));

        let mut csv_bytes = Vec::new();
        report.write_csv(&mut csv_bytes).unwrap();
        let csv_text = String::from_utf8(csv_bytes).unwrap();
        assert_eq!(csv_text.lines().count(), 3);
        assert!(csv_text.starts_with("name,elements,granularity,alpha"));
    }

    proptest! {
        /// Pooling layer rows through the aggregate equals recomputing
        /// the metrics over the concatenated deltas.
        #[test]
        fn aggregate_is_recomputable(seed in 0u64..500, layers in 1usize..8) {
            let (reports, deltas) = random_report(seed, layers);
            let agg = Aggregate::from_layers(&reports);
            let all_rec: Vec<f64> = deltas.iter().flat_map(|d| d.0.clone()).collect();
            let all_ref: Vec<f64> = deltas.iter().flat_map(|d| d.1.clone()).collect();
            prop_assert_eq!(agg.sign_rate, sign_rate(&all_rec, &all_ref));
            prop_assert!((agg.mse - mse(&all_rec, &all_ref)).abs() < 1e-12 * (1.0 + agg.mse));
            prop_assert!((agg.cos_sim - cos_sim(&all_rec, &all_ref)).abs() < 1e-10);
        }
    }
}
