//! Scale-grouped FP8 quantization.
//!
//! A tensor is split into scale groups: the whole tensor, one group per
//! output row, or 2-D blocks (default 128x128, edge blocks may be
//! smaller). Each group gets a scale `s = alpha * absmax / 448`, elements
//! are stored as FP8 codes of `w / s`, and the inverse scale `1/s` is kept
//! in f32 alongside the codes.
//!
//! Dequantization is `decode(code) / scale_inv` with the division in f64.
//! Both the in-memory path and a file reload perform exactly this division
//! on exactly these f32 inverse scales, so the two reconstructions are
//! bit-identical. Groups whose absmax is zero pin the scale to 1 so that
//! all-zero data stores all-zero codes with inverse scale 1.

use crate::error::{Error, Result};
use crate::fp8;
use crate::tensor::Tensor;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

pub const DEFAULT_BLOCK: usize = 128;

/// How scales are shared across a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One scale for the whole tensor.
    PerTensor,
    /// One scale per index along axis 0 (output rows for weight matrices).
    /// Requires rank >= 1.
    PerChannel,
    /// One scale per `rows x cols` tile of a 2-D tensor. Edge tiles are
    /// clipped to the tensor bounds.
    Block { rows: usize, cols: usize },
}

impl Default for Granularity {
    fn default() -> Self {
        Granularity::Block {
            rows: DEFAULT_BLOCK,
            cols: DEFAULT_BLOCK,
        }
    }
}

impl Granularity {
    /// Short stable tag, also used in container metadata.
    pub fn tag(&self) -> String {
        match self {
            Granularity::PerTensor => "tensor".to_string(),
            Granularity::PerChannel => "channel".to_string(),
            Granularity::Block { rows, cols } => format!("block:{rows}x{cols}"),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    /// Accepts `tensor`, `channel`, `block` (128x128) or `block:RxC`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown granularity {s:?}"));
        match s {
            "tensor" => Ok(Granularity::PerTensor),
            "channel" => Ok(Granularity::PerChannel),
            "block" => Ok(Granularity::default()),
            _ => {
                let dims = s.strip_prefix("block:").ok_or_else(bad)?;
                let (r, c) = dims.split_once('x').ok_or_else(bad)?;
                let rows = r.parse::<usize>().map_err(|_| bad())?;
                let cols = c.parse::<usize>().map_err(|_| bad())?;
                if rows == 0 || cols == 0 {
                    return Err(Error::InvalidConfig(
                        "block dimensions must be nonzero".to_string(),
                    ));
                }
                Ok(Granularity::Block { rows, cols })
            }
        }
    }
}

/// Flat-buffer segments making up each scale group. Tensor and channel
/// groups are one contiguous run; a block contributes one run per row it
/// covers.
#[derive(Debug, Clone)]
pub struct GroupLayout {
    groups: Vec<Vec<Range<usize>>>,
    scale_shape: Vec<usize>,
}

impl GroupLayout {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<Range<usize>>] {
        &self.groups
    }

    /// Shape of the companion scale tensor: `[1]`, `[rows]` or
    /// `[row_blocks, col_blocks]`.
    pub fn scale_shape(&self) -> &[usize] {
        &self.scale_shape
    }
}

pub fn group_layout(shape: &[usize], granularity: Granularity) -> Result<GroupLayout> {
    let len: usize = shape.iter().product();
    if len == 0 {
        return Err(Error::Shape(format!(
            "cannot group an empty tensor of shape {shape:?}"
        )));
    }
    match granularity {
        Granularity::PerTensor => Ok(GroupLayout {
            groups: vec![vec![0..len]],
            scale_shape: vec![1],
        }),
        Granularity::PerChannel => {
            if shape.is_empty() {
                return Err(Error::Shape(
                    "per-channel grouping needs rank >= 1".to_string(),
                ));
            }
            let stride = len / shape[0];
            let groups = (0..shape[0])
                .map(|i| vec![i * stride..(i + 1) * stride])
                .collect();
            Ok(GroupLayout {
                groups,
                scale_shape: vec![shape[0]],
            })
        }
        Granularity::Block { rows, cols } => {
            if shape.len() != 2 {
                return Err(Error::Shape(format!(
                    "block grouping needs a 2-D tensor, got shape {shape:?}"
                )));
            }
            if rows == 0 || cols == 0 {
                return Err(Error::InvalidConfig(
                    "block dimensions must be nonzero".to_string(),
                ));
            }
            let (n_rows, n_cols) = (shape[0], shape[1]);
            let row_blocks = n_rows.div_ceil(rows);
            let col_blocks = n_cols.div_ceil(cols);
            let mut groups = Vec::with_capacity(row_blocks * col_blocks);
            for bi in 0..row_blocks {
                for bj in 0..col_blocks {
                    let r_end = ((bi + 1) * rows).min(n_rows);
                    let c_lo = bj * cols;
                    let c_end = ((bj + 1) * cols).min(n_cols);
                    groups.push(
                        (bi * rows..r_end)
                            .map(|r| r * n_cols + c_lo..r * n_cols + c_end)
                            .collect(),
                    );
                }
            }
            Ok(GroupLayout {
                groups,
                scale_shape: vec![row_blocks, col_blocks],
            })
        }
    }
}

/// Default scale numerators: group absmax / 448. All-zero groups report
/// 0.0; [`effective_scale`] pins those to 1.
pub fn default_scales(tensor: &Tensor, layout: &GroupLayout) -> Vec<f64> {
    let data = tensor.data();
    layout
        .groups()
        .iter()
        .map(|segments| {
            let absmax = segments
                .iter()
                .flat_map(|seg| &data[seg.clone()])
                .fold(0.0f64, |acc, &v| acc.max(v.abs()));
            absmax / fp8::MAX_FINITE
        })
        .collect()
}

/// Scale applied for a given alpha. Zero-absmax groups always use 1.0,
/// independent of alpha.
pub fn effective_scale(alpha: f64, s0: f64) -> f64 {
    if s0 == 0.0 {
        1.0
    } else {
        alpha * s0
    }
}

/// FP8 codes plus per-group inverse scales for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub shape: Vec<usize>,
    pub granularity: Granularity,
    pub codes: Vec<u8>,
    pub scale_inv: Vec<f32>,
}

impl QuantizedLayer {
    pub fn scale_shape(&self) -> Result<Vec<usize>> {
        Ok(group_layout(&self.shape, self.granularity)?
            .scale_shape()
            .to_vec())
    }

    /// Reconstructs the tensor as `decode(code) / scale_inv` in f64. This
    /// is the canonical reconstruction; metric code must go through it.
    pub fn dequantize(&self) -> Result<Tensor> {
        let layout = group_layout(&self.shape, self.granularity)?;
        if self.scale_inv.len() != layout.group_count() {
            return Err(Error::Shape(format!(
                "expected {} inverse scales, got {}",
                layout.group_count(),
                self.scale_inv.len()
            )));
        }
        let len: usize = self.shape.iter().product();
        if self.codes.len() != len {
            return Err(Error::Shape(format!(
                "expected {} codes for shape {:?}, got {}",
                len,
                self.shape,
                self.codes.len()
            )));
        }
        let mut out = vec![0.0f64; len];
        for (segments, &inv) in layout.groups().iter().zip(&self.scale_inv) {
            if !inv.is_finite() || inv <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "inverse scale {inv} is not a positive finite number"
                )));
            }
            let inv = inv as f64;
            for seg in segments {
                for i in seg.clone() {
                    let code = self.codes[i];
                    if fp8::is_nan_code(code) {
                        return Err(Error::InvalidValue(format!(
                            "NaN fp8 code {code:#04x} at flat index {i}"
                        )));
                    }
                    out[i] = fp8::decode(code) / inv;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// Grouping and default scales precomputed once per tensor so a scale
/// search can re-quantize with many alphas cheaply.
pub struct PreparedQuant<'a> {
    tensor: &'a Tensor,
    granularity: Granularity,
    layout: GroupLayout,
    s0: Vec<f64>,
}

pub fn prepare(tensor: &Tensor, granularity: Granularity) -> Result<PreparedQuant<'_>> {
    let layout = group_layout(tensor.shape(), granularity)?;
    let s0 = default_scales(tensor, &layout);
    Ok(PreparedQuant {
        tensor,
        granularity,
        layout,
        s0,
    })
}

/// Like [`prepare`], but with caller-provided scale numerators instead of
/// freshly computed absmax ones. Lets a reconstruction be re-quantized
/// with the scales of the original tensor, which is what makes the
/// quantize-dequantize operator idempotent.
pub fn prepare_with_scales(
    tensor: &Tensor,
    granularity: Granularity,
    s0: Vec<f64>,
) -> Result<PreparedQuant<'_>> {
    let layout = group_layout(tensor.shape(), granularity)?;
    if s0.len() != layout.group_count() {
        return Err(Error::Shape(format!(
            "{} scales for {} groups",
            s0.len(),
            layout.group_count()
        )));
    }
    if let Some(bad) = s0.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidValue(format!(
            "scale numerator {bad} is not a nonnegative finite number"
        )));
    }
    Ok(PreparedQuant {
        tensor,
        granularity,
        layout,
        s0,
    })
}

impl PreparedQuant<'_> {
    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    /// Per-group scale numerators (absmax / 448, zero for all-zero groups).
    pub fn scales(&self) -> &[f64] {
        &self.s0
    }

    pub fn quantize(&self, alpha: f64) -> Result<QuantizedLayer> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        let data = self.tensor.data();
        let mut codes = vec![0u8; data.len()];
        let mut scale_inv = Vec::with_capacity(self.layout.group_count());
        for (segments, &s0) in self.layout.groups().iter().zip(&self.s0) {
            let scale = effective_scale(alpha, s0);
            let inv = (1.0 / scale) as f32;
            if !inv.is_finite() || inv <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "group scale {scale} has no usable f32 inverse"
                )));
            }
            for seg in segments {
                for i in seg.clone() {
                    codes[i] = fp8::encode(data[i] / scale)?;
                }
            }
            scale_inv.push(inv);
        }
        Ok(QuantizedLayer {
            shape: self.tensor.shape().to_vec(),
            granularity: self.granularity,
            codes,
            scale_inv,
        })
    }

    /// Quantize-dequantize in one step: exactly `quantize` followed by
    /// [`QuantizedLayer::dequantize`], never a shortcut, so search-time
    /// metrics match what a reader of the written file recomputes.
    pub fn quant_dequant(&self, alpha: f64) -> Result<Tensor> {
        self.quantize(alpha)?.dequantize()
    }
}

pub fn quantize(tensor: &Tensor, granularity: Granularity, alpha: f64) -> Result<QuantizedLayer> {
    prepare(tensor, granularity)?.quantize(alpha)
}

pub fn quant_dequant(tensor: &Tensor, granularity: Granularity, alpha: f64) -> Result<Tensor> {
    prepare(tensor, granularity)?.quant_dequant(alpha)
}
