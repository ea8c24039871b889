//! Delta-aware FP8 quantization for fine-tuned model checkpoints.
//!
//! Quantizing a fine-tuned model with plain absmax scaling can destroy much
//! of the small weight delta that fine-tuning added on top of the base
//! model. The routines here score candidate scales by how well that delta
//! survives quantization (sign agreement, cosine similarity, or negated
//! MSE), pick the best scale per layer with a coarse-to-fine grid search,
//! and store the result as FP8 codes plus per-group inverse scales in a
//! safetensors-compatible container.

pub mod checkpoint;
pub mod container;
pub mod error;
pub mod fp8;
pub mod metrics;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod search;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
