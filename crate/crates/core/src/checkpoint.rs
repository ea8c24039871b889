//! Checkpoint-level IO: shard discovery, base/fine-tune pairing, the
//! layer-selection policy, and reading/writing quantized checkpoints.
//!
//! A checkpoint path may be a single `.safetensors` file, a sharded-index
//! JSON (`{"weight_map": {tensor: shard_file}}`, Hugging Face style), or a
//! directory containing either. Output is always a single file.
//!
//! A quantized checkpoint stores each selected tensor as FP8 codes under
//! its original name plus an F32 companion `<name>.scale_inv`, with the
//! group granularity and the chosen per-layer alpha recorded in
//! `__metadata__`. Tensors the policy skips are copied through unchanged.

use crate::container::{self, StoredTensor, TensorFile};
use crate::error::{Error, Result};
use crate::metrics::LayerPair;
use crate::quant::{self, Granularity, QuantizedLayer};
use crate::tensor::DType;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SCALE_SUFFIX: &str = ".scale_inv";
pub const GRANULARITY_KEY: &str = "quant.granularity";
pub const ALPHA_KEY_PREFIX: &str = "quant.alpha.";

/// Resolved list of shard files for one checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointManifest {
    shards: Vec<PathBuf>,
    /// Tensor-to-shard assignments when an index file was used; checked
    /// against the shard headers at load time.
    weight_map: BTreeMap<String, PathBuf>,
}

#[derive(Deserialize)]
struct ShardIndex {
    weight_map: BTreeMap<String, String>,
}

impl CheckpointManifest {
    /// Accepts a `.safetensors` file, an index JSON, or a directory
    /// holding either.
    pub fn discover(path: &Path) -> Result<Self> {
        if path.is_file() {
            match path.extension().and_then(|e| e.to_str()) {
                Some("json") => Self::from_index(path),
                _ => Ok(CheckpointManifest {
                    shards: vec![path.to_path_buf()],
                    weight_map: BTreeMap::new(),
                }),
            }
        } else if path.is_dir() {
            let mut indexes = Vec::new();
            let mut shards = Vec::new();
            for entry in std::fs::read_dir(path)? {
                let p = entry?.path();
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.ends_with(".safetensors.index.json") {
                    indexes.push(p);
                } else if name.ends_with(".safetensors") {
                    shards.push(p);
                }
            }
            if indexes.len() > 1 {
                return Err(Error::Manifest(format!(
                    "{} contains {} shard indexes, expected at most one",
                    path.display(),
                    indexes.len()
                )));
            }
            if let Some(index) = indexes.first() {
                return Self::from_index(index);
            }
            if shards.is_empty() {
                return Err(Error::Manifest(format!(
                    "{} contains no .safetensors files",
                    path.display()
                )));
            }
            shards.sort();
            Ok(CheckpointManifest {
                shards,
                weight_map: BTreeMap::new(),
            })
        } else {
            Err(Error::Manifest(format!(
                "{} is neither a file nor a directory",
                path.display()
            )))
        }
    }

    fn from_index(index_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(index_path)?;
        let index: ShardIndex = serde_json::from_str(&text).map_err(|e| {
            Error::Manifest(format!("{} is not a shard index: {e}", index_path.display()))
        })?;
        let dir = index_path.parent().unwrap_or(Path::new("."));
        let mut weight_map = BTreeMap::new();
        let mut shards = Vec::new();
        for (tensor, shard) in index.weight_map {
            let resolved = dir.join(&shard);
            if !shards.contains(&resolved) {
                shards.push(resolved.clone());
            }
            weight_map.insert(tensor, resolved);
        }
        if shards.is_empty() {
            return Err(Error::Manifest(format!(
                "{} has an empty weight_map",
                index_path.display()
            )));
        }
        shards.sort();
        Ok(CheckpointManifest { shards, weight_map })
    }

    pub fn shards(&self) -> &[PathBuf] {
        &self.shards
    }

    /// Reads every shard and merges them. Duplicate tensor names across
    /// shards and index entries pointing at the wrong shard are errors.
    pub fn load(&self) -> Result<LoadedCheckpoint> {
        let mut merged = TensorFile::default();
        let mut homes: BTreeMap<String, PathBuf> = BTreeMap::new();
        for shard in &self.shards {
            let file = container::read_file(shard)?;
            for (key, value) in file.metadata {
                merged.metadata.entry(key).or_insert(value);
            }
            for (name, tensor) in file.tensors {
                if let Some(previous) = homes.get(&name) {
                    return Err(Error::Manifest(format!(
                        "tensor {name:?} appears in both {} and {}",
                        previous.display(),
                        shard.display()
                    )));
                }
                homes.insert(name.clone(), shard.clone());
                merged.tensors.insert(name, tensor);
            }
        }
        for (tensor, expected) in &self.weight_map {
            match homes.get(tensor) {
                Some(actual) if actual == expected => {}
                Some(actual) => {
                    return Err(Error::Manifest(format!(
                        "index places {tensor:?} in {}, found it in {}",
                        expected.display(),
                        actual.display()
                    )))
                }
                None => {
                    return Err(Error::Manifest(format!(
                        "index lists {tensor:?} but no shard contains it"
                    )))
                }
            }
        }
        Ok(LoadedCheckpoint { file: merged })
    }
}

/// All tensors of a checkpoint merged into one map.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub file: TensorFile,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    CheckpointManifest::discover(path)?.load()
}

/// Minimal glob matching: `*` spans any substring, `?` one character,
/// everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut backtrack: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            backtrack = Some((pi, ti));
            pi += 1;
        } else if let Some((star_pi, star_ti)) = backtrack {
            backtrack = Some((star_pi, star_ti + 1));
            pi = star_pi + 1;
            ti = star_ti + 1;
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Selects which tensors get quantized. A tensor qualifies when its name
/// matches an include pattern, matches no exclude pattern, and its shape
/// clears the rank and element floors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct QuantPolicy {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub min_rank: usize,
    pub min_elements: usize,
}

impl Default for QuantPolicy {
    /// Quantize every tensor that looks like a weight matrix, but leave
    /// embeddings and output heads alone: both are especially
    /// quantization-sensitive and small relative to the model.
    fn default() -> Self {
        QuantPolicy {
            include: vec!["*".to_string()],
            exclude: vec!["*embed*".to_string(), "*lm_head*".to_string()],
            min_rank: 2,
            min_elements: 4096,
        }
    }
}

impl QuantPolicy {
    /// A policy that quantizes everything with rank >= 1; handy in tests
    /// and synthetic benchmarks.
    pub fn everything() -> Self {
        QuantPolicy {
            include: vec!["*".to_string()],
            exclude: Vec::new(),
            min_rank: 1,
            min_elements: 1,
        }
    }

    pub fn matches(&self, name: &str, shape: &[usize]) -> bool {
        let elements: usize = shape.iter().product();
        shape.len() >= self.min_rank
            && elements >= self.min_elements
            && self.include.iter().any(|p| glob_match(p, name))
            && !self.exclude.iter().any(|p| glob_match(p, name))
    }
}

/// Result of pairing two checkpoints under a policy: layers to quantize
/// plus everything else from the fine-tuned side, kept verbatim.
#[derive(Debug, Clone)]
pub struct PairedModel {
    pub pairs: Vec<LayerPair>,
    pub passthrough: Vec<(String, StoredTensor)>,
}

/// Walks the fine-tuned checkpoint in name order and pairs every
/// policy-selected tensor with its base counterpart. Missing or
/// shape-mismatched counterparts and non-float selected tensors are
/// errors; everything the policy skips is passed through.
pub fn pair_checkpoints(
    base: &LoadedCheckpoint,
    post: &LoadedCheckpoint,
    policy: &QuantPolicy,
) -> Result<PairedModel> {
    let mut pairs = Vec::new();
    let mut passthrough = Vec::new();
    for (name, tensor) in &post.file.tensors {
        if !policy.matches(name, &tensor.shape) {
            passthrough.push((name.clone(), tensor.clone()));
            continue;
        }
        if tensor.dtype == DType::F8E4M3 {
            return Err(Error::Pairing(format!(
                "tensor {name:?} is already fp8; refusing to re-quantize"
            )));
        }
        let base_tensor = base_counterpart(base, name)?;
        if base_tensor.shape != tensor.shape {
            return Err(Error::Pairing(format!(
                "tensor {name:?} has shape {:?} in the fine-tune but {:?} in the base",
                tensor.shape, base_tensor.shape
            )));
        }
        pairs.push(LayerPair::new(
            name.clone(),
            base_tensor.to_f64()?,
            tensor.to_f64()?,
        )?);
    }
    Ok(PairedModel { pairs, passthrough })
}

fn base_counterpart<'a>(base: &'a LoadedCheckpoint, name: &str) -> Result<&'a StoredTensor> {
    base.file.tensors.get(name).ok_or_else(|| {
        Error::Pairing(format!("tensor {name:?} has no counterpart in the base checkpoint"))
    })
}

/// Writes quantized layers, their inverse scales and the passthrough
/// tensors as a single container file.
pub fn write_quantized(
    path: &Path,
    quantized: &[(String, QuantizedLayer)],
    passthrough: &[(String, StoredTensor)],
    granularity: Granularity,
    alphas: &BTreeMap<String, f64>,
    extra_metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut file = TensorFile::default();
    file.metadata
        .insert(GRANULARITY_KEY.to_string(), granularity.tag());
    for (name, alpha) in alphas {
        // {alpha:?} prints the shortest string that parses back to the
        // same f64, so readers recover it exactly.
        file.metadata
            .insert(format!("{ALPHA_KEY_PREFIX}{name}"), format!("{alpha:?}"));
    }
    for (key, value) in extra_metadata {
        file.metadata.insert(key.clone(), value.clone());
    }

    let mut insert = |name: String, tensor: StoredTensor| -> Result<()> {
        if file.tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Manifest(format!(
                "tensor name {name:?} written twice"
            )));
        }
        Ok(())
    };
    for (name, layer) in quantized {
        let scales = StoredTensor {
            dtype: DType::F32,
            shape: layer.scale_shape()?,
            bytes: layer.scale_inv.iter().flat_map(|s| s.to_le_bytes()).collect(),
        };
        insert(
            name.clone(),
            StoredTensor::from_codes(layer.shape.clone(), layer.codes.clone()),
        )?;
        insert(format!("{name}{SCALE_SUFFIX}"), scales)?;
    }
    for (name, tensor) in passthrough {
        insert(name.clone(), tensor.clone())?;
    }
    container::write_file(path, &file)
}

/// A quantized checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct QuantizedCheckpoint {
    pub metadata: BTreeMap<String, String>,
    /// Quantized layers in name order.
    pub layers: Vec<(String, QuantizedLayer)>,
    /// Tensors that were stored unquantized.
    pub passthrough: Vec<(String, StoredTensor)>,
}

impl QuantizedCheckpoint {
    /// Alpha recorded for a layer at quantization time, if any.
    pub fn alpha_for(&self, name: &str) -> Option<f64> {
        self.metadata
            .get(&format!("{ALPHA_KEY_PREFIX}{name}"))
            .and_then(|s| s.parse().ok())
    }
}

pub fn read_quantized(path: &Path) -> Result<QuantizedCheckpoint> {
    let loaded = load_checkpoint(path)?;
    let metadata = loaded.file.metadata.clone();
    let declared: Option<Granularity> = metadata
        .get(GRANULARITY_KEY)
        .map(|tag| tag.parse())
        .transpose()?;

    let mut layers = Vec::new();
    let mut passthrough = Vec::new();
    let mut consumed_scales = Vec::new();
    for (name, tensor) in &loaded.file.tensors {
        if tensor.dtype != DType::F8E4M3 {
            continue;
        }
        let scale_name = format!("{name}{SCALE_SUFFIX}");
        let scales = loaded.file.tensors.get(&scale_name).ok_or_else(|| {
            Error::Format(format!("fp8 tensor {name:?} has no {scale_name:?} companion"))
        })?;
        let scale_inv = scales.f32_data()?;
        let granularity = match declared {
            Some(g) => g,
            None => infer_granularity(&tensor.shape, scale_inv.len()).ok_or_else(|| {
                Error::Format(format!(
                    "cannot infer scale granularity for {name:?}: shape {:?} with {} scales",
                    tensor.shape,
                    scale_inv.len()
                ))
            })?,
        };
        let layer = QuantizedLayer {
            shape: tensor.shape.clone(),
            granularity,
            codes: tensor.bytes.clone(),
            scale_inv,
        };
        // Cross-check scale count against the layout before handing the
        // layer out.
        let expected = quant::group_layout(&layer.shape, granularity)?.group_count();
        if layer.scale_inv.len() != expected {
            return Err(Error::Format(format!(
                "tensor {name:?}: {} scales but {} {granularity} groups",
                layer.scale_inv.len(),
                expected
            )));
        }
        consumed_scales.push(scale_name);
        layers.push((name.clone(), layer));
    }
    for (name, tensor) in &loaded.file.tensors {
        if tensor.dtype == DType::F8E4M3 || consumed_scales.contains(name) {
            continue;
        }
        passthrough.push((name.clone(), tensor.clone()));
    }
    Ok(QuantizedCheckpoint {
        metadata,
        layers,
        passthrough,
    })
}

/// Guesses the granularity of a foreign file from the scale count alone:
/// one scale is per-tensor, one per row is per-channel, and a count that
/// matches the default block grid is taken as 128x128 blocks.
fn infer_granularity(shape: &[usize], n_scales: usize) -> Option<Granularity> {
    if n_scales == 1 {
        return Some(Granularity::PerTensor);
    }
    if let Some(&rows) = shape.first() {
        if n_scales == rows {
            return Some(Granularity::PerChannel);
        }
    }
    if let [r, c] = shape {
        let b = quant::DEFAULT_BLOCK;
        if r.div_ceil(b) * c.div_ceil(b) == n_scales {
            return Some(Granularity::Block { rows: b, cols: b });
        }
    }
    None
}
