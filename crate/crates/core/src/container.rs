//! Single-file tensor container, wire-compatible with safetensors.
//!
//! Layout: an 8-byte little-endian u64 header length, a JSON header, then
//! the packed little-endian payload. The header maps tensor names to
//! `{"dtype", "shape", "data_offsets"}` with offsets relative to the start
//! of the payload, plus an optional `"__metadata__"` string map.
//!
//! Writes are canonical: names are emitted in sorted order, payload
//! offsets are assigned in that same order, and the JSON is compact with
//! sorted keys. Writing the same logical content therefore produces
//! byte-identical files, which the tests rely on. Files are written to a
//! temporary sibling and renamed into place.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Guard against absurd header lengths in corrupt files.
const MAX_HEADER_BYTES: u64 = 100 << 20;

/// Raw little-endian tensor bytes plus their dtype and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Packs f64 working data down to a storage dtype. FP8 data cannot be
    /// produced this way because it needs scales; use the quantizer.
    pub fn from_f64(tensor: &Tensor, dtype: DType) -> Result<Self> {
        let bytes = match dtype {
            DType::F32 => tensor
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect(),
            DType::BF16 => tensor
                .data()
                .iter()
                .flat_map(|&v| f32_to_bf16_bits(v as f32).to_le_bytes())
                .collect(),
            DType::F8E4M3 => {
                return Err(Error::InvalidValue(
                    "raw fp8 tensors need inverse scales; quantize instead".to_string(),
                ))
            }
        };
        Ok(StoredTensor {
            dtype,
            shape: tensor.shape().to_vec(),
            bytes,
        })
    }

    /// Wraps raw FP8 codes produced by the quantizer.
    pub fn from_codes(shape: Vec<usize>, codes: Vec<u8>) -> Self {
        StoredTensor {
            dtype: DType::F8E4M3,
            shape,
            bytes: codes,
        }
    }

    /// Widens F32 or BF16 storage to f64 working data, exactly. FP8
    /// storage is rejected because codes are meaningless without their
    /// inverse scales.
    pub fn to_f64(&self) -> Result<Tensor> {
        let data: Vec<f64> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::BF16 => self
                .bytes
                .chunks_exact(2)
                .map(|c| bf16_bits_to_f32(u16::from_le_bytes(c.try_into().unwrap())) as f64)
                .collect(),
            DType::F8E4M3 => {
                return Err(Error::InvalidValue(
                    "fp8 tensors need their inverse scales to be decoded".to_string(),
                ))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn f32_data(&self) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::InvalidValue(format!(
                "expected F32 storage, got {}",
                self.dtype.name()
            )));
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Converts f32 to bf16 with round-to-nearest-even, preserving NaN.
pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        // Keep it a NaN: force the top mantissa bit.
        return ((bits >> 16) as u16) | 0x0040;
    }
    let round_bit = (bits >> 16) & 1;
    ((bits as u64 + 0x7fff + round_bit as u64) >> 16) as u16
}

pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// A parsed or to-be-written container: string metadata plus named
/// tensors. `BTreeMap` keeps both deterministically sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    let blob = fs::read(path)?;
    let whole = |reason: String| Error::Format(format!("{}: {reason}", path.display()));
    if blob.len() < 8 {
        return Err(whole("file too short for a header length".to_string()));
    }
    let header_len = u64::from_le_bytes(blob[..8].try_into().unwrap());
    if header_len > MAX_HEADER_BYTES || 8 + header_len as usize > blob.len() {
        return Err(whole(format!("header length {header_len} exceeds file size")));
    }
    let header = &blob[8..8 + header_len as usize];
    let payload = &blob[8 + header_len as usize..];

    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| whole(format!("header is not JSON: {e}")))?;

    let mut file = TensorFile::default();
    let mut ranges: Vec<(u64, u64, String)> = Vec::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            file.metadata = serde_json::from_value(value)
                .map_err(|e| whole(format!("__metadata__ is not a string map: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("tensor {name:?}: bad header entry: {e}")))?;
        let dtype = DType::from_name(&entry.dtype)
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: unknown dtype {:?}", entry.dtype)))?;
        let elements = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: shape overflows")))?;
        let [start, end] = entry.data_offsets;
        let expected = elements
            .checked_mul(dtype.byte_width())
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: size overflows")))?;
        if start > end || end as usize > payload.len() {
            return Err(Error::Format(format!(
                "tensor {name:?}: offsets [{start}, {end}] outside payload of {} bytes",
                payload.len()
            )));
        }
        if (end - start) as usize != expected {
            return Err(Error::Format(format!(
                "tensor {name:?}: shape {:?} as {} needs {expected} bytes, offsets give {}",
                entry.shape,
                dtype.name(),
                end - start
            )));
        }
        if start < end {
            ranges.push((start, end, name.clone()));
        }
        file.tensors.insert(
            name,
            StoredTensor {
                dtype,
                shape: entry.shape,
                bytes: payload[start as usize..end as usize].to_vec(),
            },
        );
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        let ((_, prev_end, prev_name), (next_start, _, next_name)) = (&pair[0], &pair[1]);
        if prev_end > next_start {
            return Err(Error::Format(format!(
                "tensors {prev_name:?} and {next_name:?} have overlapping payload ranges"
            )));
        }
    }
    Ok(file)
}

pub fn write_file(path: &Path, file: &TensorFile) -> Result<()> {
    let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    if !file.metadata.is_empty() {
        header.insert(
            "__metadata__".to_string(),
            serde_json::to_value(&file.metadata).expect("string map serializes"),
        );
    }

    let mut offset = 0u64;
    for (name, tensor) in &file.tensors {
        if name == "__metadata__" {
            return Err(Error::Format(
                "\"__metadata__\" is reserved and cannot name a tensor".to_string(),
            ));
        }
        let expected = tensor.element_count() * tensor.dtype.byte_width();
        if expected != tensor.bytes.len() {
            return Err(Error::Format(format!(
                "tensor {name:?}: shape {:?} as {} needs {expected} bytes, buffer has {}",
                tensor.shape,
                tensor.dtype.name(),
                tensor.bytes.len()
            )));
        }
        let end = offset + tensor.bytes.len() as u64;
        header.insert(
            name.clone(),
            serde_json::to_value(HeaderEntry {
                dtype: tensor.dtype.name().to_string(),
                shape: tensor.shape.clone(),
                data_offsets: [offset, end],
            })
            .expect("header entry serializes"),
        );
        offset = end;
    }

    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let tmp = path.with_extension("tmp-write");
    {
        let mut out = std::io::BufWriter::new(fs::File::create(&tmp)?);
        out.write_all(&(header_json.len() as u64).to_le_bytes())?;
        out.write_all(&header_json)?;
        for tensor in file.tensors.values() {
            out.write_all(&tensor.bytes)?;
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> TensorFile {
        let mut file = TensorFile::default();
        file.metadata.insert("key".into(), "value".into());
        file.tensors.insert(
            "b.weight".into(),
            StoredTensor::from_f64(
                &Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap(),
                DType::F32,
            )
            .unwrap(),
        );
        file.tensors.insert(
            "a.weight".into(),
            StoredTensor::from_f64(
                &Tensor::new(vec![3], vec![0.25, -1.0, 3.0]).unwrap(),
                DType::BF16,
            )
            .unwrap(),
        );
        file.tensors
            .insert("codes".into(), StoredTensor::from_codes(vec![4], vec![0, 1, 2, 0x7e]));
        file
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let file = sample();
        write_file(&path, &file).unwrap();
        let back = read_file(&path).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.st"), dir.path().join("b.st"));
        write_file(&p1, &sample()).unwrap();
        write_file(&p2, &sample()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // No temp files left behind.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn bf16_conversion_rounds_to_nearest_even() {
        assert_eq!(f32_to_bf16_bits(1.0), 0x3f80);
        // 1 + 2^-8 is halfway between bf16 neighbors; even mantissa wins.
        assert_eq!(f32_to_bf16_bits(1.00390625), 0x3f80);
        // 1 + 3 * 2^-8 is the next midpoint; rounds up to the even side.
        assert_eq!(f32_to_bf16_bits(1.01171875), 0x3f82);
        assert_eq!(bf16_bits_to_f32(0x3f80), 1.0);
        assert_eq!(f32_to_bf16_bits(-0.0).to_le_bytes(), [0x00, 0x80]);
        assert!(bf16_bits_to_f32(f32_to_bf16_bits(f32::NAN)).is_nan());
    }

    #[test]
    fn bf16_storage_widens_exactly() {
        let t = Tensor::new(vec![2], vec![1.5, -0.0078125]).unwrap();
        let stored = StoredTensor::from_f64(&t, DType::BF16).unwrap();
        assert_eq!(stored.to_f64().unwrap().data(), t.data());
    }

    #[test]
    fn truncated_and_corrupt_files_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.st");

        fs::write(&path, [1, 2, 3]).unwrap();
        assert!(matches!(read_file(&path), Err(Error::Format(_))));

        fs::write(&path, u64::MAX.to_le_bytes()).unwrap();
        assert!(matches!(read_file(&path), Err(Error::Format(_))));

        let mut blob = 2u64.to_le_bytes().to_vec();
        blob.extend_from_slice(b"{}extra");
        fs::write(&path, blob).unwrap();
        assert!(read_file(&path).unwrap().tensors.is_empty());
    }

    #[test]
    fn header_with_bad_offsets_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.st");
        let header = br#"{"w":{"dtype":"F32","shape":[4],"data_offsets":[0,99]}}"#;
        let mut blob = (header.len() as u64).to_le_bytes().to_vec();
        blob.extend_from_slice(header);
        blob.extend_from_slice(&[0u8; 16]);
        fs::write(&path, blob).unwrap();
        let err = read_file(&path).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn overlapping_payload_ranges_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.st");
        let header = br#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let mut blob = (header.len() as u64).to_le_bytes().to_vec();
        blob.extend_from_slice(header);
        blob.extend_from_slice(&[0u8; 12]);
        fs::write(&path, blob).unwrap();
        let err = read_file(&path).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn unknown_dtype_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.st");
        let header = br#"{"w":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut blob = (header.len() as u64).to_le_bytes().to_vec();
        blob.extend_from_slice(header);
        blob.extend_from_slice(&[0u8; 4]);
        fs::write(&path, blob).unwrap();
        assert!(read_file(&path).is_err());
    }

    #[test]
    fn header_may_be_padded_with_whitespace() {
        // Some writers pad the JSON with trailing spaces for alignment.
        let dir = tempdir().unwrap();
        let path = dir.path().join("padded.st");
        let header = b"{\"w\":{\"dtype\":\"F32\",\"shape\":[1],\"data_offsets\":[0,4]}}   ";
        let mut blob = (header.len() as u64).to_le_bytes().to_vec();
        blob.extend_from_slice(header);
        blob.extend_from_slice(&2.5f32.to_le_bytes());
        fs::write(&path, blob).unwrap();
        let file = read_file(&path).unwrap();
        assert_eq!(file.tensors["w"].to_f64().unwrap().data(), &[2.5]);
    }

    #[test]
    fn length_mismatch_on_write_errors() {
        let dir = tempdir().unwrap();
        let mut file = TensorFile::default();
        file.tensors.insert(
            "w".into(),
            StoredTensor {
                dtype: DType::F32,
                shape: vec![3],
                bytes: vec![0u8; 4],
            },
        );
        assert!(write_file(&dir.path().join("x.st"), &file).is_err());
    }
}
