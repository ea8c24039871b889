//! In-memory tensors and the dtype tags used by the container format.
//!
//! All arithmetic in this crate runs in f64 regardless of the storage
//! dtype. F32 and BF16 widen losslessly, and f64 keeps scale and metric
//! computations deterministic and well clear of accumulation error.

use crate::error::{Error, Result};

/// Storage dtypes understood by the container reader and writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    BF16,
    F8E4M3,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::BF16 => "BF16",
            DType::F8E4M3 => "F8_E4M3",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "F32" => Some(DType::F32),
            "BF16" => Some(DType::BF16),
            "F8_E4M3" => Some(DType::F8E4M3),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::BF16 => 2,
            DType::F8E4M3 => 1,
        }
    }
}

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer length matches the shape
    /// product. A rank-0 shape holds exactly one element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Largest absolute value, ignoring nothing: the caller is expected to
    /// have rejected non-finite data at load time.
    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rank_zero_is_a_scalar() {
        let t = Tensor::new(vec![], vec![7.0]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.rank(), 0);
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn abs_max_ignores_sign() {
        let t = Tensor::new(vec![4], vec![1.0, -3.5, 2.0, 0.0]).unwrap();
        assert_eq!(t.abs_max(), 3.5);
    }

    #[test]
    fn dtype_names_roundtrip() {
        for d in [DType::F32, DType::BF16, DType::F8E4M3] {
            assert_eq!(DType::from_name(d.name()), Some(d));
        }
        assert_eq!(DType::from_name("F16"), None);
    }
}
