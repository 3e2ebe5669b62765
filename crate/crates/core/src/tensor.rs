//! Dense 64-bit real tensors in row-major order.
//!
//! The graph operates on rank-1/rank-2 tensors; higher ranks are legal
//! containers (parameters, checkpoints) but the compute ops reject them.

use crate::error::{Error, Result};

/// A dense tensor: shape plus a flat row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == values.len()`.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Input(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
        }
    }

    /// A 1x1 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![v],
        }
    }

    /// A 1xN row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            values,
        }
    }

    /// A MxN matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Input(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a 1-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::Input(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += other * factor` (element count must match).
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Input(format!(
                "add_scaled shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * factor;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// Canonical byte serialization: rank, dims, then little-endian f64 values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.shape.len() * 8 + self.values.len() * 8);
        out.extend((self.shape.len() as u64).to_le_bytes());
        for d in &self.shape {
            out.extend((*d as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }
}

/// Hex-encoded SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(3.5);
        assert!(t.is_scalar());
        assert_eq!(t.scalar_value().unwrap(), 3.5);
    }

    #[test]
    fn byte_serialization_is_stable() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        assert_eq!(t.to_le_bytes(), t.clone().to_le_bytes());
        let u = Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap();
        assert_ne!(t.to_le_bytes(), u.to_le_bytes());
    }

    #[test]
    fn sha256_hex_known_value() {
        // Empty-input SHA-256 is a published constant.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
