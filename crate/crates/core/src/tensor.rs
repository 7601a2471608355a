//! Dense row-major tensors.
//!
//! Deliberately minimal: owned contiguous storage, shape checks at
//! construction, and the handful of elementwise helpers the optimizer and
//! tests need. All heavy math lives in the autodiff ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Input(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Single element of a `[1]` tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() requires a one-element tensor");
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn min(&self) -> F {
        self.data.iter().fold(F::infinity(), |a, &b| a.min(b))
    }

    pub fn max(&self) -> F {
        self.data.iter().fold(F::neg_infinity(), |a, &b| a.max(b))
    }

    /// In-place `self += rhs`, shapes must match.
    pub fn add_assign(&mut self, rhs: &Tensor<F>) {
        assert_eq!(self.shape, rhs.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += *b;
        }
    }

    /// Exact byte image of the tensor payload, little-endian, for checksums.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * F::WIDTH as usize);
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }
}

/// Offset of `[n, c, y, x]` in a contiguous NCHW buffer.
#[inline]
pub fn nchw_index(c_total: usize, h: usize, w: usize, n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * c_total + c) * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_checks_count() {
        let t = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(t.clone().reshaped(vec![4]).is_ok());
        assert!(t.reshaped(vec![3]).is_err());
    }

    #[test]
    fn byte_image_is_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.5, -0.0]).unwrap();
        let bytes = t.to_le_bytes();
        assert_eq!(bytes.len(), 8);
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), 1.5);
        assert_eq!(bytes[4..8], (-0.0f32).to_le_bytes());
    }
}
