//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor: positive extents plus row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} values, got {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Extent of axis `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    /// Reinterpret with new dims of the same element count.
    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let numel = checked_numel(dims)?;
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.dims,
                self.data.len(),
                dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.dims[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.dims[1] + c]
    }

    /// Convert element type (used to re-run graphs in f64 for checking).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| T::of_f64(v.as_f64())).collect(),
        }
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn checked_numel(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("tensor must have at least one axis"));
    }
    let mut n: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(Error::shape("zero extent"));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::shape(format!("extent product overflow for {:?}", dims)))?;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_lengths() {
        let r = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(r.dims(), &[3, 2]);
    }

    #[test]
    fn numel_overflow_is_an_error() {
        let r = checked_numel(&[usize::MAX, 2]);
        assert!(r.is_err());
    }
}
