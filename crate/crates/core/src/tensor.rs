//! Dense row-major tensors over f32 or f64.
//!
//! The element type is chosen at the experiment level: f32 for ordinary runs,
//! f64 for gradient-check suites where finite differences need the headroom.

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element trait. Implemented for f32 and f64 only.
pub trait Real: Float + Debug + Display + Send + Sync + 'static {
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn into_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an f64 literal into the element type.
#[inline]
pub fn re<E: Real>(x: f64) -> E {
    E::from_f64(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Real> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Real> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("{} elements for shape {:?}", expected, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| re(v)).collect())
    }

    /// Stacks equal-length rows into a [rows, cols] matrix.
    pub fn from_rows(rows: &[&[E]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("row stack", format!("{cols} columns"), format!("{}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Row count for a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count for a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(self.data.len())
    }

    pub fn row(&self, r: usize) -> &[E] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols() + c]
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                "[r,k] x [k,c]",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            let lhs = self.row(i);
            let dst = &mut out[i * c..(i + 1) * c];
            for (t, &a) in lhs.iter().enumerate() {
                let rhs = &other.data[t * c..(t + 1) * c];
                for (d, &b) in dst.iter_mut().zip(rhs.iter()) {
                    *d = *d + a * b;
                }
            }
        }
        let _ = k;
        Tensor::new(vec![r, c], out)
    }

    pub fn transpose2(&self) -> Result<Tensor<E>> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", "2-d tensor", format!("{:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.into_f64()).collect()
    }

    /// Converts element precision, rounding through the destination type.
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.into_f64())).collect(),
        }
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm<E: Real>(xs: &[E]) -> E {
    let mut acc = E::zero();
    for &x in xs {
        acc = acc + x * x;
    }
    acc.sqrt()
}

pub fn dot<E: Real>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

pub fn squared_distance<E: Real>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_against_hand_result() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_bad_dims() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose2().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose2().unwrap(), a);
    }

    #[test]
    fn finiteness_is_detected() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
    }
}
