//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable-by-convention value: every operation returns a
//! new tensor and never writes through its inputs. Training runs at `f32`,
//! gradient verification at `f64`; both go through the [`Real`] bound.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{PatError, Result};

/// Scalar types the numerics run on.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() || dims.contains(&0) {
            return Err(PatError::shape("tensor", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a `rows x cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PatError::config("ragged rows"));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix whose last dim is the column count.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Interprets the tensor as a matrix (all leading dims collapsed).
    pub fn as_matrix(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[1] != other.dims[0] {
            return Err(PatError::shape("matmul", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.dims.len() != 2 {
            return Err(PatError::shape("transpose", &self.dims, &[2]));
        }
        let (m, n) = (self.dims[0], self.dims[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_last(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols()) {
            kernels::softmax_in_place(row);
        }
        out
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.dims.len() {
            return Err(PatError::shape("softmax", &self.dims, &[axis]));
        }
        let n = self.dims[axis];
        let inner: usize = self.dims[axis + 1..].iter().product();
        let outer: usize = self.dims[..axis].iter().product();
        let mut out = self.clone();
        let mut buf = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + t * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    out.data[base + t * inner] = *b;
                }
            }
        }
        Ok(out)
    }

    /// Row-wise L2 normalization; zero rows stay zero.
    pub fn l2_normalize_rows(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols()) {
            kernels::l2_normalize_in_place(row);
        }
        out
    }
}

/// Raw slice kernels shared by the tensor API and the tape.
pub(crate) mod kernels {
    use super::Real;

    /// `out += a[m,k] * b[k,n]`
    pub fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += a[m,k] * b[n,k]^T`
    pub fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] += acc;
            }
        }
    }

    /// `out += a[m,k]^T * b[m,n]`, giving a `k x n` result.
    pub fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    pub fn softmax_in_place<T: Real>(row: &mut [T]) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }

    pub fn log_sum_exp<T: Real>(row: impl Iterator<Item = T> + Clone) -> T {
        let max = row.clone().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return max;
        }
        let sum: T = row.map(|x| (x - max).exp()).sum();
        max + sum.ln()
    }

    pub fn l2_normalize_in_place<T: Real>(row: &mut [T]) {
        let norm = dot(row, row).sqrt();
        if norm > T::zero() {
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
    }

    pub fn gelu<T: Real>(x: T) -> T {
        // tanh approximation
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let inner = c * (x + T::of(0.044715) * x * x * x);
        T::of(0.5) * x * (T::one() + inner.tanh())
    }

    pub fn gelu_grad<T: Real>(x: T) -> T {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let inner = c * (x + T::of(0.044715) * x * x * x);
        let t = inner.tanh();
        let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
        T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let eye = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_dims() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(PatError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap().softmax_last();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::<f64>::new(vec![2], vec![0.0, 3f64.ln()])
            .unwrap()
            .softmax_last();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn l2_normalize_hand_example_and_zero() {
        let t = Tensor::<f64>::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let n = t.l2_normalize_rows();
        assert_eq!(n.data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
