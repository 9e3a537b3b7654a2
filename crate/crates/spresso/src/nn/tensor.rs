//! Dense row-major tensors over a generic float scalar. Training runs in
//! f32; gradient checking instantiates the same code at f64.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Copy
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an f64 constant into the working scalar type.
#[inline]
pub fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant not representable")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: vec![value; n],
            shape: shape.to_vec(),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            data,
            shape: shape.to_vec(),
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            data: vec![value],
            shape: vec![1],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                sc::<T>(g * std)
            })
            .collect();
        Tensor {
            data,
            shape: shape.to_vec(),
        }
    }

    /// Identity matrix [n, n].
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Rows of a 2-D tensor (first axis).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (second axis).
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            data: self.data.iter().map(|&x| f(x)).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: T, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * *b;
        }
    }

    pub fn fill(&mut self, v: T) {
        for x in &mut self.data {
            *x = v;
        }
    }

    pub fn sum(&self) -> T {
        let mut s = T::zero();
        for &x in &self.data {
            s += x;
        }
        s
    }

    pub fn sq_norm(&self) -> T {
        let mut s = T::zero();
        for &x in &self.data {
            s += x * x;
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
            shape: self.shape.clone(),
        }
    }
}

/// y = x · wᵀ  with x [n, k], w [m, k] -> y [n, m]
pub fn matmul_nt<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (x.rows(), x.cols());
    let m = w.rows();
    debug_assert_eq!(w.cols(), k);
    let mut y = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        for j in 0..m {
            let wj = w.row(j);
            let mut s = T::zero();
            for p in 0..k {
                s += xi[p] * wj[p];
            }
            yi[j] = s;
        }
    }
    y
}

/// y = a · b  with a [n, k], b [k, m] -> y [n, m]
pub fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(b.rows(), k);
    let mut y = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let ai = a.row(i);
        let yi = y.row_mut(i);
        for p in 0..k {
            let s = ai[p];
            let bp = b.row(p);
            for j in 0..m {
                yi[j] += s * bp[j];
            }
        }
    }
    y
}

/// y = aᵀ · b  with a [k, n], b [k, m] -> y [n, m]
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, n) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(b.rows(), k);
    let mut y = Tensor::zeros(&[n, m]);
    for p in 0..k {
        let ap = a.row(p);
        let bp = b.row(p);
        for i in 0..n {
            let s = ap[i];
            let yi = y.row_mut(i);
            for j in 0..m {
                yi[j] += s * bp[j];
            }
        }
    }
    y
}
