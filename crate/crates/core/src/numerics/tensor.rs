use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm below which a cosine operand counts as the zero vector.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.rank() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, idx: usize) -> T {
        self.data[idx]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim("dot", &self.shape, &other.shape));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Matrix product `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix-vector product `w · x` for `w: m×k`, `x: k`.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() != 1 || w.shape[1] != x.shape[0] {
        return Err(Error::dim("matvec", &w.shape, &x.shape));
    }
    let k = w.shape[1];
    let out = w.data.chunks_exact(k).map(|row| dot(row, &x.data)).collect();
    Tensor::new(vec![w.shape[0]], out)
}

/// Numerically stable softmax of a vector.
pub fn softmax<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 1 || v.is_empty() {
        return Err(Error::dim("softmax", &v.shape, &[]));
    }
    Ok(Tensor::vector(softmax_slice(&v.data)))
}

fn softmax_slice<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cosine similarity; 0 when either operand has norm below [`COSINE_NORM_FLOOR`].
pub fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape != b.shape {
        return Err(Error::dim("cosine", &a.shape, &b.shape));
    }
    Ok(cosine_slice(&a.data, &b.data).0)
}

/// Returns `(cos, |a|, |b|)`; `cos` is 0 in the degenerate case.
pub(crate) fn cosine_slice<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let floor = T::of(COSINE_NORM_FLOOR);
    if na < floor || nb < floor {
        return (T::zero(), na, nb);
    }
    (dot(a, b) / (na * nb), na, nb)
}
