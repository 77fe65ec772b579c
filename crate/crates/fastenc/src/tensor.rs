//! Dense row-major matrices and the reference math kernels (GEMM, softmax,
//! layer norm, activations) that the rest of the crate builds on and tests
//! against.
//!
//! Everything here is a pure function over immutable inputs. The kernels are
//! generic over [`Scalar`] so the same code runs in f32 for inference and in
//! f64 for gradient verification.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Tanh-approximation GELU constant sqrt(2/pi).
pub const GELU_COEF: f64 = 0.797_884_560_8;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("inner dimensions do not match: lhs is {m}x{k}, rhs is {k2}x{n}")]
    InnerDim { m: usize, k: usize, k2: usize, n: usize },
    #[error("bias length {got} does not match output columns {want}")]
    BiasLen { got: usize, want: usize },
    #[error("expected {rows}x{cols} = {} elements, got {got}", rows * cols)]
    ElementCount { rows: usize, cols: usize, got: usize },
    #[error("matrices have different shapes: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    Mismatch { a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
}

/// Float element type for the reference kernels. f32 everywhere except the
/// autodiff verification path, which runs in f64 for finite-difference
/// headroom.
pub trait Scalar: Float + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).unwrap()
    }
    fn to_f64s(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major matrix. Transposes are explicit operations, never layout
/// flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::ElementCount { rows, cols, got: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Copy of columns [c0, c1).
    pub fn col_slice(&self, c0: usize, c1: usize) -> Matrix<T> {
        assert!(c0 <= c1 && c1 <= self.cols);
        let mut out = Matrix::zeros(self.rows, c1 - c0);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<(), ShapeError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(ShapeError::Mismatch {
                a_rows: self.rows,
                a_cols: self.cols,
                b_rows: other.rows,
                b_cols: other.cols,
            });
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64s())).collect(),
        }
    }
}

/// Elementwise epilogue applied after bias broadcast in a GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Epilogue {
    None,
    Relu,
    Gelu,
}

impl Epilogue {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Epilogue::None => v,
            Epilogue::Relu => relu(v),
            Epilogue::Gelu => gelu(v),
        }
    }
}

/// C = A.B + bias (broadcast over rows), then the epilogue elementwise.
pub fn gemm<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    bias: Option<&[T]>,
    epilogue: Epilogue,
) -> Result<Matrix<T>, ShapeError> {
    if a.cols != b.rows {
        return Err(ShapeError::InnerDim { m: a.rows, k: a.cols, k2: b.rows, n: b.cols });
    }
    if let Some(bias) = bias {
        if bias.len() != b.cols {
            return Err(ShapeError::BiasLen { got: bias.len(), want: b.cols });
        }
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &av) in a_row.iter().enumerate().take(k) {
            let b_row = b.row(p);
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
        if let Some(bias) = bias {
            for j in 0..n {
                out_row[j] = out_row[j] + bias[j];
            }
        }
        for v in out_row.iter_mut() {
            *v = epilogue.apply(*v);
        }
    }
    Ok(out)
}

/// A.B^T, used by attention scores and backward passes.
pub fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, ShapeError> {
    if a.cols != b.cols {
        return Err(ShapeError::InnerDim { m: a.rows, k: a.cols, k2: b.cols, n: b.rows });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for p in 0..a.cols {
                acc = acc + a_row[p] * b_row[p];
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// A^T.B, the weight-gradient product in backward passes.
pub fn matmul_at<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, ShapeError> {
    if a.rows != b.rows {
        return Err(ShapeError::InnerDim { m: a.cols, k: a.rows, k2: b.rows, n: b.cols });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for i in 0..a.cols {
            let av = a_row[i];
            let out_row = out.row_mut(i);
            for j in 0..b.cols {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction. NaN rows propagate NaN.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_row_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Per-row layer norm followed by the gamma/beta affine. Variance is the
/// population variance over the row.
pub fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Matrix<T>, ShapeError> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(ShapeError::BiasLen { got: gamma.len(), want: x.cols });
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        layer_norm_row(out.row_mut(r), gamma, beta, eps);
    }
    Ok(out)
}

fn layer_norm_row<T: Scalar>(row: &mut [T], gamma: &[T], beta: &[T], eps: T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &v in row.iter() {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in row.iter() {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv_std = (var + eps).sqrt().recip();
    for (j, v) in row.iter_mut().enumerate() {
        *v = (*v - mean) * inv_std * gamma[j] + beta[j];
    }
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Tanh-approximation GELU: 0.5x(1 + tanh(0.7978845608 (x + 0.044715 x^3))).
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_COEF);
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of the tanh-approximation GELU, used by the backward pass.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_COEF);
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}
