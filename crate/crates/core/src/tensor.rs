//! Dense row-major tensors with hand-written forward and backward rules.
//!
//! Everything the model needs is here: matrix products (plus the
//! matrix-vector forms the recurrent cells use), gate nonlinearities, and a
//! numerically stabilised softmax cross-entropy. Each forward rule has a
//! matching `*_backward` that the gradient checker exercises.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating-point element type. Training and serving run in `f32`;
/// gradient checks run in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("zero dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, idx: &[usize]) -> T {
        let mut flat = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of bounds for axis {i} of size {d}");
            flat = flat * d + x;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "add_scaled",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|v| *v = *v * alpha);
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

fn require_matrix<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        _ => Err(TensorError::Shape {
            op,
            left: t.shape.clone(),
            right: vec![],
        }),
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Gradients of `matmul` given the upstream gradient `grad_out[m×n]`:
/// returns `(grad_out · bᵀ, aᵀ · grad_out)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = require_matrix(a, "matmul_backward")?;
    let (_, n) = require_matrix(b, "matmul_backward")?;
    if grad_out.shape != [m, n] {
        return Err(TensorError::Shape {
            op: "matmul_backward",
            left: grad_out.shape.clone(),
            right: vec![m, n],
        });
    }
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let g_row = &grad_out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b.data[p * n..(p + 1) * n];
            ga[i * k + p] = dot(g_row, b_row);
            let av = a.data[i * k + p];
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (g, &go) in gb_row.iter_mut().zip(g_row) {
                *g = *g + av * go;
            }
        }
    }
    Ok((Tensor::matrix(m, k, ga)?, Tensor::matrix(k, n, gb)?))
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `out += w · x` for `w[rows×cols]`, `x[cols]`, `out[rows]`.
pub fn matvec_acc<T: Real>(w: &Tensor<T>, x: &[T], out: &mut [T]) {
    let cols = w.cols();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), w.rows());
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(cols)) {
        *o = *o + dot(row, x);
    }
}

/// `out += wᵀ · y` for `w[rows×cols]`, `y[rows]`, `out[cols]`.
pub fn matvec_t_acc<T: Real>(w: &Tensor<T>, y: &[T], out: &mut [T]) {
    let cols = w.cols();
    debug_assert_eq!(y.len(), w.rows());
    debug_assert_eq!(out.len(), cols);
    for (&yv, row) in y.iter().zip(w.data.chunks_exact(cols)) {
        if yv == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + yv * wv;
        }
    }
}

/// Rank-one update `acc += y · xᵀ`.
pub fn outer_acc<T: Real>(acc: &mut Tensor<T>, y: &[T], x: &[T]) {
    let cols = acc.cols();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), acc.rows());
    for (&yv, row) in y.iter().zip(acc.data.chunks_exact_mut(cols)) {
        if yv == T::zero() {
            continue;
        }
        for (a, &xv) in row.iter_mut().zip(x) {
            *a = *a + yv * xv;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// Logistic sigmoid, evaluated on whichever branch keeps `exp` bounded.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    #[inline]
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

pub fn activate<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Backward of [`activate`] given its output and the upstream gradient.
pub fn activate_backward<T: Real>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>> {
    if output.shape != grad_out.shape {
        return Err(TensorError::Shape {
            op: "activate_backward",
            left: output.shape.clone(),
            right: grad_out.shape.clone(),
        });
    }
    let data = output
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&y, &g)| g * kind.derivative_from_output(y))
        .collect();
    Tensor::new(output.shape.clone(), data)
}

/// Writes `softmax(logits)` into `probs` using the max-shifted form.
pub fn softmax_into<T: Real>(logits: &[T], probs: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        total = total + *p;
    }
    for p in probs.iter_mut() {
        *p = *p / total;
    }
}

/// Cross-entropy of `softmax(logits)` against `target`.
///
/// Returns the loss `-log p[target]` and its gradient `p - onehot(target)`.
pub fn softmax_xent<T: Real>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if logits.len() < 2 {
        return Err(TensorError::Invalid(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if target >= logits.len() {
        return Err(TensorError::Index {
            index: target,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = total.ln() + max;
    let loss = log_z - logits[target];
    let mut grad: Vec<T> = logits.iter().map(|&l| (l - log_z).exp()).collect();
    grad[target] = grad[target] - T::one();
    Ok((loss, grad))
}
