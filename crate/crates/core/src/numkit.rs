//! Dense row-major `f64` buffers and the handful of elementwise and matrix
//! primitives the optimizers need.
//!
//! Every binary operation requires identical shapes; there is no
//! broadcasting. Cosine similarity returns 0 when either operand has a norm
//! below [`COSINE_NORM_FLOOR`], so diagnostic streams never abort on a zero
//! vector.

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Buffer {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::BadLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// 1-D buffer owning `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self::from_vec(data.to_vec())
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::BadLength {
                    shape: vec![n_rows, n_cols],
                    expected: n_cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![n_rows, n_cols], data)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn zeros_like(other: &Buffer) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn ones_like(other: &Buffer) -> Self {
        Self::filled(&other.shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::BadLength {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Self {
            shape: vec![n],
            data: self.data,
        }
    }

    pub fn check_same_shape(&self, other: &Buffer) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// First non-finite entry, if any, as an error tagged with `what`.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                what,
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Buffer {
        Buffer {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Buffer, f: impl Fn(f64, f64) -> f64) -> Result<Buffer> {
        self.check_same_shape(other)?;
        Ok(Buffer {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self[i] = f(self[i], other[i])`.
    pub fn zip_apply(&mut self, other: &Buffer, f: impl Fn(f64, f64) -> f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
        Ok(())
    }

    pub fn add(&self, other: &Buffer) -> Result<Buffer> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Buffer) -> Result<Buffer> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Buffer) -> Result<Buffer> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Buffer {
        self.map(|x| alpha * x)
    }

    pub fn square(&self) -> Buffer {
        self.map(|x| x * x)
    }

    pub fn dot(&self, other: &Buffer) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm of the flattened buffer (Frobenius norm for matrices).
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Buffer) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs())))
    }

    pub fn transpose(&self) -> Result<Buffer> {
        if !self.is_matrix() {
            return Err(Error::NotMatrix(self.shape.clone()));
        }
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Buffer {
            shape: vec![n, m],
            data,
        })
    }
}

/// Unary elementwise kernels named in the operation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Square,
    Abs,
    Sqrt,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Square => x * x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Neg => -x,
        }
    }
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

pub fn unary(op: UnaryOp, a: &Buffer) -> Buffer {
    a.map(|x| op.apply(x))
}

pub fn binary(op: BinaryOp, a: &Buffer, b: &Buffer) -> Result<Buffer> {
    a.zip_map(b, |x, y| op.apply(x, y))
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either norm is below the floor.
pub fn cosine_similarity(a: &Buffer, b: &Buffer) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn matmul(a: &Buffer, b: &Buffer) -> Result<Buffer> {
    if !a.is_matrix() {
        return Err(Error::NotMatrix(a.shape.clone()));
    }
    if !b.is_matrix() {
        return Err(Error::NotMatrix(b.shape.clone()));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::DimensionMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (d, &bpj) in dst.iter_mut().zip(brow) {
                *d += aip * bpj;
            }
        }
    }
    Ok(Buffer {
        shape: vec![m, n],
        data: out,
    })
}
