//! Dense row-major `f64` tensors.
//!
//! Almost everything in the crate is a matrix or a row vector, so most
//! helpers assume rank 2. Rank-0 tensors (shape `[]`) carry scalar losses.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A `1×n` row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length slices into an `n×m` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {} has width {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows of a rank-2 tensor (1 for scalars and vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| v * alpha)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self / ‖self‖_F`.
    pub fn frobenius_normalize(&self) -> Result<Tensor> {
        let norm = self.frobenius_norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Singular(format!(
                "cannot normalize tensor of shape {:?} with Frobenius norm {}",
                self.shape, norm
            )));
        }
        Ok(self.scale(1.0 / norm))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        check_matmul(self, other)?;
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            Layout::Normal(k),
            &other.data,
            Layout::Normal(n),
            &mut out,
            0.0,
        );
        Tensor::matrix(m, n, out)
    }

    /// Element-wise mean of `1×width` row vectors. The mean over an empty list
    /// is the zero vector.
    pub fn mean_rows(rows: &[Tensor], width: usize) -> Result<Tensor> {
        let mut acc = vec![0.0; width];
        for (i, r) in rows.iter().enumerate() {
            if r.numel() != width || r.rows() != 1 {
                return Err(Error::Dimension(format!(
                    "row {} has shape {:?}, expected [1, {}]",
                    i, r.shape, width
                )));
            }
            for (a, v) in acc.iter_mut().zip(&r.data) {
                *a += v;
            }
        }
        if !rows.is_empty() {
            let n = rows.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        Ok(Tensor::row(&acc))
    }

    /// Horizontal concatenation of row vectors, in order.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of an empty list".into()));
        }
        let mut data = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            if p.rows() != 1 {
                return Err(Error::Dimension(format!(
                    "concat part {} has shape {:?}, expected a row vector",
                    i, p.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::row(&data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn check_matmul(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Memory layout of a row-major operand: `Normal(ld)` reads it as stored,
/// `Transposed(ld)` reads its transpose. `ld` is the stored row length.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    Normal(usize),
    Transposed(usize),
}

impl Layout {
    fn strides(self) -> (isize, isize) {
        match self {
            Layout::Normal(ld) => (ld as isize, 1),
            Layout::Transposed(ld) => (1, ld as isize),
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: the callers size `a`, `b`, `c` to hold m×k, k×n and m×n
    // elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
