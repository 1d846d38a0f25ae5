//! Dense row-major f64 tensors and the elementary operations the rest of the
//! crate builds on. Every public operation validates that its result is
//! finite; shape violations and non-finite results surface as typed errors
//! instead of propagating silently.

use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid parameter in {op}: {detail}")]
    Parameter { op: &'static str, detail: String },
}

/// Dense tensor; `data.len() == shape.iter().product()`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Rows below this stay single-threaded; above it matmul splits output rows
/// across the rayon pool. Each row has a fixed accumulation order, so the
/// split never changes results.
const PAR_ROWS: usize = 64;

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.check_finite("from_vec")?;
        Ok(t)
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

    /// Row count for rank-2 tensors; rank-1 tensors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Column count for rank-1/2 tensors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Standard matrix product, row-major. Output rows are computed
/// independently (fixed per-row accumulation order), so the parallel split
/// is bitwise identical to the sequential one at any thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(TensorError::Shape {
            op: "matmul",
            detail: format!("{m}x{ka} . {kb}x{n}"),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let bd = &b.data;
    let body = |(i, orow): (usize, &mut [f64])| {
        let arow = a.row(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    };
    if m >= PAR_ROWS {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    out.check_finite("matmul")?;
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose; same determinism contract
/// as [`matmul`]. Layout matches the weight convention used by the network
/// (one output unit per row of `b`).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if ka != kb {
        return Err(TensorError::Shape {
            op: "matmul_nt",
            detail: format!("{m}x{ka} . ({n}x{kb})^T"),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let body = |(i, orow): (usize, &mut [f64])| {
        let arow = a.row(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m >= PAR_ROWS {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    out.check_finite("matmul_nt")?;
    Ok(out)
}

/// `aᵀ · b` where `a` is m×k and `b` is m×n, yielding k×n; accumulates in
/// row order of `a`/`b`, single pass, deterministic.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ma, k) = (a.rows(), a.cols());
    let (mb, n) = (b.rows(), b.cols());
    if ma != mb {
        return Err(TensorError::Shape {
            op: "matmul_tn",
            detail: format!("({ma}x{k})^T . {mb}x{n}"),
        });
    }
    let mut out = Tensor::zeros(&[k, n]);
    // Parallelize over output rows (columns of a); each output row scans all
    // input rows in order, so the reduction order is fixed.
    let ad = &a.data;
    let bd = &b.data;
    let body = |(p, orow): (usize, &mut [f64])| {
        for i in 0..ma {
            let apk = ad[i * k + p];
            if apk == 0.0 {
                continue;
            }
            let brow = &bd[i * n..(i + 1) * n];
            for (o, &bij) in orow.iter_mut().zip(brow) {
                *o += apk * bij;
            }
        }
    };
    if k >= PAR_ROWS {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    out.check_finite("matmul_tn")?;
    Ok(out)
}

/// I.i.d. Gaussian tensor with standard deviation `sigma`; `sigma == 0`
/// returns exact zeros without consuming the stream.
pub fn gaussian(rng: &mut RngStream, shape: &[usize], sigma: f64) -> Result<Tensor, TensorError> {
    if !(sigma >= 0.0) {
        return Err(TensorError::Parameter {
            op: "gaussian",
            detail: format!("sigma = {sigma}"),
        });
    }
    let mut t = Tensor::zeros(shape);
    if sigma > 0.0 {
        for v in &mut t.data {
            *v = sigma * rng.normal();
        }
    }
    Ok(t)
}

pub fn l2_norm(x: &Tensor) -> f64 {
    x.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l2_norm_slice(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `alpha * x + y`, elementwise.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape != y.shape {
        return Err(TensorError::Shape {
            op: "axpy",
            detail: format!("{:?} vs {:?}", x.shape, y.shape),
        });
    }
    let mut out = y.clone();
    for (o, &xi) in out.data.iter_mut().zip(&x.data) {
        *o += alpha * xi;
    }
    out.check_finite("axpy")?;
    Ok(out)
}

/// In-place `y += alpha * x` over raw slices; hot-loop form of [`axpy`].
pub fn axpy_mut(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (o, &xi) in y.iter_mut().zip(x) {
        *o += alpha * xi;
    }
}

pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor, TensorError> {
    if !(lo <= hi) {
        return Err(TensorError::Parameter {
            op: "clamp",
            detail: format!("lo {lo} > hi {hi}"),
        });
    }
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.clamp(lo, hi);
    }
    Ok(out)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}
