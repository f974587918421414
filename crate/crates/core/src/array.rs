//! Dense row-major arrays.
//!
//! The whole pipeline works on matrices; a vector is a 1-row matrix and a
//! scalar is 1x1. No general broadcasting; the tape ops define exactly the
//! shape rules they need.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Array<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Array<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(config_err!(
                "array data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Array { rows, cols, data })
    }

    pub fn scalar(v: S) -> Self {
        Array {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// A 1-row matrix.
    pub fn row(data: Vec<S>) -> Self {
        Array {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Array {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.trunc_normal(std)).collect();
        Array { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn frobenius(&self) -> S {
        self.data
            .iter()
            .fold(S::ZERO, |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> Array<T> {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Copy of rows start..start+len. Panics when the range runs off the end,
    /// like slice indexing.
    pub fn slice_rows(&self, start: usize, len: usize) -> Array<S> {
        let lo = start * self.cols;
        let hi = (start + len) * self.cols;
        Array {
            rows: len,
            cols: self.cols,
            data: self.data[lo..hi].to_vec(),
        }
    }

    /// Stack parts vertically; all must share a column count.
    pub fn vcat(parts: &[Array<S>]) -> Result<Array<S>> {
        let cols = match parts.first() {
            Some(p) => p.cols,
            None => return Err(config_err!("vcat of nothing")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(config_err!("vcat column mismatch"));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Array { rows, cols, data })
    }
}

/// Plain matrix product, row-major triple loop with the k-loop hoisted so
/// both operands stream through memory.
pub fn matmul<S: Scalar>(a: &Array<S>, b: &Array<S>) -> Result<Array<S>> {
    if a.cols != b.rows {
        return Err(config_err!(
            "matmul inner extents differ: {}x{} by {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let mut out = Array::zeros(a.rows, b.cols);
    matmul_into(a, b, out.data_mut());
    Ok(out)
}

pub(crate) fn matmul_into<S: Scalar>(a: &Array<S>, b: &Array<S>, out: &mut [S]) {
    let (m, k) = (a.rows, a.cols);
    let n = b.cols;
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}
