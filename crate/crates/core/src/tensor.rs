//! Dense f32 kernels: matrix product, row softmax, deterministic top-k and
//! edge-shrinking average pooling.
//!
//! Everything here is a pure function over immutable inputs. Accumulation is
//! sequential in f32 (pooling accumulates in f64 so a constant input survives
//! exactly).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// One score per candidate cache position.
pub type ScoreVec = Vec<f32>;

/// Row-major dense matrix of finite f32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix from a row-index list into `self`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(invalid(format!("row {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self { rows: indices.len(), cols: self.cols, data })
    }

    /// Rows `[start, start + len)` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(invalid(format!(
                "rows [{start}, {}) out of range for {} rows",
                start + len,
                self.rows
            )));
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(Self { rows: len, cols: self.cols, data })
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Mat) -> Result<Self> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(shape(format!("vstack cols {} vs {}", self.cols, other.cols)));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols, data })
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(shape(format!("row of {} values into {} cols", row.len(), self.cols)));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("appended row"));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(move |i| self.row(i))
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Conventional product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0f32; a.rows * b.cols];
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Mat { rows: a.rows, cols: b.cols, data: out })
}

/// `a · bᵀ`, i.e. every row of `a` dotted with every row of `b`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(shape(format!(
            "matmul_nt {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        data.extend(b.row_iter().map(|brow| dot(arow, brow)));
    }
    Ok(Mat { rows: a.rows, cols: b.rows, data })
}

/// In-place stable softmax of a single row.
pub fn softmax_in_place(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    if out.cols > 0 {
        for row in out.data.chunks_mut(out.cols) {
            softmax_in_place(row);
        }
    }
    out
}

/// Descending by score, ties toward the lower index. Inputs are finite.
#[inline]
fn rank_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest scores (ties toward the lower index), returned
/// in ascending index order. `k >= len` returns every index.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let n = scores.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mean over `[i - kernel/2, i + kernel/2]` clipped to the valid range.
pub fn pool_avg_1d(scores: &[f32], kernel: usize) -> Result<ScoreVec> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(invalid(format!("pooling kernel must be odd and >= 1, got {kernel}")));
    }
    if kernel == 1 {
        return Ok(scores.to_vec());
    }
    let half = kernel / 2;
    let n = scores.len();
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let sum: f64 = scores[lo..=hi].iter().map(|&v| v as f64).sum();
            (sum / (hi - lo + 1) as f64) as f32
        })
        .collect();
    Ok(out)
}
