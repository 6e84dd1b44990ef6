//! Dense row-matrix type and the blocked dot-product kernels shared by the
//! clustering and scoring stages.
//!
//! Bulk similarities come from `f32` matrix products. Wherever a discrete
//! decision depends on them (argmax, duplicate detection) the near-winning
//! candidates are re-scored with an exact sequential `f64` dot product, so
//! decisions do not depend on the blocking or on the thread schedule.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per block of the neighbour search.
const ROW_BLOCK: usize = 64;

/// `n x dim` row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl RowMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("row dimension must be positive".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {n} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Self::new(n, dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }
}

/// Sequential `f64` dot product of two `f32` slices.
#[inline]
pub fn exact_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `out = a * b^T` where `a` is `m x k` and `b` is `n x k`, both row-major;
/// `out` is `m x n` row-major.
pub fn gemm_abt(a: &[f32], m: usize, b: &[f32], n: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices are sized for the given dimensions and strides
    // (checked above in debug builds, guaranteed by every caller).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Absolute error budget of an `f32` dot product of two (near) unit vectors
/// of length `dim`.
fn f32_dot_tolerance(dim: usize) -> f32 {
    2.0 * dim as f32 * f32::EPSILON + 1e-6
}

pub(crate) fn check_unit_rows(points: &RowMatrix, tol: f64) -> Result<()> {
    for (i, row) in points.iter_rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("row {i} has a non-finite value")));
        }
        let norm = exact_dot(row, row).sqrt();
        if (norm - 1.0).abs() > tol {
            return Err(Error::Invalid(format!(
                "row {i} has norm {norm}, expected a unit vector"
            )));
        }
    }
    Ok(())
}

/// For every row, the index of the most similar other row (largest dot
/// product). Ties go to the smallest index. Requires at least two rows.
pub fn nearest_other(points: &RowMatrix) -> Vec<usize> {
    let n = points.rows;
    let dim = points.dim;
    let tol = f32_dot_tolerance(dim);
    let mut kappa = vec![0usize; n];
    kappa
        .par_chunks_mut(ROW_BLOCK)
        .enumerate()
        .for_each(|(block, out)| {
            let start = block * ROW_BLOCK;
            let m = out.len();
            let mut sims = vec![0f32; m * n];
            gemm_abt(
                &points.data[start * dim..(start + m) * dim],
                m,
                &points.data,
                n,
                dim,
                &mut sims,
            );
            let mut candidates = Vec::new();
            for (r, slot) in out.iter_mut().enumerate() {
                let i = start + r;
                let row = &sims[r * n..(r + 1) * n];
                let approx_max = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &s)| s)
                    .fold(f32::NEG_INFINITY, f32::max);
                let floor = approx_max - tol;
                candidates.clear();
                candidates.extend((0..n).filter(|&j| j != i && row[j] >= floor));
                let query = points.row(i);
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &j in &candidates {
                    let s = exact_dot(query, points.row(j));
                    // candidates ascend, so strict > keeps the smallest index on ties
                    if s > best.0 {
                        best = (s, j);
                    }
                }
                *slot = best.1;
            }
        });
    kappa
}

/// All pairs `(i, j)` with `j < i` whose cosine similarity is at least
/// `min_cos`, ordered by `i` then `j`.
pub fn similar_pairs(points: &RowMatrix, min_cos: f64) -> Vec<(usize, usize)> {
    let n = points.rows;
    let dim = points.dim;
    let tol = f32_dot_tolerance(dim);
    let norms: Vec<f64> = points.iter_rows().map(|r| exact_dot(r, r).sqrt()).collect();
    let floor = (min_cos - 1e-4) as f32 - tol;
    let blocks: Vec<Vec<(usize, usize)>> = (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|block| {
            let start = block * ROW_BLOCK;
            let m = ROW_BLOCK.min(n - start);
            let mut sims = vec![0f32; m * start.max(1)];
            let mut found = Vec::new();
            if start > 0 {
                gemm_abt(
                    &points.data[start * dim..(start + m) * dim],
                    m,
                    &points.data[..start * dim],
                    start,
                    dim,
                    &mut sims[..m * start],
                );
            }
            for r in 0..m {
                let i = start + r;
                for j in 0..i {
                    let approx = if j < start {
                        sims[r * start + j]
                    } else {
                        f32::INFINITY
                    };
                    if approx < floor {
                        continue;
                    }
                    let denom = norms[i] * norms[j];
                    if denom == 0.0 {
                        continue;
                    }
                    if exact_dot(points.row(i), points.row(j)) / denom >= min_cos {
                        found.push((i, j));
                    }
                }
            }
            found
        })
        .collect();
    blocks.into_iter().flatten().collect()
}
