//! Dense column-major matrices and the small GEMM kernels used by evaluation.
//!
//! Right-hand sides and outputs inside the executor are kept row-major
//! (`rows x q`, one contiguous row per point) so that the rows owned by a tree
//! node form one contiguous slice. Generators (`D`, `B`, `V`) are column-major.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds from a row-major buffer (`data[r * cols + c]`).
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        let mut m = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r + c * rows] = data[r * cols + c];
            }
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(f(r, c));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r + c * self.rows]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r + c * self.rows] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Row-major copy of the matrix.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for c in 0..self.cols {
            for r in 0..self.rows {
                out[r * self.cols + c] = self.data[r + c * self.rows];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Plain triple-loop product, used by tests and small reference paths.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            for k in 0..self.cols {
                let b = other.get(k, j);
                if b == 0.0 {
                    continue;
                }
                let a = self.column(k);
                let o = &mut out.data[j * self.rows..(j + 1) * self.rows];
                for (o, a) in o.iter_mut().zip(a) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid("matrix shape mismatch in subtraction"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `||a - b||_F / ||b||_F`; zero when both are empty.
pub fn relative_frobenius(approx: &DenseMatrix, exact: &DenseMatrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in approx.as_slice().iter().zip(exact.as_slice()) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}

/// Accumulating GEMM kernels over row-major right-hand sides.
///
/// Every kernel computes each output row with a fixed, row-local summation
/// order, so calling it on a subset of rows yields bit-identical results.
pub trait Gemm: Sync + Send {
    /// `c[r, :] += sum_k a[r + k * lda] * b[k, :]` for `r in 0..rows`.
    ///
    /// `a` is column-major with leading dimension `lda`; `b` is row-major
    /// `inner x q`; `c` is row-major `rows x q`.
    #[allow(clippy::too_many_arguments)]
    fn nn(&self, a: &[f64], lda: usize, rows: usize, inner: usize, b: &[f64], q: usize, c: &mut [f64]);

    /// `c[r, :] += sum_k a[k + r * lda] * b[k, :]`, i.e. the product with the
    /// transpose of a column-major `inner x rows` matrix.
    #[allow(clippy::too_many_arguments)]
    fn tn(&self, a: &[f64], lda: usize, rows: usize, inner: usize, b: &[f64], q: usize, c: &mut [f64]);
}

/// Portable blocked triple loop.
#[derive(Debug, Default, Clone, Copy)]
pub struct PortableGemm;

const ROW_TILE: usize = 16;
const INNER_TILE: usize = 256;

#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

impl Gemm for PortableGemm {
    fn nn(&self, a: &[f64], lda: usize, rows: usize, inner: usize, b: &[f64], q: usize, c: &mut [f64]) {
        if rows == 0 || inner == 0 || q == 0 {
            return;
        }
        debug_assert!(c.len() >= rows * q);
        debug_assert!(b.len() >= inner * q);
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + ROW_TILE).min(rows);
            let mut k0 = 0;
            while k0 < inner {
                let k1 = (k0 + INNER_TILE).min(inner);
                for k in k0..k1 {
                    let brow = &b[k * q..(k + 1) * q];
                    let acol = &a[k * lda..];
                    for r in r0..r1 {
                        let alpha = acol[r];
                        axpy(alpha, brow, &mut c[r * q..(r + 1) * q]);
                    }
                }
                k0 = k1;
            }
            r0 = r1;
        }
    }

    fn tn(&self, a: &[f64], lda: usize, rows: usize, inner: usize, b: &[f64], q: usize, c: &mut [f64]) {
        if rows == 0 || inner == 0 || q == 0 {
            return;
        }
        debug_assert!(c.len() >= rows * q);
        debug_assert!(b.len() >= inner * q);
        for r in 0..rows {
            let acol = &a[r * lda..r * lda + inner];
            let crow = &mut c[r * q..(r + 1) * q];
            for (k, &alpha) in acol.iter().enumerate() {
                axpy(alpha, &b[k * q..(k + 1) * q], crow);
            }
        }
    }
}

/// Dense `K * W` with a materialized kernel matrix, used as the performance
/// baseline. `k` is column-major `n x n`, `w` and the result are row-major
/// `n x q`. Parallel over row tiles on the current rayon pool.
pub fn dense_gemm(k: &DenseMatrix, w_row_major: &[f64], q: usize) -> Result<Vec<f64>> {
    let n = k.rows();
    if k.cols() != n || w_row_major.len() != n * q {
        return Err(Error::invalid("dense_gemm shape mismatch"));
    }
    let mut y = vec![0.0; n * q];
    if q == 0 {
        return Ok(y);
    }
    const TILE: usize = 64;
    let gemm = PortableGemm;
    y.par_chunks_mut(TILE * q)
        .enumerate()
        .for_each(|(t, chunk)| {
            let r0 = t * TILE;
            let rows = chunk.len() / q;
            gemm.nn(&k.as_slice()[r0..], n, rows, n, w_row_major, q, chunk);
        });
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseMatrix, b_rm: &[f64], q: usize) -> Vec<f64> {
        let mut c = vec![0.0; a.rows() * q];
        for r in 0..a.rows() {
            for j in 0..q {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(r, k) * b_rm[k * q + j];
                }
                c[r * q + j] = s;
            }
        }
        c
    }

    fn sample(rows: usize, cols: usize, salt: f64) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |r, c| ((r * 7 + c * 13) as f64 * 0.37 + salt).sin())
    }

    #[test]
    fn nn_matches_naive_across_tiles() {
        let a = sample(37, 300, 0.1);
        let b = sample(300, 5, 0.7).to_row_major();
        let mut c = vec![0.0; 37 * 5];
        PortableGemm.nn(a.as_slice(), 37, 37, 300, &b, 5, &mut c);
        let want = naive(&a, &b, 5);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn tn_is_transpose_product() {
        let a = sample(20, 9, 0.3);
        let b = sample(20, 4, 1.1).to_row_major();
        let mut c = vec![0.0; 9 * 4];
        PortableGemm.tn(a.as_slice(), 20, 9, 20, &b, 4, &mut c);
        let want = naive(&a.transpose(), &b, 4);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_subset_is_bit_identical() {
        let a = sample(40, 33, 0.2);
        let b = sample(33, 3, 0.9).to_row_major();
        let mut full = vec![0.0; 40 * 3];
        PortableGemm.nn(a.as_slice(), 40, 40, 33, &b, 3, &mut full);
        let mut part = vec![0.0; 7 * 3];
        PortableGemm.nn(&a.as_slice()[11..], 40, 7, 33, &b, 3, &mut part);
        assert_eq!(&full[11 * 3..18 * 3], &part[..]);
    }

    #[test]
    fn dense_gemm_matches_matmul() {
        let k = sample(130, 130, 0.5);
        let w = sample(130, 3, 0.8);
        let y = dense_gemm(&k, &w.to_row_major(), 3).unwrap();
        let want = k.matmul(&w).unwrap().to_row_major();
        for (x, y) in y.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn row_major_round_trip() {
        let m = sample(4, 6, 0.0);
        let back = DenseMatrix::from_row_major(4, 6, &m.to_row_major()).unwrap();
        assert_eq!(m, back);
        assert!(DenseMatrix::from_col_major(2, 2, vec![1.0]).is_err());
    }
}
