//! Column interpolative decomposition via Householder QR with column pivoting.

use crate::matrix::DenseMatrix;

/// Floor on the relative tolerance so `tol = 0` stops at numerical rank.
const RANK_FLOOR: f64 = 4.0 * f64::EPSILON;

/// Result of `M ~= M[:, skeleton] * V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolativeDecomposition {
    /// Selected column positions, in pivot order.
    pub skeleton: Vec<usize>,
    /// `cols x rank` interpolation matrix; `V[skeleton[k], k] = 1`, other
    /// skeleton rows zero.
    pub v: DenseMatrix,
}

impl InterpolativeDecomposition {
    pub fn rank(&self) -> usize {
        self.skeleton.len()
    }
}

/// Adaptive-rank column ID of `m`.
///
/// Pivoting stops once the Frobenius norm of the trailing block drops to
/// `tol * ||m||_F` (which is exactly the reconstruction error), or at
/// `max_rank`.
pub fn interpolative_decomposition(m: &DenseMatrix, tol: f64, max_rank: usize) -> InterpolativeDecomposition {
    let rows = m.rows();
    let cols = m.cols();
    let mut a = m.as_slice().to_vec();
    let mut perm: Vec<usize> = (0..cols).collect();
    let total = m.frobenius_norm();
    let threshold = tol.max(RANK_FLOOR) * total;
    let cap = max_rank.min(rows).min(cols);

    let mut norms2 = vec![0.0; cols];
    let mut rank = 0;
    if total > 0.0 {
        for k in 0..cap {
            let mut trailing = 0.0;
            for (j, n2) in norms2.iter_mut().enumerate().skip(k) {
                let col = &a[j * rows + k..(j + 1) * rows];
                *n2 = col.iter().map(|v| v * v).sum::<f64>();
                trailing += *n2;
            }
            if trailing.sqrt() <= threshold {
                break;
            }
            let mut piv = k;
            for j in k + 1..cols {
                if norms2[j] > norms2[piv] {
                    piv = j;
                }
            }
            if norms2[piv] == 0.0 {
                break;
            }
            if piv != k {
                for r in 0..rows {
                    a.swap(k * rows + r, piv * rows + r);
                }
                perm.swap(k, piv);
                norms2.swap(k, piv);
            }
            householder_step(&mut a, rows, cols, k);
            rank = k + 1;
        }
    }

    // X = R11^{-1} R12 by back substitution, one column at a time.
    let trailing_cols = cols - rank;
    let mut v = DenseMatrix::zeros(cols, rank);
    for (k, &p) in perm.iter().take(rank).enumerate() {
        v.set(p, k, 1.0);
    }
    let mut x = vec![0.0; rank];
    for t in 0..trailing_cols {
        let col = &a[(rank + t) * rows..];
        for k in (0..rank).rev() {
            let mut s = col[k];
            for l in k + 1..rank {
                s -= a[l * rows + k] * x[l];
            }
            x[k] = s / a[k * rows + k];
        }
        let target = perm[rank + t];
        for (k, &xk) in x.iter().enumerate() {
            v.set(target, k, xk);
        }
    }
    InterpolativeDecomposition {
        skeleton: perm[..rank].to_vec(),
        v,
    }
}

/// Applies the Householder reflector zeroing column `k` below the diagonal to
/// columns `k..cols`. Leaves `R` in the upper triangle.
fn householder_step(a: &mut [f64], rows: usize, cols: usize, k: usize) {
    let col = &a[k * rows + k..(k + 1) * rows];
    let alpha = col[0];
    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let beta = if alpha >= 0.0 { -norm } else { norm };
    // v = x - beta e1, normalized so v[0] = 1.
    let v0 = alpha - beta;
    let mut v: Vec<f64> = col.iter().map(|x| x / v0).collect();
    v[0] = 1.0;
    let tau = (beta - alpha) / beta;
    a[k * rows + k] = beta;
    for r in k + 1..rows {
        a[k * rows + r] = 0.0;
    }
    for j in k + 1..cols {
        let c = &mut a[j * rows + k..(j + 1) * rows];
        let dot: f64 = c.iter().zip(&v).map(|(x, y)| x * y).sum();
        let s = tau * dot;
        for (x, y) in c.iter_mut().zip(&v) {
            *x -= s * y;
        }
    }
}
