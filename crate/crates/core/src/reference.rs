//! Schedule-free evaluators and error measures used to check the executor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compression::CompressedMatrix;
use crate::error::{Error, Result};
use crate::kernel::{dense_block_unchecked, Kernel};
use crate::matrix::{relative_frobenius, DenseMatrix};
use crate::points::PointSet;

/// Largest `n` for which a dense kernel matrix is materialized.
pub const DENSE_LIMIT: usize = 16384;

/// Sequential evaluation straight from the compressed form: same passes as
/// the executor, plain loops over node ids, no blocking or coarsening.
pub fn evaluate_reference(cm: &CompressedMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    let tree = &cm.htree.tree;
    let n = tree.num_points();
    if w.rows() != n {
        return Err(Error::invalid(format!("W has {} rows, expected {n}", w.rows())));
    }
    let q = w.cols();
    let num = tree.num_nodes();
    let sr = cm.srank_vector();
    // Tree-order copy of W as a dense n x q matrix.
    let perm = tree.perm();
    let wp = DenseMatrix::from_fn(n, q, |r, c| w.get(perm[r], c));
    let rows_of = |m: &DenseMatrix, start: usize, len: usize| DenseMatrix::from_fn(len, q, |r, c| m.get(start + r, c));

    let mut order: Vec<usize> = (0..num).filter(|&i| cm.bases[i].is_some()).collect();
    order.sort_by_key(|&i| (tree.node_height(i), i));

    let mut t: Vec<Option<DenseMatrix>> = vec![None; num];
    for &i in &order {
        let v = &cm.bases[i].as_ref().unwrap().v;
        let input = match tree.node(i).children {
            None => rows_of(&wp, tree.node(i).start, tree.node(i).len()),
            Some((l, r)) => {
                let (tl, tr) = (t[l].as_ref().unwrap(), t[r].as_ref().unwrap());
                DenseMatrix::from_fn(sr[l] + sr[r], q, |a, c| if a < sr[l] { tl.get(a, c) } else { tr.get(a - sr[l], c) })
            }
        };
        t[i] = Some(v.transpose().matmul(&input)?);
    }

    let mut s: Vec<DenseMatrix> = (0..num).map(|i| DenseMatrix::zeros(sr[i], q)).collect();
    for (&(i, j), b) in &cm.far_blocks {
        let prod = b.matmul(t[j].as_ref().unwrap())?;
        add_into(&mut s[i], &prod, 0);
    }

    let mut y = DenseMatrix::zeros(n, q);
    for &i in order.iter().rev() {
        let v = &cm.bases[i].as_ref().unwrap().v;
        let out = v.matmul(&s[i])?;
        match tree.node(i).children {
            None => add_into(&mut y, &out, tree.node(i).start),
            Some((l, r)) => {
                let top = rows_of(&out, 0, sr[l]);
                let bottom = rows_of(&out, sr[l], sr[r]);
                add_into(&mut s[l], &top, 0);
                add_into(&mut s[r], &bottom, 0);
            }
        }
    }

    for (&(i, j), d) in &cm.near_blocks {
        let nj = tree.node(j);
        let prod = d.matmul(&rows_of(&wp, nj.start, nj.len()))?;
        add_into(&mut y, &prod, tree.node(i).start);
    }

    let inv = tree.inverse_perm();
    Ok(DenseMatrix::from_fn(n, q, |r, c| y.get(inv[r], c)))
}

fn add_into(dst: &mut DenseMatrix, src: &DenseMatrix, row0: usize) {
    for c in 0..src.cols() {
        for r in 0..src.rows() {
            let v = dst.get(row0 + r, c) + src.get(r, c);
            dst.set(row0 + r, c, v);
        }
    }
}

/// Dense `K~` in original point order, built from fully expanded
/// (non-nested) bases: far block `(i, j)` is `U_i B_ij U_j^T`. Only for small `n`.
pub fn assemble_dense(cm: &CompressedMatrix) -> Result<DenseMatrix> {
    let tree = &cm.htree.tree;
    let n = tree.num_points();
    if n > 4096 {
        return Err(Error::NumericGuard(format!("refusing to assemble a dense {n} x {n} approximation")));
    }
    let num = tree.num_nodes();
    // full[i]: node size x srank, rows in tree order within the node.
    let mut col_full: Vec<Option<DenseMatrix>> = vec![None; num];
    let mut order: Vec<usize> = (0..num).filter(|&i| cm.bases[i].is_some()).collect();
    order.sort_by_key(|&i| (tree.node_height(i), i));
    for &i in &order {
        let v = &cm.bases[i].as_ref().unwrap().v;
        let full = match tree.node(i).children {
            None => v.clone(),
            Some((l, r)) => {
                let (fl, fr) = (col_full[l].as_ref().unwrap(), col_full[r].as_ref().unwrap());
                // blockdiag(fl, fr) * v
                let (ml, kl) = (fl.rows(), fl.cols());
                let block = DenseMatrix::from_fn(fl.rows() + fr.rows(), kl + fr.cols(), |a, b| match (a < ml, b < kl) {
                    (true, true) => fl.get(a, b),
                    (false, false) => fr.get(a - ml, b - kl),
                    _ => 0.0,
                });
                block.matmul(v)?
            }
        };
        col_full[i] = Some(full);
    }
    let mut k = DenseMatrix::zeros(n, n);
    let perm = tree.perm();
    let mut place = |i: usize, j: usize, blk: &DenseMatrix| {
        let (si, sj) = (tree.node(i).start, tree.node(j).start);
        for c in 0..blk.cols() {
            for r in 0..blk.rows() {
                let (pr, pc) = (perm[si + r], perm[sj + c]);
                k.set(pr, pc, k.get(pr, pc) + blk.get(r, c));
            }
        }
    };
    for (&(i, j), d) in &cm.near_blocks {
        place(i, j, d);
    }
    for (&(i, j), b) in &cm.far_blocks {
        let u = col_full[i].as_ref().unwrap();
        let v = col_full[j].as_ref().unwrap();
        let blk = u.matmul(b)?.matmul(&v.transpose())?;
        place(i, j, &blk);
    }
    Ok(k)
}

/// Exact `K[rows, :] W` (all rows when `rows` is `None`), streamed in row
/// tiles so `K` is never stored whole.
pub fn exact_product(kernel: &Kernel, points: &PointSet, w: &DenseMatrix, rows: Option<&[usize]>) -> Result<DenseMatrix> {
    kernel.validate()?;
    let n = points.len();
    if w.rows() != n {
        return Err(Error::invalid(format!("W has {} rows, expected {n}", w.rows())));
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    let q = w.cols();
    let cols: Vec<usize> = (0..n).collect();
    const TILE: usize = 64;
    let tiles: Vec<DenseMatrix> = rows
        .par_chunks(TILE)
        .map(|chunk| dense_block_unchecked(kernel, points, chunk, &cols).matmul(w))
        .collect::<Result<_>>()?;
    let mut out = DenseMatrix::zeros(rows.len(), q);
    for (t, tile) in tiles.iter().enumerate() {
        for c in 0..q {
            for r in 0..tile.rows() {
                out.set(t * TILE + r, c, tile.get(r, c));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorMode {
    /// Exact product over all rows; refused above [`DENSE_LIMIT`].
    Dense,
    /// Uniformly sampled rows without replacement (at least 256, or all rows).
    Sampled { rows: usize, seed: u64 },
}

/// `||Y - K W||_F / ||K W||_F` where `Y` is an approximate product.
///
/// The sampled estimator restricts both norms to the same random row subset.
/// An empty `W` has error 0 by convention.
pub fn relative_error(y: &DenseMatrix, kernel: &Kernel, points: &PointSet, w: &DenseMatrix, mode: ErrorMode) -> Result<f64> {
    let n = points.len();
    if y.rows() != n || y.cols() != w.cols() {
        return Err(Error::invalid("Y and W shapes disagree"));
    }
    if w.cols() == 0 {
        log::warn!("relative error of an empty product is taken as 0");
        return Ok(0.0);
    }
    match mode {
        ErrorMode::Dense => {
            if n > DENSE_LIMIT {
                return Err(Error::NumericGuard(format!(
                    "dense error needs n <= {DENSE_LIMIT}, got {n}; use sampled mode"
                )));
            }
            let exact = exact_product(kernel, points, w, None)?;
            Ok(relative_frobenius(y, &exact))
        }
        ErrorMode::Sampled { rows, seed } => {
            let m = rows.max(256).min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            let exact = exact_product(kernel, points, w, Some(&idx))?;
            let approx = DenseMatrix::from_fn(m, w.cols(), |r, c| y.get(idx[r], c));
            Ok(relative_frobenius(&approx, &exact))
        }
    }
}
