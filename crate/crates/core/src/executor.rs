//! Plan-driven evaluation of `Y = K~ W` over a [`Cds`].
//!
//! Four passes, each a barrier:
//!
//! 1. upward: `T_i = V_i^T W_i` at leaves, `T_i = V_i^T [T_lc; T_rc]` above;
//! 2. far: `S_i += B_ij T_j`;
//! 3. downward: `[S_lc; S_rc] += V_i S_i`, and `Y_i += V_i S_i` at leaves;
//! 4. near: `Y_i += D_ij W_j`.
//!
//! Every output buffer has a single writer within a pass and each task adds
//! its terms in a fixed order, so results do not depend on the worker count.
//! Work happens in tree order; `W` is gathered through the permutation on
//! entry and `Y` scattered back on exit.

use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, Gemm, PortableGemm};
use crate::plan::EvalPlan;
use crate::structure::Cds;

/// Wall time of each pass of one evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalStats {
    pub upward: Duration,
    pub far: Duration,
    pub downward: Duration,
    pub near: Duration,
}

impl EvalStats {
    pub fn total(&self) -> Duration {
        self.upward + self.far + self.downward + self.near
    }
}

pub struct Executor {
    cds: Cds,
    plan: EvalPlan,
    pool: rayon::ThreadPool,
    gemm: Arc<dyn Gemm>,
    /// Tree levels of basis nodes for the level-by-level schedule, leaves first.
    height_levels: Vec<Vec<usize>>,
    /// First generator slot of each blockset row.
    near_row_slot: Vec<usize>,
    far_row_slot: Vec<usize>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("plan", &self.plan).finish_non_exhaustive()
    }
}

type Buf = Mutex<Vec<f64>>;

/// Per-evaluation intermediates.
struct Work<'a> {
    q: usize,
    /// `W` in tree order, row-major.
    w: &'a [f64],
    t: Vec<OnceLock<Vec<f64>>>,
    s: Vec<Buf>,
    /// Output rows per leaf, row-major.
    y: Vec<Buf>,
}

fn row_slots(bs: &crate::structure::BlockSet) -> Vec<usize> {
    let mut acc = 0;
    bs.rows
        .iter()
        .map(|r| {
            let start = acc;
            acc += r.blocks.iter().map(|b| b.pairs.len()).sum::<usize>();
            start
        })
        .collect()
}

impl Executor {
    pub fn new(cds: Cds, plan: EvalPlan) -> Result<Self> {
        Self::with_gemm(cds, plan, Arc::new(PortableGemm))
    }

    pub fn with_gemm(cds: Cds, plan: EvalPlan, gemm: Arc<dyn Gemm>) -> Result<Self> {
        check_structure(&cds)?;
        let pool = build_pool(plan.workers)?;
        let tree = &cds.tree;
        let mut height_levels = vec![Vec::new(); tree.height() + 1];
        for i in 0..tree.num_nodes() {
            if cds.has_basis(i) {
                height_levels[tree.node_height(i)].push(i);
            }
        }
        height_levels.retain(|l| !l.is_empty());
        let near_row_slot = row_slots(&cds.near);
        let far_row_slot = row_slots(&cds.far);
        Ok(Executor {
            cds,
            plan,
            pool,
            gemm,
            height_levels,
            near_row_slot,
            far_row_slot,
        })
    }

    pub fn cds(&self) -> &Cds {
        &self.cds
    }

    pub fn plan(&self) -> &EvalPlan {
        &self.plan
    }

    /// Replaces the plan, rebuilding the worker pool if the count changed.
    pub fn set_plan(&mut self, plan: EvalPlan) -> Result<()> {
        if plan.workers != self.plan.workers {
            self.pool = build_pool(plan.workers)?;
        }
        self.plan = plan;
        Ok(())
    }

    pub fn evaluate(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        self.evaluate_with_stats(w).map(|(y, _)| y)
    }

    pub fn evaluate_with_stats(&self, w: &DenseMatrix) -> Result<(DenseMatrix, EvalStats)> {
        let n = self.cds.n;
        if w.rows() != n {
            return Err(Error::invalid(format!("W has {} rows, expected {n}", w.rows())));
        }
        let q = w.cols();
        if q == 0 {
            return Ok((DenseMatrix::zeros(n, 0), EvalStats::default()));
        }
        let perm = self.cds.tree.perm();
        let mut wp = vec![0.0; n * q];
        for (k, row) in wp.chunks_exact_mut(q).enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                *x = w.get(perm[k], c);
            }
        }
        let (yp, stats) = self.pool.install(|| self.run(&wp, q));
        let mut out = DenseMatrix::zeros(n, q);
        for (k, row) in yp.chunks_exact(q).enumerate() {
            for (c, &x) in row.iter().enumerate() {
                out.set(perm[k], c, x);
            }
        }
        Ok((out, stats))
    }

    fn run(&self, w: &[f64], q: usize) -> (Vec<f64>, EvalStats) {
        let cds = &self.cds;
        let tree = &cds.tree;
        let num = tree.num_nodes();
        let work = Work {
            q,
            w,
            t: (0..num).map(|_| OnceLock::new()).collect(),
            s: (0..num)
                .map(|i| Mutex::new(vec![0.0; if cds.has_basis(i) { cds.sranks[i] * q } else { 0 }]))
                .collect(),
            y: (0..num)
                .map(|i| {
                    let node = tree.node(i);
                    Mutex::new(vec![0.0; if node.is_leaf() { node.len() * q } else { 0 }])
                })
                .collect(),
        };
        let mut stats = EvalStats::default();

        let t0 = Instant::now();
        self.tree_pass(&work, true);
        stats.upward = t0.elapsed();

        let t0 = Instant::now();
        if self.plan.block_lowering_far {
            self.far_blocked(&work);
        } else {
            self.far_flat(&work);
        }
        stats.far = t0.elapsed();

        let t0 = Instant::now();
        self.tree_pass(&work, false);
        stats.downward = t0.elapsed();

        let t0 = Instant::now();
        if self.plan.block_lowering_near {
            self.near_blocked(&work);
        } else {
            self.near_flat(&work);
        }
        stats.near = t0.elapsed();

        let mut y = vec![0.0; cds.n * q];
        for leaf in tree.leaves() {
            let r = tree.node(leaf).range();
            y[r.start * q..r.end * q].copy_from_slice(&work.y[leaf].lock().unwrap());
        }
        (y, stats)
    }

    /// Upward (`up`) or downward pass over the coarsenset or tree levels.
    fn tree_pass(&self, work: &Work<'_>, up: bool) {
        let visit = |i: usize, peel: bool| {
            if up {
                self.up_node(work, i, peel)
            } else {
                self.down_node(work, i, peel)
            }
        };
        if self.plan.coarsen_lowering {
            let levels = &self.cds.coarsen.levels;
            let last = levels.len().saturating_sub(1);
            let order: Box<dyn Iterator<Item = (usize, &crate::structure::CoarsenLevel)>> = if up {
                Box::new(levels.iter().enumerate())
            } else {
                Box::new(levels.iter().enumerate().rev())
            };
            for (li, level) in order {
                if self.plan.peel_top && li == last {
                    let nodes: Vec<usize> = level.partitions.iter().flat_map(|p| p.nodes.iter().copied()).collect();
                    for_each_ordered(&nodes, up, |i| visit(i, true));
                } else {
                    level
                        .partitions
                        .par_iter()
                        .for_each(|p| for_each_ordered(&p.nodes, up, |i| visit(i, false)));
                }
            }
        } else {
            let levels = &self.height_levels;
            let last = levels.len().saturating_sub(1);
            let order: Vec<usize> = if up { (0..levels.len()).collect() } else { (0..levels.len()).rev().collect() };
            for li in order {
                if self.plan.peel_top && li == last {
                    levels[li].iter().for_each(|&i| visit(i, true));
                } else {
                    levels[li].par_iter().for_each(|&i| visit(i, false));
                }
            }
        }
    }

    fn up_node(&self, work: &Work<'_>, i: usize, peel: bool) {
        let cds = &self.cds;
        let q = work.q;
        let v = cds.v_slice(i).expect("basis node");
        let sr = cds.sranks[i];
        let width = cds.v_width(i);
        let mut t = vec![0.0; sr * q];
        match cds.tree.node(i).children {
            None => {
                let r = cds.tree.node(i).range();
                let b = &work.w[r.start * q..r.end * q];
                self.tn_rows(v, width, sr, 0, width, b, q, &mut t, peel);
            }
            Some((l, rc)) => {
                let srl = cds.sranks[l];
                let tl = work.t[l].get().expect("child T computed");
                let tr = work.t[rc].get().expect("child T computed");
                self.tn_rows(v, width, sr, 0, srl, tl, q, &mut t, peel);
                self.tn_rows(v, width, sr, srl, width - srl, tr, q, &mut t, peel);
            }
        }
        work.t[i].set(t).expect("T written once");
    }

    fn down_node(&self, work: &Work<'_>, i: usize, peel: bool) {
        let cds = &self.cds;
        let q = work.q;
        let v = cds.v_slice(i).expect("basis node");
        let width = cds.v_width(i);
        let sr = cds.sranks[i];
        let s = work.s[i].lock().unwrap();
        match cds.tree.node(i).children {
            None => {
                let mut y = work.y[i].lock().unwrap();
                self.nn_rows(v, width, width, sr, &s, q, &mut y, peel);
            }
            Some((l, r)) => {
                let srl = cds.sranks[l];
                let mut sl = work.s[l].lock().unwrap();
                self.nn_rows(v, width, srl, sr, &s, q, &mut sl, peel);
                drop(sl);
                let mut sr_buf = work.s[r].lock().unwrap();
                self.nn_rows(&v[srl..], width, width - srl, sr, &s, q, &mut sr_buf, peel);
            }
        }
    }

    /// `c += A[k0..k0+inner, :]^T b` for `A` column-major with leading
    /// dimension `lda` and `rows` columns; row-split across workers when `peel`.
    #[allow(clippy::too_many_arguments)]
    fn tn_rows(&self, a: &[f64], lda: usize, rows: usize, k0: usize, inner: usize, b: &[f64], q: usize, c: &mut [f64], peel: bool) {
        if rows == 0 || inner == 0 {
            return;
        }
        let a = &a[k0..];
        if !peel {
            self.gemm.tn(a, lda, rows, inner, b, q, c);
            return;
        }
        let chunk = rows.div_ceil(self.plan.workers.max(1));
        c[..rows * q].par_chunks_mut(chunk * q).enumerate().for_each(|(ci, cc)| {
            let r0 = ci * chunk;
            self.gemm.tn(&a[r0 * lda..], lda, cc.len() / q, inner, b, q, cc);
        });
    }

    /// `c += A b` for the `rows x inner` column-major `A` (leading dimension `lda`).
    #[allow(clippy::too_many_arguments)]
    fn nn_rows(&self, a: &[f64], lda: usize, rows: usize, inner: usize, b: &[f64], q: usize, c: &mut [f64], peel: bool) {
        if rows == 0 || inner == 0 {
            return;
        }
        if !peel {
            self.gemm.nn(a, lda, rows, inner, b, q, c);
            return;
        }
        let chunk = rows.div_ceil(self.plan.workers.max(1));
        c[..rows * q].par_chunks_mut(chunk * q).enumerate().for_each(|(ci, cc)| {
            let r0 = ci * chunk;
            self.gemm.nn(&a[r0..], lda, cc.len() / q, inner, b, q, cc);
        });
    }

    fn far_product(&self, work: &Work<'_>, slot: usize, i: usize, j: usize, c: &mut [f64]) {
        let (sri, srj) = (self.cds.sranks[i], self.cds.sranks[j]);
        let t = work.t[j].get().expect("far source T computed");
        self.gemm.nn(self.cds.b_slice(slot), sri, sri, srj, t, work.q, c);
    }

    fn near_product(&self, work: &Work<'_>, slot: usize, i: usize, j: usize, c: &mut [f64]) {
        let tree = &self.cds.tree;
        let (mi, rj) = (tree.node(i).len(), tree.node(j).range());
        let q = work.q;
        self.gemm.nn(self.cds.d_slice(slot), mi, mi, rj.len(), &work.w[rj.start * q..rj.end * q], q, c);
    }

    fn far_blocked(&self, work: &Work<'_>) {
        let bs = &self.cds.far;
        bs.rows.par_iter().zip(&self.far_row_slot).for_each(|(row, &first)| {
            for (slot, &(i, j)) in (first..).zip(row.blocks.iter().flat_map(|b| &b.pairs)) {
                let mut s = work.s[i].lock().unwrap();
                self.far_product(work, slot, i, j, &mut s);
            }
        });
    }

    fn near_blocked(&self, work: &Work<'_>) {
        let bs = &self.cds.near;
        bs.rows.par_iter().zip(&self.near_row_slot).for_each(|(row, &first)| {
            for (slot, &(i, j)) in (first..).zip(row.blocks.iter().flat_map(|b| &b.pairs)) {
                let mut y = work.y[i].lock().unwrap();
                self.near_product(work, slot, i, j, &mut y);
            }
        });
    }

    /// Flat loop over pairs into private partials, then a per-target merge in
    /// pair order.
    fn far_flat(&self, work: &Work<'_>) {
        let pairs: Vec<(usize, usize)> = self.cds.far.pairs().collect();
        let partials: Vec<Vec<f64>> = pairs
            .par_iter()
            .enumerate()
            .map(|(slot, &(i, j))| {
                let mut p = vec![0.0; self.cds.sranks[i] * work.q];
                self.far_product(work, slot, i, j, &mut p);
                p
            })
            .collect();
        merge_partials(&pairs, &partials, &work.s);
    }

    fn near_flat(&self, work: &Work<'_>) {
        let pairs: Vec<(usize, usize)> = self.cds.near.pairs().collect();
        let partials: Vec<Vec<f64>> = pairs
            .par_iter()
            .enumerate()
            .map(|(slot, &(i, j))| {
                let mut p = vec![0.0; self.cds.tree.node(i).len() * work.q];
                self.near_product(work, slot, i, j, &mut p);
                p
            })
            .collect();
        merge_partials(&pairs, &partials, &work.y);
    }
}

fn merge_partials(pairs: &[(usize, usize)], partials: &[Vec<f64>], out: &[Buf]) {
    let mut by_target: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&k| (pairs[k].0, k));
    for k in order {
        match by_target.last_mut() {
            Some((i, ks)) if *i == pairs[k].0 => ks.push(k),
            _ => by_target.push((pairs[k].0, vec![k])),
        }
    }
    by_target.par_iter().for_each(|(i, ks)| {
        let mut dst = out[*i].lock().unwrap();
        for &k in ks {
            for (d, s) in dst.iter_mut().zip(&partials[k]) {
                *d += s;
            }
        }
    });
}

fn for_each_ordered(nodes: &[usize], forward: bool, mut f: impl FnMut(usize)) {
    if forward {
        nodes.iter().for_each(|&i| f(i));
    } else {
        nodes.iter().rev().for_each(|&i| f(i));
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

/// Preconditions the passes rely on instead of re-checking per node.
fn check_structure(cds: &Cds) -> Result<()> {
    let tree = &cds.tree;
    for i in 0..tree.num_nodes() {
        if !cds.has_basis(i) {
            continue;
        }
        if let Some((l, r)) = tree.node(i).children {
            if !cds.has_basis(l) || !cds.has_basis(r) {
                return Err(Error::Consistency(format!("node {i} has a basis but a child does not")));
            }
        }
    }
    for (i, j) in cds.far.pairs() {
        if !cds.has_basis(i) || !cds.has_basis(j) {
            return Err(Error::Consistency(format!("far pair ({i}, {j}) without bases")));
        }
    }
    for (i, j) in cds.near.pairs() {
        if !tree.node(i).is_leaf() || !tree.node(j).is_leaf() {
            return Err(Error::Consistency(format!("near pair ({i}, {j}) is not between leaves")));
        }
    }
    // Coarsen traversal and height levels cover the same nodes; the
    // schedule must put children before parents.
    let mut done = vec![false; tree.num_nodes()];
    for level in &cds.coarsen.levels {
        let level_nodes: Vec<usize> = level.partitions.iter().flat_map(|p| p.nodes.iter().copied()).collect();
        for p in &level.partitions {
            let mut local = std::collections::HashSet::new();
            for &i in &p.nodes {
                if let Some((l, r)) = tree.node(i).children {
                    if !(done[l] || local.contains(&l)) || !(done[r] || local.contains(&r)) {
                        return Err(Error::Consistency(format!("coarsenset visits node {i} before its children")));
                    }
                }
                local.insert(i);
            }
        }
        for i in level_nodes {
            done[i] = true;
        }
    }
    Ok(())
}
