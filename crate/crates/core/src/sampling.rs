//! Nearest-neighbour based row sampling for low-rank approximation.
//!
//! Approximate k-NN lists come from random projection trees. Lists are merged
//! up the cluster tree, and each participating node draws its sample rows
//! from the neighbours of its points, weighted by how many of its points list
//! a candidate.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::interaction::HTree;
use crate::points::PointSet;
use crate::tree::{mix_seed, ClusterTree};

/// Approximate `k` nearest neighbours of every point, self excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborLists {
    k: usize,
    nbr: Vec<usize>,
}

impl NeighborLists {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.nbr[i * self.k..(i + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        self.nbr.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.nbr.is_empty()
    }
}

pub fn build_knn(points: &PointSet, k: usize, num_trees: usize, leaf_cap: usize, seed: u64) -> Result<NeighborLists> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must satisfy 1 <= k < n (k={k}, n={n})")));
    }
    if num_trees == 0 {
        return Err(Error::invalid("need at least one projection tree"));
    }
    let leaf_cap = leaf_cap.max(2);
    let leaves_per_tree: Vec<Vec<Vec<usize>>> = (0..num_trees)
        .into_par_iter()
        .map(|t| rp_tree_leaves(points, leaf_cap, mix_seed(seed, t as u64)))
        .collect();

    // leaf_of[t][p] = index of p's leaf in tree t
    let leaf_of: Vec<Vec<usize>> = leaves_per_tree
        .iter()
        .map(|leaves| {
            let mut owner = vec![0; n];
            for (li, leaf) in leaves.iter().enumerate() {
                for &p in leaf {
                    owner[p] = li;
                }
            }
            owner
        })
        .collect();

    let nbr: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut cand: Vec<usize> = Vec::new();
            for (t, leaves) in leaves_per_tree.iter().enumerate() {
                cand.extend(leaves[leaf_of[t][p]].iter().copied().filter(|&q| q != p));
            }
            cand.sort_unstable();
            cand.dedup();
            if cand.len() < k {
                // Tiny leaves; fall back to an exact scan for this point.
                cand = (0..n).filter(|&q| q != p).collect();
            }
            let mut scored: Vec<(f64, usize)> = cand.into_iter().map(|q| (points.dist2(p, q), q)).collect();
            scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.truncate(k);
            scored.into_iter().map(|(_, q)| q).collect()
        })
        .collect();
    Ok(NeighborLists {
        k,
        nbr: nbr.into_iter().flatten().collect(),
    })
}

/// Exact k-NN by brute force (ties by index). Debug oracle for small `n`.
pub fn exact_knn(points: &PointSet, k: usize) -> Result<NeighborLists> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must satisfy 1 <= k < n (k={k}, n={n})")));
    }
    let mut nbr = Vec::with_capacity(n * k);
    for p in 0..n {
        let mut scored: Vec<(f64, usize)> = (0..n).filter(|&q| q != p).map(|q| (points.dist2(p, q), q)).collect();
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        nbr.extend(scored.into_iter().take(k).map(|(_, q)| q));
    }
    Ok(NeighborLists { k, nbr })
}

/// Random projection tree: split at the median projection onto a random unit
/// direction until a leaf holds at most `leaf_cap` points.
fn rp_tree_leaves(points: &PointSet, leaf_cap: usize, seed: u64) -> Vec<Vec<usize>> {
    let d = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaves = Vec::new();
    let mut stack = vec![(0..points.len()).collect::<Vec<usize>>()];
    while let Some(mut idx) = stack.pop() {
        if idx.len() <= leaf_cap {
            leaves.push(idx);
            continue;
        }
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            dir.iter_mut().for_each(|v| *v /= norm);
        } else {
            dir[0] = 1.0;
        }
        let proj = |i: usize| -> f64 { points.point(i).iter().zip(&dir).map(|(x, y)| x * y).sum() };
        let mut keyed: Vec<(f64, usize)> = idx.iter().map(|&i| (proj(i), i)).collect();
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx = keyed.into_iter().map(|(_, i)| i).collect();
        let right = idx.split_off(idx.len().div_ceil(2));
        stack.push(right);
        stack.push(idx);
    }
    leaves
}

/// Candidate sample rows per node: `(point index, weight)` sorted by point
/// index, where weight counts member points listing the candidate.
pub type NodeCandidates = Vec<Vec<(usize, u32)>>;

/// Merges neighbour lists bottom-up. A node's list is the union of its
/// members' lists minus its own members.
pub fn merge_node_neighbors(tree: &ClusterTree, nbrs: &NeighborLists) -> NodeCandidates {
    let inv = tree.inverse_perm();
    let mut out: NodeCandidates = vec![Vec::new(); tree.num_nodes()];
    for depth in tree.nodes_by_depth().into_iter().rev() {
        let lists: Vec<(usize, Vec<(usize, u32)>)> = depth
            .par_iter()
            .map(|&i| {
                let node = tree.node(i);
                let outside = |p: &usize| !node.range().contains(&inv[*p]);
                let merged = match node.children {
                    None => {
                        let mut all: Vec<usize> = tree
                            .points_of(i)
                            .iter()
                            .flat_map(|&p| nbrs.of(p).iter().copied())
                            .filter(outside)
                            .collect();
                        all.sort_unstable();
                        let mut counted: Vec<(usize, u32)> = Vec::new();
                        for p in all {
                            match counted.last_mut() {
                                Some((q, w)) if *q == p => *w += 1,
                                _ => counted.push((p, 1)),
                            }
                        }
                        counted
                    }
                    Some((l, r)) => merge_sorted(&out[l], &out[r])
                        .into_iter()
                        .filter(|(p, _)| outside(p))
                        .collect(),
                };
                (i, merged)
            })
            .collect();
        for (i, l) in lists {
            out[i] = l;
        }
    }
    out
}

fn merge_sorted(a: &[(usize, u32)], b: &[(usize, u32)]) -> Vec<(usize, u32)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut x, mut y) = (0, 0);
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => {
                out.push(a[x]);
                x += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[y]);
                y += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push((a[x].0, a[x].1 + b[y].1));
                x += 1;
                y += 1;
            }
        }
    }
    out.extend_from_slice(&a[x..]);
    out.extend_from_slice(&b[y..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Importance sampling from merged neighbour lists.
    Neighbor,
    /// Every non-member row. Exact but quadratic; for small problems and tests.
    Exact,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbor" => Ok(SamplingMode::Neighbor),
            "exact" => Ok(SamplingMode::Exact),
            _ => Err(Error::invalid(format!("unknown sampling mode {s:?}"))),
        }
    }
}

/// Sample rows for one node. `members` must be the node's sorted point
/// indices; results are sorted point indices outside the node.
pub fn importance_sample(
    members: &[usize],
    n: usize,
    candidates: &[(usize, u32)],
    budget: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::invalid("sample budget must be at least 1"));
    }
    let is_member = |p: usize| members.binary_search(&p).is_ok();
    if mode == SamplingMode::Exact {
        return Ok((0..n).filter(|&p| !is_member(p)).collect());
    }
    let target = budget.min(n - members.len());
    let mut ranked: Vec<(usize, u32)> = candidates.iter().copied().filter(|&(p, _)| !is_member(p)).collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = ranked.iter().take(target).map(|&(p, _)| p).collect();
    chosen.sort_unstable();
    if chosen.len() < target {
        let need = target - chosen.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let available: Vec<usize> = (0..n)
            .filter(|&p| !is_member(p) && chosen.binary_search(&p).is_err())
            .collect();
        let picks = sample_indices(&mut rng, available.len(), need);
        chosen.extend(picks.into_iter().map(|i| available[i]));
        chosen.sort_unstable();
    }
    Ok(chosen)
}

/// Sample row indices per node; empty for nodes without a basis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleInfo {
    pub rows: Vec<Vec<usize>>,
}

impl SampleInfo {
    pub fn of(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.usize(self.rows.len());
        for r in &self.rows {
            e.usizes(r);
        }
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let num = d.usize()?;
        let rows = (0..num).map(|_| d.usizes()).collect::<Result<_>>()?;
        Ok(SampleInfo { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    /// Neighbours per point.
    pub k: usize,
    pub num_trees: usize,
    /// Projection-tree leaf capacity; `None` means `4 * k`.
    pub leaf_cap: Option<usize>,
    /// Sample rows per node.
    pub budget: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::Neighbor,
            k: 32,
            num_trees: 4,
            leaf_cap: None,
            budget: 512,
            seed: 0,
        }
    }
}

/// Sample rows for every participating node of `htree`.
pub fn sample_htree(points: &PointSet, htree: &HTree, cfg: &SamplingConfig) -> Result<SampleInfo> {
    let tree = &htree.tree;
    let n = points.len();
    let part = htree.participating();
    let candidates = match cfg.mode {
        SamplingMode::Exact => vec![Vec::new(); tree.num_nodes()],
        SamplingMode::Neighbor => {
            if n < 2 {
                vec![Vec::new(); tree.num_nodes()]
            } else {
                let k = cfg.k.min(n - 1);
                let nbrs = build_knn(points, k, cfg.num_trees, cfg.leaf_cap.unwrap_or(4 * k), cfg.seed)?;
                merge_node_neighbors(tree, &nbrs)
            }
        }
    };
    let rows = (0..tree.num_nodes())
        .into_par_iter()
        .map(|i| {
            if !part[i] {
                return Ok(Vec::new());
            }
            let mut members = tree.points_of(i).to_vec();
            members.sort_unstable();
            importance_sample(&members, n, &candidates[i], cfg.budget, mix_seed(cfg.seed ^ 0x5a5a, i as u64), cfg.mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleInfo { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::AdmissibilityMode;
    use crate::points::{synth_points, Shape};
    use crate::tree::SplitMethod;

    fn assert_valid(nl: &NeighborLists, n: usize) {
        for i in 0..n {
            let row = nl.of(i);
            assert!(!row.contains(&i));
            assert!(row.iter().all(|&j| j < n));
            let mut s = row.to_vec();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), row.len());
        }
    }

    #[test]
    fn collinear_three_points() {
        let p = PointSet::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let nl = build_knn(&p, 1, 4, 4, 0).unwrap();
        assert_eq!(nl.of(0), &[1]);
        assert_eq!(nl.of(2), &[1]);
        assert!(nl.of(1) == [0] || nl.of(1) == [2]);
        assert_eq!(nl, exact_knn(&p, 1).unwrap());
    }

    #[test]
    fn knn_argument_checks() {
        let p = synth_points(Shape::Grid2d, 4, 0).unwrap();
        assert!(build_knn(&p, 4, 1, 8, 0).is_err());
        assert!(build_knn(&p, 0, 1, 8, 0).is_err());
    }

    #[test]
    fn recall_against_brute_force() {
        let p = synth_points(Shape::UniformRandom { dim: 2 }, 512, 7).unwrap();
        let approx = build_knn(&p, 8, 4, 32, 1).unwrap();
        let exact = exact_knn(&p, 8).unwrap();
        assert_valid(&approx, 512);
        let mut hits = 0;
        for i in 0..512 {
            hits += approx.of(i).iter().filter(|j| exact.of(i).contains(j)).count();
        }
        let recall = hits as f64 / (512.0 * 8.0);
        assert!(recall >= 0.6, "recall {recall}");
    }

    #[test]
    fn duplicates_admitted_self_excluded() {
        let p = PointSet::new(4, 2, vec![0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 9.0, 9.0]).unwrap();
        let nl = build_knn(&p, 1, 2, 8, 3).unwrap();
        assert_eq!(nl.of(0), &[1]);
        assert_eq!(nl.of(1), &[0]);
    }

    #[test]
    fn knn_is_deterministic() {
        let p = synth_points(Shape::UniformRandom { dim: 5 }, 800, 1).unwrap();
        let a = build_knn(&p, 6, 3, 24, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| build_knn(&p, 6, 3, 24, 11).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn importance_sample_contract() {
        let members: Vec<usize> = (0..10).collect();
        let cands: Vec<(usize, u32)> = (10..40).map(|p| (p, (p % 7) as u32)).collect();
        let s = importance_sample(&members, 100, &cands, 12, 0, SamplingMode::Neighbor).unwrap();
        assert_eq!(s.len(), 12);
        assert!(s.iter().all(|p| cands.iter().any(|c| c.0 == *p)));
        // Highest weights come first: weight 6 at 13, 20, 27, 34.
        for p in [13, 20, 27, 34] {
            assert!(s.contains(&p));
        }

        let s = importance_sample(&members, 100, &[], 12, 0, SamplingMode::Neighbor).unwrap();
        assert_eq!(s.len(), 12);
        assert!(s.iter().all(|&p| p >= 10));
        assert_eq!(s, importance_sample(&members, 100, &[], 12, 0, SamplingMode::Neighbor).unwrap());

        let s = importance_sample(&members, 15, &[], 12, 0, SamplingMode::Neighbor).unwrap();
        assert_eq!(s, vec![10, 11, 12, 13, 14]);

        assert!(importance_sample(&members, 100, &[], 0, 0, SamplingMode::Neighbor).is_err());
    }

    #[test]
    fn exact_mode_takes_complement() {
        let members: Vec<usize> = (16..32).collect();
        let s = importance_sample(&members, 64, &[], 1, 0, SamplingMode::Exact).unwrap();
        assert_eq!(s.len(), 48);
        assert!(s.iter().all(|p| !members.contains(p)));
    }

    #[test]
    fn merged_lists_exclude_members() {
        let p = synth_points(Shape::UniformRandom { dim: 2 }, 600, 4).unwrap();
        let t = ClusterTree::build(&p, 40, SplitMethod::Auto, 0).unwrap();
        let nl = build_knn(&p, 8, 4, 32, 2).unwrap();
        let merged = merge_node_neighbors(&t, &nl);
        for i in 0..t.num_nodes() {
            let members: std::collections::HashSet<usize> = t.points_of(i).iter().copied().collect();
            assert!(merged[i].iter().all(|(q, w)| !members.contains(q) && *w >= 1));
            assert!(merged[i].windows(2).all(|w| w[0].0 < w[1].0));
            // Brute-force the leaf-level union.
            if t.node(i).is_leaf() {
                let mut want: Vec<usize> = members
                    .iter()
                    .flat_map(|&m| nl.of(m).iter().copied())
                    .filter(|q| !members.contains(q))
                    .collect();
                want.sort_unstable();
                want.dedup();
                let got: Vec<usize> = merged[i].iter().map(|c| c.0).collect();
                assert_eq!(got, want);
            }
        }
        assert!(merged[0].is_empty());
    }

    #[test]
    fn node_samples_disjoint_from_members() {
        let p = synth_points(Shape::UniformRandom { dim: 2 }, 900, 4).unwrap();
        let t = ClusterTree::build(&p, 50, SplitMethod::Auto, 0).unwrap();
        let h = HTree::build(&p, t, AdmissibilityMode::Tau(0.65)).unwrap();
        let cfg = SamplingConfig {
            budget: 64,
            ..Default::default()
        };
        let s = sample_htree(&p, &h, &cfg).unwrap();
        let part = h.participating();
        for i in 0..h.num_nodes() {
            let members: std::collections::HashSet<usize> = h.tree.points_of(i).iter().copied().collect();
            assert!(s.of(i).iter().all(|q| !members.contains(q)));
            if part[i] {
                assert_eq!(s.of(i).len(), 64.min(900 - members.len()));
            } else {
                assert!(s.of(i).is_empty());
            }
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        assert_eq!(pool.install(|| sample_htree(&p, &h, &cfg).unwrap()), s);
    }
}
