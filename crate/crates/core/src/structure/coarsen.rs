//! Load-balanced level coarsening of the cluster tree.
//!
//! Node heights (distance to the deepest leaf below) are banded into coarsen
//! levels of `agg` consecutive heights, counted from the leaves. Each level is
//! split into disjoint sub-trees (stored in post-order), which are then merged
//! into at most `p` partitions by first-fit-decreasing bin packing on a
//! rank-based cost. Partitions of one level are independent; levels run in
//! order with a barrier in between.

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tree::ClusterTree;

/// A unit of parallel work: one or more disjoint sub-trees.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Roots of the merged sub-trees, ascending.
    pub roots: Vec<usize>,
    /// Post-ordered node ids (children before parents).
    pub nodes: Vec<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoarsenLevel {
    pub partitions: Vec<Partition>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoarsenSet {
    /// Leaves first, root last.
    pub levels: Vec<CoarsenLevel>,
    pub agg: usize,
    pub p: usize,
}

impl CoarsenSet {
    /// Node ids in storage order: level by level, partition by partition.
    pub fn traversal(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels
            .iter()
            .flat_map(|l| &l.partitions)
            .flat_map(|p| p.nodes.iter().copied())
    }

    pub fn num_nodes(&self) -> usize {
        self.traversal().count()
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.usize(self.agg);
        e.usize(self.p);
        e.usize(self.levels.len());
        for level in &self.levels {
            e.usize(level.partitions.len());
            for part in &level.partitions {
                e.usizes(&part.roots);
                e.usizes(&part.nodes);
                e.f64(part.cost);
            }
        }
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let agg = d.usize()?;
        let p = d.usize()?;
        let nl = d.usize()?;
        let mut levels = Vec::with_capacity(nl.min(1 << 16));
        for _ in 0..nl {
            let np = d.usize()?;
            let mut partitions = Vec::with_capacity(np.min(1 << 16));
            for _ in 0..np {
                partitions.push(Partition {
                    roots: d.usizes()?,
                    nodes: d.usizes()?,
                    cost: d.f64()?,
                });
            }
            levels.push(CoarsenLevel { partitions });
        }
        Ok(CoarsenSet { levels, agg, p })
    }
}

/// Flop proxy for one node of the upward pass: `m * srank * q` for a leaf of
/// `m` points, `(srank(lc) + srank(rc)) * srank * q` for an internal node.
pub fn node_cost(tree: &ClusterTree, node: usize, sranks: &[usize], q: f64) -> f64 {
    let n = tree.node(node);
    let width = match n.children {
        None => n.len(),
        Some((l, r)) => sranks[l] + sranks[r],
    };
    width as f64 * sranks[node] as f64 * q
}

/// A disjoint sub-tree of one coarsen level.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTree {
    pub root: usize,
    pub nodes: Vec<usize>,
    pub cost: f64,
}

/// Disjoint sub-trees per coarsen level, before merging.
pub fn disjoint_subtrees(
    tree: &ClusterTree,
    sranks: &[usize],
    participating: &[bool],
    agg: usize,
    q: f64,
) -> Result<Vec<Vec<SubTree>>> {
    if agg == 0 {
        return Err(Error::invalid("agg must be at least 1"));
    }
    let num = tree.num_nodes();
    if sranks.len() != num || participating.len() != num {
        return Err(Error::invalid("srank/participation vectors must match the tree"));
    }
    let num_levels = tree.height().div_ceil(agg).max(1);
    let level_of = |i: usize| (tree.node_height(i) / agg).min(num_levels - 1);
    let mut levels: Vec<Vec<SubTree>> = vec![Vec::new(); num_levels];
    for root in 0..num {
        if !participating[root] {
            continue;
        }
        let lv = level_of(root);
        let is_root = match tree.node(root).parent {
            Some(p) => !participating[p] || level_of(p) != lv,
            None => true,
        };
        if !is_root {
            continue;
        }
        let mut nodes = Vec::new();
        post_order(tree, root, &|c| participating[c] && level_of(c) == lv, &mut nodes);
        let cost = nodes.iter().map(|&i| node_cost(tree, i, sranks, q)).sum();
        levels[lv].push(SubTree { root, nodes, cost });
    }
    Ok(levels)
}

fn post_order(tree: &ClusterTree, root: usize, keep: &dyn Fn(usize) -> bool, out: &mut Vec<usize>) {
    // Iterative: (node, children_done)
    let mut stack = vec![(root, false)];
    while let Some((i, done)) = stack.pop() {
        if done {
            out.push(i);
            continue;
        }
        stack.push((i, true));
        if let Some((l, r)) = tree.node(i).children {
            for c in [r, l] {
                if keep(c) {
                    stack.push((c, false));
                }
            }
        }
    }
}

/// Coarsens the participating part of `tree` into a [`CoarsenSet`].
pub fn coarsening(
    tree: &ClusterTree,
    sranks: &[usize],
    participating: &[bool],
    p: usize,
    agg: usize,
    q: f64,
) -> Result<CoarsenSet> {
    if p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    let subtrees = disjoint_subtrees(tree, sranks, participating, agg, q)?;
    let mut levels = Vec::with_capacity(subtrees.len());
    for cl in subtrees {
        if cl.is_empty() {
            continue;
        }
        let n_part = if cl.len() > p { p } else { (cl.len() / 2).max(1) };
        let costs: Vec<(usize, f64)> = cl.iter().map(|s| (s.root, s.cost)).collect();
        let bins = bin_pack(&costs, n_part);
        let partitions = bins
            .into_iter()
            .map(|mut members| {
                members.sort_unstable_by_key(|&k| cl[k].root);
                Partition {
                    roots: members.iter().map(|&k| cl[k].root).collect(),
                    nodes: members.iter().flat_map(|&k| cl[k].nodes.iter().copied()).collect(),
                    cost: members.iter().map(|&k| cl[k].cost).sum(),
                }
            })
            .collect();
        levels.push(CoarsenLevel { partitions });
    }
    Ok(CoarsenSet { levels, agg, p })
}

/// First-fit-decreasing packing of `(id, cost)` items into at most `n_part`
/// bins. Items are sorted by descending cost (ties by ascending id); the bin
/// capacity is `max(largest cost, ceil(total / n_part))`. An item that fits
/// nowhere goes to the least-loaded bin. With all costs zero the items are
/// dealt round-robin. Returns item positions per non-empty bin.
pub fn bin_pack(items: &[(usize, f64)], n_part: usize) -> Vec<Vec<usize>> {
    let n_part = n_part.max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1).then(items[a].0.cmp(&items[b].0)));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_part];
    let total: f64 = items.iter().map(|i| i.1).sum();
    if total <= 0.0 {
        for (k, &it) in order.iter().enumerate() {
            bins[k % n_part].push(it);
        }
    } else {
        let largest = items.iter().map(|i| i.1).fold(0.0, f64::max);
        let capacity = largest.max((total / n_part as f64).ceil());
        let mut load = vec![0.0; n_part];
        for &it in &order {
            let c = items[it].1;
            let slot = (0..n_part).find(|&b| load[b] + c <= capacity).unwrap_or_else(|| {
                (0..n_part)
                    .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
                    .unwrap()
            });
            load[slot] += c;
            bins[slot].push(it);
        }
    }
    bins.retain(|b| !b.is_empty());
    bins
}
