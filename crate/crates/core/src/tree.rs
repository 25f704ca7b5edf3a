//! Binary cluster tree over a point set.
//!
//! Nodes are numbered breadth-first from the root (id 0), so children always
//! have larger ids than their parent and siblings get consecutive ids. Each
//! node owns a contiguous range of the permutation `perm`.

use std::collections::VecDeque;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::points::{sq_dist, PointSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitMethod {
    /// kd-tree for `d <= 3`, two-means otherwise.
    Auto,
    KdTree,
    TwoMeans,
}

impl std::str::FromStr for SplitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SplitMethod::Auto),
            "kdtree" => Ok(SplitMethod::KdTree),
            "twomeans" => Ok(SplitMethod::TwoMeans),
            _ => Err(Error::invalid(format!("unknown split method {s:?}"))),
        }
    }
}

impl std::fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMethod::Auto => "auto",
            SplitMethod::KdTree => "kdtree",
            SplitMethod::TwoMeans => "twomeans",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub children: Option<(usize, usize)>,
    pub start: usize,
    pub end: usize,
    /// Depth from the root.
    pub level: usize,
}

impl TreeNode {
    #[inline]
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    #[inline]
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTree {
    nodes: Vec<TreeNode>,
    perm: Vec<usize>,
    leaf_size: usize,
    height: usize,
    /// Distance from each node to its deepest descendant leaf.
    node_heights: Vec<usize>,
}

impl ClusterTree {
    pub fn build(points: &PointSet, leaf_size: usize, method: SplitMethod, seed: u64) -> Result<Self> {
        if leaf_size == 0 {
            return Err(Error::invalid("leaf size must be at least 1"));
        }
        let n = points.len();
        let method = match method {
            SplitMethod::Auto if points.dim() <= 3 => SplitMethod::KdTree,
            SplitMethod::Auto => SplitMethod::TwoMeans,
            m => m,
        };
        let mut perm: Vec<usize> = (0..n).collect();
        let mut nodes = vec![TreeNode {
            parent: None,
            children: None,
            start: 0,
            end: n,
            level: 0,
        }];
        let mut queue = VecDeque::from([0usize]);
        while let Some(id) = queue.pop_front() {
            let node = nodes[id];
            if node.len() <= leaf_size {
                continue;
            }
            let slice = &mut perm[node.range()];
            let left_len = match method {
                SplitMethod::TwoMeans => two_means_split(points, slice, node_seed(seed, id)),
                _ => kd_split(points, slice),
            };
            let mid = node.start + left_len;
            let lc = nodes.len();
            nodes[id].children = Some((lc, lc + 1));
            for (start, end) in [(node.start, mid), (mid, node.end)] {
                nodes.push(TreeNode {
                    parent: Some(id),
                    children: None,
                    start,
                    end,
                    level: node.level + 1,
                });
            }
            queue.push_back(lc);
            queue.push_back(lc + 1);
        }
        Self::finish(nodes, perm, leaf_size)
    }

    /// Builds a tree from explicit topology. `children[i]` lists the two
    /// children of node `i` (`None` for leaves) and `leaf_sizes` gives the
    /// point count of every leaf in id order. Ids must be breadth-first.
    /// The permutation is the identity.
    pub fn from_children(children: &[Option<(usize, usize)>], leaf_sizes: &[usize], leaf_size: usize) -> Result<Self> {
        let num = children.len();
        if num == 0 {
            return Err(Error::invalid("tree needs at least a root"));
        }
        let mut parent = vec![None; num];
        for (i, c) in children.iter().enumerate() {
            if let Some((l, r)) = *c {
                if l <= i || r <= i || l >= num || r >= num || l == r {
                    return Err(Error::invalid(format!("bad children ({l}, {r}) for node {i}")));
                }
                for ch in [l, r] {
                    if parent[ch].replace(i).is_some() {
                        return Err(Error::invalid(format!("node {ch} has two parents")));
                    }
                }
            }
        }
        if (1..num).any(|i| parent[i].is_none()) {
            return Err(Error::invalid("tree topology is not connected"));
        }
        let leaves: Vec<usize> = (0..num).filter(|&i| children[i].is_none()).collect();
        if leaves.len() != leaf_sizes.len() {
            return Err(Error::invalid("one size per leaf required"));
        }
        // Depth-first, left before right, to lay out contiguous ranges.
        let mut size = vec![0usize; num];
        for (&leaf, &s) in leaves.iter().zip(leaf_sizes) {
            size[leaf] = s;
        }
        for i in (0..num).rev() {
            if let Some((l, r)) = children[i] {
                size[i] = size[l] + size[r];
            }
        }
        let mut nodes = vec![
            TreeNode {
                parent: None,
                children: None,
                start: 0,
                end: 0,
                level: 0,
            };
            num
        ];
        let mut stack = vec![(0usize, 0usize, 0usize)];
        while let Some((i, start, level)) = stack.pop() {
            nodes[i] = TreeNode {
                parent: parent[i],
                children: children[i],
                start,
                end: start + size[i],
                level,
            };
            if let Some((l, r)) = children[i] {
                stack.push((r, start + size[l], level + 1));
                stack.push((l, start, level + 1));
            }
        }
        let perm = (0..size[0]).collect();
        Self::finish(nodes, perm, leaf_size)
    }

    fn finish(nodes: Vec<TreeNode>, perm: Vec<usize>, leaf_size: usize) -> Result<Self> {
        let mut node_heights = vec![0usize; nodes.len()];
        for i in (0..nodes.len()).rev() {
            if let Some((l, r)) = nodes[i].children {
                node_heights[i] = 1 + node_heights[l].max(node_heights[r]);
            }
        }
        let height = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        Ok(ClusterTree {
            nodes,
            perm,
            leaf_size,
            height,
            node_heights,
        })
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn num_points(&self) -> usize {
        self.perm.len()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Maximum depth of any node.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Distance from node `i` to its deepest descendant leaf.
    pub fn node_height(&self, i: usize) -> usize {
        self.node_heights[i]
    }

    /// Original point indices owned by node `i`.
    pub fn points_of(&self, i: usize) -> &[usize] {
        &self.perm[self.nodes[i].range()]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn is_ancestor(&self, anc: usize, mut node: usize) -> bool {
        while let Some(p) = self.nodes[node].parent {
            if p == anc {
                return true;
            }
            node = p;
        }
        false
    }

    /// `inv[p]` = position of point `p` in `perm`.
    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (pos, &p) in self.perm.iter().enumerate() {
            inv[p] = pos;
        }
        inv
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.usize(self.leaf_size);
        e.usize(self.nodes.len());
        for n in &self.nodes {
            e.usize(n.parent.unwrap_or(crate::NONE));
            let (l, r) = n.children.unwrap_or((crate::NONE, crate::NONE));
            e.usize(l);
            e.usize(r);
            e.usize(n.start);
            e.usize(n.end);
            e.usize(n.level);
        }
        e.usizes(&self.perm);
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let leaf_size = d.usize()?;
        let num = d.usize()?;
        if num == 0 || num > (1 << 40) {
            return Err(Error::Format(format!("tree with {num} nodes")));
        }
        let opt = |v: usize| (v != crate::NONE).then_some(v);
        let mut nodes = Vec::with_capacity(num.min(1 << 20));
        for _ in 0..num {
            let parent = opt(d.usize()?);
            let l = d.usize()?;
            let r = d.usize()?;
            let children = opt(l).zip(opt(r));
            nodes.push(TreeNode {
                parent,
                children,
                start: d.usize()?,
                end: d.usize()?,
                level: d.usize()?,
            });
        }
        let perm = d.usizes()?;
        let tree = Self::finish(nodes, perm, leaf_size)?;
        tree.validate().map_err(|e| Error::Format(format!("tree: {e}")))?;
        Ok(tree)
    }

    /// Structural invariants: contiguous child ranges, BFS-compatible ids,
    /// leaf iff size <= leaf size (for built trees), bijective permutation.
    pub fn validate(&self) -> Result<()> {
        let n = self.perm.len();
        let root = &self.nodes[0];
        if root.start != 0 || root.end != n || root.parent.is_some() {
            return Err(Error::Internal("root must cover [0, n)".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.start > node.end || node.end > n {
                return Err(Error::Internal(format!("node {i} has a bad range")));
            }
            if let Some((l, r)) = node.children {
                if l <= i || r <= i || l >= self.nodes.len() || r >= self.nodes.len() {
                    return Err(Error::Internal(format!("node {i} children ids invalid")));
                }
                let (ln, rn) = (&self.nodes[l], &self.nodes[r]);
                if ln.start != node.start || ln.end != rn.start || rn.end != node.end {
                    return Err(Error::Internal(format!("node {i} children do not tile its range")));
                }
                if ln.parent != Some(i) || rn.parent != Some(i) {
                    return Err(Error::Internal(format!("node {i} children parent links broken")));
                }
            }
        }
        let mut seen = vec![false; n];
        for &p in &self.perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Internal("perm is not a bijection".into()));
            }
        }
        Ok(())
    }

    /// Nodes grouped by depth from the root.
    pub fn nodes_by_depth(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.height + 1];
        for (i, n) in self.nodes.iter().enumerate() {
            out[n.level].push(i);
        }
        out
    }
}

fn node_seed(seed: u64, node: usize) -> u64 {
    // splitmix64 finalizer over (seed, node)
    let mut z = seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    node_seed(seed, salt as usize)
}

/// Median split along the coordinate of maximum spread. Reorders `idx` so the
/// first `ceil(len / 2)` entries form the left child; returns that count.
/// Ties in coordinate value are broken by point index.
pub fn kd_split(points: &PointSet, idx: &mut [usize]) -> usize {
    let d = points.dim();
    let mut best_dim = 0;
    let mut best_spread = f64::NEG_INFINITY;
    for k in 0..d {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = points.point(i)[k];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best_dim = k;
        }
    }
    idx.sort_unstable_by(|&a, &b| {
        points.point(a)[best_dim]
            .total_cmp(&points.point(b)[best_dim])
            .then(a.cmp(&b))
    });
    idx.len().div_ceil(2)
}

const TWO_MEANS_CANDIDATES: usize = 64;
const TWO_MEANS_ITERS: usize = 16;

/// Two-means split with farthest-candidate-pair initialization and Lloyd
/// refinement. Falls back to a median split along the centroid-difference
/// direction when a side is empty or holds under 10% of the points.
pub fn two_means_split(points: &PointSet, idx: &mut [usize], seed: u64) -> usize {
    let len = idx.len();
    let d = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (idx[0], idx[len - 1]);
    let mut best = -1.0;
    for _ in 0..TWO_MEANS_CANDIDATES {
        let i = idx[rng.random_range(0..len)];
        let j = idx[rng.random_range(0..len)];
        let dist = points.dist2(i, j);
        if dist > best {
            best = dist;
            a = i;
            b = j;
        }
    }
    let mut c0 = points.point(a).to_vec();
    let mut c1 = points.point(b).to_vec();
    let mut assign = vec![false; len];
    for _ in 0..TWO_MEANS_ITERS {
        let mut changed = false;
        for (slot, &i) in assign.iter_mut().zip(idx.iter()) {
            let p = points.point(i);
            let right = sq_dist(p, &c1) < sq_dist(p, &c0);
            changed |= *slot != right;
            *slot = right;
        }
        let mut s0 = vec![0.0; d];
        let mut s1 = vec![0.0; d];
        let (mut n0, mut n1) = (0usize, 0usize);
        for (&right, &i) in assign.iter().zip(idx.iter()) {
            let (s, n) = if right { (&mut s1, &mut n1) } else { (&mut s0, &mut n0) };
            for (acc, v) in s.iter_mut().zip(points.point(i)) {
                *acc += v;
            }
            *n += 1;
        }
        if n0 > 0 {
            c0 = s0.iter().map(|v| v / n0 as f64).collect();
        }
        if n1 > 0 {
            c1 = s1.iter().map(|v| v / n1 as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let n_right = assign.iter().filter(|&&r| r).count();
    let n_left = len - n_right;
    let small = n_left.min(n_right);
    if small == 0 || small * 10 < len {
        let dir: Vec<f64> = c1.iter().zip(&c0).map(|(x, y)| x - y).collect();
        if dir.iter().all(|&v| v == 0.0) {
            return kd_split(points, idx);
        }
        let proj = |i: usize| -> f64 { points.point(i).iter().zip(&dir).map(|(x, y)| x * y).sum() };
        idx.sort_unstable_by(|&x, &y| proj(x).total_cmp(&proj(y)).then(x.cmp(&y)));
        return len.div_ceil(2);
    }
    let mut left: Vec<usize> = Vec::with_capacity(n_left);
    let mut right: Vec<usize> = Vec::with_capacity(n_right);
    for (&r, &i) in assign.iter().zip(idx.iter()) {
        if r {
            right.push(i);
        } else {
            left.push(i);
        }
    }
    idx[..n_left].copy_from_slice(&left);
    idx[n_left..].copy_from_slice(&right);
    n_left
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::points::{synth_points, Shape};

    fn check_invariants(t: &ClusterTree, m: usize) {
        t.validate().unwrap();
        for (i, node) in t.nodes().iter().enumerate() {
            assert_eq!(node.is_leaf(), node.len() <= m, "node {i}");
            if let Some(p) = node.parent {
                assert!(p < i);
                assert_eq!(node.level, t.node(p).level + 1);
            }
        }
        let mut cursor = 0;
        let mut leaves: Vec<_> = t.leaves().collect();
        leaves.sort_by_key(|&l| t.node(l).start);
        for l in leaves {
            assert_eq!(t.node(l).start, cursor);
            cursor = t.node(l).end;
        }
        assert_eq!(cursor, t.num_points());
    }

    #[test]
    fn single_point_is_root_leaf() {
        let p = synth_points(Shape::Grid2d, 1, 0).unwrap();
        let t = ClusterTree::build(&p, 256, SplitMethod::Auto, 0).unwrap();
        assert_eq!(t.num_nodes(), 1);
        assert_eq!(t.height(), 0);
        assert!(t.node(0).is_leaf());
    }

    #[test]
    fn grid_1024_gives_four_equal_leaves() {
        let p = synth_points(Shape::Grid2d, 1024, 0).unwrap();
        let t = ClusterTree::build(&p, 256, SplitMethod::Auto, 0).unwrap();
        assert_eq!(t.height(), 2);
        assert_eq!(t.num_nodes(), 7);
        let sizes: Vec<_> = t.leaves().map(|l| t.node(l).len()).collect();
        assert_eq!(sizes, vec![256; 4]);
        check_invariants(&t, 256);
    }

    #[test]
    fn kd_split_sizes() {
        let p = synth_points(Shape::UniformRandom { dim: 2 }, 11, 3).unwrap();
        let mut idx: Vec<usize> = (0..11).collect();
        let left = kd_split(&p, &mut idx);
        assert_eq!(left, 6);
        // Left side all <= right side along the spread dimension.
        let spread = |k: usize| {
            let v: Vec<f64> = (0..11).map(|i| p.point(i)[k]).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        let k = if spread(1) > spread(0) { 1 } else { 0 };
        let max_left = idx[..6].iter().map(|&i| p.point(i)[k]).fold(f64::MIN, f64::max);
        let min_right = idx[6..].iter().map(|&i| p.point(i)[k]).fold(f64::MAX, f64::min);
        assert!(max_left <= min_right);
    }

    #[test]
    fn two_means_separates_clusters() {
        let mut coords = Vec::new();
        for i in 0..30 {
            coords.extend([i as f64 * 0.01, 0.0, 0.0, 0.0]);
        }
        for i in 0..20 {
            coords.extend([100.0 + i as f64 * 0.01, 0.0, 0.0, 0.0]);
        }
        let p = PointSet::new(50, 4, coords).unwrap();
        let mut idx: Vec<usize> = (0..50).collect();
        let left = two_means_split(&p, &mut idx, 5);
        assert!(left == 30 || left == 20, "left = {left}");
        let first_is_low = idx[0] < 30;
        for &i in &idx[..left] {
            assert_eq!(i < 30, first_is_low);
        }
    }

    #[test]
    fn two_means_identical_points_falls_back() {
        let p = PointSet::new(9, 5, vec![1.0; 45]).unwrap();
        let mut idx: Vec<usize> = (0..9).collect();
        assert_eq!(two_means_split(&p, &mut idx, 1), 5);
    }

    #[test]
    fn high_dim_uses_two_means_and_is_deterministic() {
        let p = synth_points(Shape::UniformRandom { dim: 8 }, 3000, 2).unwrap();
        let a = ClusterTree::build(&p, 64, SplitMethod::Auto, 9).unwrap();
        let b = ClusterTree::build(&p, 64, SplitMethod::Auto, 9).unwrap();
        assert_eq!(a, b);
        check_invariants(&a, 64);
        let kd = ClusterTree::build(&p, 64, SplitMethod::KdTree, 9).unwrap();
        assert_ne!(a.perm(), kd.perm());
    }

    #[test]
    fn large_tree_leaf_bound() {
        let p = synth_points(Shape::UniformRandom { dim: 3 }, 100_000, 1).unwrap();
        let t = ClusterTree::build(&p, 256, SplitMethod::Auto, 0).unwrap();
        check_invariants(&t, 256);
    }

    #[test]
    fn zero_leaf_size_rejected() {
        let p = synth_points(Shape::Grid2d, 4, 0).unwrap();
        assert!(ClusterTree::build(&p, 0, SplitMethod::Auto, 0).is_err());
    }

    #[test]
    fn from_children_layout() {
        // root -> 1, 2; 1 -> 3, 4; 2 -> 5, 6
        let ch = [Some((1, 2)), Some((3, 4)), Some((5, 6)), None, None, None, None];
        let t = ClusterTree::from_children(&ch, &[2, 3, 4, 5], 5).unwrap();
        assert_eq!(t.node(4).range(), 2..5);
        assert_eq!(t.node(2).range(), 5..14);
        assert_eq!(t.node_height(0), 2);
        assert!(t.is_ancestor(0, 6));
        assert!(!t.is_ancestor(1, 6));
        assert!(ClusterTree::from_children(&[Some((0, 1)), None], &[1], 1).is_err());
    }

    #[test]
    fn encode_decode() {
        let p = synth_points(Shape::UniformRandom { dim: 2 }, 500, 2).unwrap();
        let t = ClusterTree::build(&p, 32, SplitMethod::Auto, 0).unwrap();
        let mut e = Encoder::new(b"TREE");
        t.encode(&mut e);
        let buf = e.finish();
        let mut d = Decoder::new(&buf, b"TREE", "tree").unwrap();
        assert_eq!(ClusterTree::decode(&mut d).unwrap(), t);
        d.finish().unwrap();
    }
}
