//! Near/far interaction lists from the admissibility condition.
//!
//! A pair of clusters `(a, b)` is admissible (far, low-rank) when
//! `tau * dist(a, b) > diam(a) + diam(b)`, with `dist` the centroid distance and
//! `diam = 2 * radius` around the centroid.

use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::points::PointSet;
use crate::tree::ClusterTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AdmissibilityMode {
    /// Geometric admissibility with parameter `tau >= 0`.
    Tau(f64),
    /// Every off-diagonal sibling block is low rank.
    Hss,
}

impl std::fmt::Display for AdmissibilityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdmissibilityMode::Tau(t) => write!(f, "tau:{t}"),
            AdmissibilityMode::Hss => write!(f, "hss"),
        }
    }
}

impl std::str::FromStr for AdmissibilityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "hss" {
            return Ok(AdmissibilityMode::Hss);
        }
        let t = s
            .strip_prefix("tau:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::invalid(format!("bad mode {s:?} (tau:VALUE | hss)")))?;
        if t.is_nan() || t < 0.0 {
            return Err(Error::invalid(format!("tau must be >= 0, got {t}")));
        }
        Ok(AdmissibilityMode::Tau(t))
    }
}

impl AdmissibilityMode {
    pub(crate) fn to_bytes(self) -> Vec<u8> {
        match self {
            AdmissibilityMode::Tau(t) => {
                let mut v = vec![1u8];
                v.extend_from_slice(&t.to_le_bytes());
                v
            }
            AdmissibilityMode::Hss => vec![2u8],
        }
    }
}

/// Per-node centroid and bounding radius.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGeometry {
    dim: usize,
    centroids: Vec<f64>,
    radii: Vec<f64>,
}

impl NodeGeometry {
    pub fn compute(points: &PointSet, tree: &ClusterTree) -> Self {
        let d = points.dim();
        let num = tree.num_nodes();
        let mut centroids = vec![0.0; num * d];
        let mut radii = vec![0.0; num];
        for i in 0..num {
            let members = tree.points_of(i);
            let c = &mut centroids[i * d..(i + 1) * d];
            for &p in members {
                for (acc, v) in c.iter_mut().zip(points.point(p)) {
                    *acc += v;
                }
            }
            if !members.is_empty() {
                let inv = 1.0 / members.len() as f64;
                c.iter_mut().for_each(|v| *v *= inv);
            }
            let c = &centroids[i * d..(i + 1) * d];
            radii[i] = members
                .iter()
                .map(|&p| crate::points::sq_dist(points.point(p), c))
                .fold(0.0f64, f64::max)
                .sqrt();
        }
        NodeGeometry {
            dim: d,
            centroids,
            radii,
        }
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.radii[i]
    }

    pub fn diameter(&self, i: usize) -> f64 {
        2.0 * self.radii[i]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        crate::points::sq_dist(self.centroid(i), self.centroid(j)).sqrt()
    }

    /// `tau * dist(i, j) > diam(i) + diam(j)`.
    pub fn is_admissible(&self, i: usize, j: usize, tau: f64) -> bool {
        tau * self.distance(i, j) > self.diameter(i) + self.diameter(j)
    }
}

/// Cluster tree with near (dense) and far (low-rank) interaction lists.
#[derive(Debug, Clone, PartialEq)]
pub struct HTree {
    pub tree: ClusterTree,
    /// `near[i]`: sorted leaf ids interacting densely with leaf `i`.
    pub near: Vec<Vec<usize>>,
    /// `far[i]`: sorted node ids whose block with `i` is low rank.
    pub far: Vec<Vec<usize>>,
    pub mode: AdmissibilityMode,
}

impl HTree {
    pub fn build(points: &PointSet, tree: ClusterTree, mode: AdmissibilityMode) -> Result<Self> {
        if let AdmissibilityMode::Tau(t) = mode {
            if t.is_nan() || t < 0.0 {
                return Err(Error::invalid(format!("tau must be >= 0, got {t}")));
            }
        }
        let geom = NodeGeometry::compute(points, &tree);
        let num = tree.num_nodes();
        let mut near = vec![Vec::new(); num];
        let mut far = vec![Vec::new(); num];
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, j)) = stack.pop() {
            let (ni, nj) = (tree.node(i), tree.node(j));
            if i == j {
                match ni.children {
                    None => near[i].push(i),
                    Some((l, r)) => stack.extend([(l, l), (l, r), (r, l), (r, r)]),
                }
                continue;
            }
            let admissible = match mode {
                AdmissibilityMode::Hss => true,
                AdmissibilityMode::Tau(t) => geom.is_admissible(i, j, t),
            };
            if admissible {
                far[i].push(j);
                continue;
            }
            match (ni.children, nj.children) {
                (None, None) => near[i].push(j),
                (Some((l, r)), None) => stack.extend([(l, j), (r, j)]),
                (None, Some((l, r))) => stack.extend([(i, l), (i, r)]),
                (Some((il, ir)), Some((jl, jr))) => {
                    if split_first(&tree, &geom, i, j) {
                        stack.extend([(il, j), (ir, j)]);
                    } else {
                        stack.extend([(i, jl), (i, jr)]);
                    }
                }
            }
        }
        for list in near.iter_mut().chain(far.iter_mut()) {
            list.sort_unstable();
        }
        Ok(HTree { tree, near, far, mode })
    }

    pub fn num_nodes(&self) -> usize {
        self.tree.num_nodes()
    }

    pub fn near_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.near
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
    }

    pub fn far_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.far
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
    }

    pub fn num_near(&self) -> usize {
        self.near.iter().map(Vec::len).sum()
    }

    pub fn num_far(&self) -> usize {
        self.far.iter().map(Vec::len).sum()
    }

    /// Nodes that carry a basis: every node in a far pair plus all of its
    /// descendants.
    pub fn participating(&self) -> Vec<bool> {
        let num = self.num_nodes();
        let mut part = vec![false; num];
        for i in 0..num {
            if !self.far[i].is_empty() {
                part[i] = true;
            }
        }
        // Parents precede children in id order.
        for i in 0..num {
            if part[i] {
                if let Some((l, r)) = self.tree.node(i).children {
                    part[l] = true;
                    part[r] = true;
                }
            }
        }
        part
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        self.tree.encode(e);
        e.bytes(&self.mode.to_bytes());
        for list in self.near.iter().chain(self.far.iter()) {
            e.usizes(list);
        }
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let tree = ClusterTree::decode(d)?;
        let mode = match d.bytes()? {
            [2] => AdmissibilityMode::Hss,
            [1, rest @ ..] if rest.len() == 8 => AdmissibilityMode::Tau(f64::from_le_bytes(rest.try_into().unwrap())),
            _ => return Err(Error::Format("htree: bad admissibility mode".into())),
        };
        let num = tree.num_nodes();
        let mut lists = Vec::with_capacity(2 * num);
        for _ in 0..2 * num {
            let l = d.usizes()?;
            if l.iter().any(|&j| j >= num) {
                return Err(Error::Format("htree: interaction id out of range".into()));
            }
            lists.push(l);
        }
        let far = lists.split_off(num);
        Ok(HTree {
            tree,
            near: lists,
            far,
            mode,
        })
    }
}

/// Which node of a non-admissible internal pair to refine: the one with the
/// larger radius, then more points, then the smaller id. Symmetric in (i, j).
fn split_first(tree: &ClusterTree, geom: &NodeGeometry, i: usize, j: usize) -> bool {
    let (ri, rj) = (geom.radius(i), geom.radius(j));
    if ri != rj {
        return ri > rj;
    }
    let (si, sj) = (tree.node(i).len(), tree.node(j).len());
    if si != sj {
        return si > sj;
    }
    i < j
}
