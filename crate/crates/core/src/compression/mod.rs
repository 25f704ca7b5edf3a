//! Nested-basis compression of the kernel matrix.
//!
//! Bases are built bottom-up with interpolative decompositions of sampled
//! kernel blocks. A leaf's basis acts on its own points; an internal node's
//! basis acts on the concatenated skeletons of its children. The kernel is
//! symmetric, so a single basis `V` serves as both row and column basis.

mod id;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use id::{interpolative_decomposition, InterpolativeDecomposition};

use crate::error::{Error, Result};
use crate::interaction::HTree;
use crate::kernel::{dense_block_unchecked, Kernel};
use crate::matrix::DenseMatrix;
use crate::points::PointSet;
use crate::sampling::SampleInfo;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBasis {
    /// Point indices (original numbering) of the skeleton.
    pub skeleton: Vec<usize>,
    /// `input_width x srank`, input width = node size for leaves and the sum
    /// of the children's sranks otherwise.
    pub v: DenseMatrix,
}

impl NodeBasis {
    pub fn srank(&self) -> usize {
        self.skeleton.len()
    }
}

#[derive(Debug, Clone)]
pub struct CompressedMatrix {
    pub htree: HTree,
    pub kernel: Kernel,
    pub bacc: f64,
    pub max_rank: usize,
    /// `Some` exactly for participating nodes.
    pub bases: Vec<Option<NodeBasis>>,
    /// `B_ij = K(skeleton_i, skeleton_j)` per far pair.
    pub far_blocks: BTreeMap<(usize, usize), DenseMatrix>,
    /// Dense `D_ij = K(points_i, points_j)` per near pair, rows/cols in tree order.
    pub near_blocks: BTreeMap<(usize, usize), DenseMatrix>,
}

impl CompressedMatrix {
    pub fn num_points(&self) -> usize {
        self.htree.tree.num_points()
    }

    /// Per-node rank, zero for nodes without a basis.
    pub fn srank_vector(&self) -> Vec<usize> {
        self.bases
            .iter()
            .map(|b| b.as_ref().map_or(0, NodeBasis::srank))
            .collect()
    }
}

pub fn srank_vector(cm: &CompressedMatrix) -> Vec<usize> {
    cm.srank_vector()
}

/// Compresses the kernel matrix over `htree`.
///
/// `bacc` is the relative Frobenius tolerance applied to each sampled block;
/// ranks never exceed `max_rank`.
pub fn compress(
    htree: &HTree,
    kernel: Kernel,
    points: &PointSet,
    samples: &SampleInfo,
    bacc: f64,
    max_rank: usize,
) -> Result<CompressedMatrix> {
    kernel.validate()?;
    if bacc.is_nan() || bacc < 0.0 {
        return Err(Error::invalid(format!("bacc must be >= 0, got {bacc}")));
    }
    let tree = &htree.tree;
    if tree.num_points() != points.len() {
        return Err(Error::invalid("point set does not match the cluster tree"));
    }
    if samples.rows.len() != tree.num_nodes() {
        return Err(Error::invalid("sample info does not match the cluster tree"));
    }
    let part = htree.participating();
    let num = tree.num_nodes();

    // Bottom-up by node height; all nodes of one height are independent.
    let mut by_height: Vec<Vec<usize>> = vec![Vec::new(); tree.height() + 1];
    for i in 0..num {
        if part[i] {
            by_height[tree.node_height(i)].push(i);
        }
    }
    let mut bases: Vec<Option<NodeBasis>> = vec![None; num];
    for level in &by_height {
        let built: Vec<(usize, NodeBasis)> = level
            .par_iter()
            .map(|&i| {
                let rows = samples.of(i);
                if rows.is_empty() && tree.node(i).len() < points.len() {
                    return Err(Error::Internal(format!("participating node {i} has no sample rows")));
                }
                let cols: Vec<usize> = match tree.node(i).children {
                    None => tree.points_of(i).to_vec(),
                    Some((l, r)) => {
                        let (bl, br) = (bases[l].as_ref(), bases[r].as_ref());
                        let (bl, br) = bl.zip(br).ok_or_else(|| {
                            Error::Internal(format!("children of node {i} were not compressed"))
                        })?;
                        bl.skeleton.iter().chain(&br.skeleton).copied().collect()
                    }
                };
                let block = dense_block_unchecked(&kernel, points, rows, &cols);
                let id = interpolative_decomposition(&block, bacc, max_rank);
                let skeleton = id.skeleton.iter().map(|&c| cols[c]).collect();
                Ok((i, NodeBasis { skeleton, v: id.v }))
            })
            .collect::<Result<_>>()?;
        for (i, b) in built {
            bases[i] = Some(b);
        }
    }

    let far_pairs: Vec<(usize, usize)> = htree.far_pairs().collect();
    let far_blocks = far_pairs
        .par_iter()
        .map(|&(i, j)| {
            let (bi, bj) = (bases[i].as_ref().unwrap(), bases[j].as_ref().unwrap());
            ((i, j), dense_block_unchecked(&kernel, points, &bi.skeleton, &bj.skeleton))
        })
        .collect();
    let near_pairs: Vec<(usize, usize)> = htree.near_pairs().collect();
    let near_blocks = near_pairs
        .par_iter()
        .map(|&(i, j)| {
            ((i, j), dense_block_unchecked(&kernel, points, tree.points_of(i), tree.points_of(j)))
        })
        .collect();

    Ok(CompressedMatrix {
        htree: htree.clone(),
        kernel,
        bacc,
        max_rank,
        bases,
        far_blocks,
        near_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::AdmissibilityMode;
    use crate::points::{synth_points, Shape};
    use crate::sampling::{sample_htree, SamplingConfig, SamplingMode};
    use crate::tree::{ClusterTree, SplitMethod};

    fn setup(mode: AdmissibilityMode, smode: SamplingMode, bacc: f64) -> (PointSet, CompressedMatrix) {
        let p = synth_points(Shape::UniformRandom { dim: 2 }, 400, 3).unwrap();
        let t = ClusterTree::build(&p, 25, SplitMethod::Auto, 0).unwrap();
        let h = HTree::build(&p, t, mode).unwrap();
        let cfg = SamplingConfig {
            mode: smode,
            budget: 64,
            ..Default::default()
        };
        let s = sample_htree(&p, &h, &cfg).unwrap();
        let cm = compress(&h, Kernel::gaussian(0.3).unwrap(), &p, &s, bacc, 32).unwrap();
        (p, cm)
    }

    #[test]
    fn structure_invariants() {
        let (_, cm) = setup(AdmissibilityMode::Tau(0.65), SamplingMode::Neighbor, 1e-5);
        let part = cm.htree.participating();
        let tree = &cm.htree.tree;
        for i in 0..tree.num_nodes() {
            assert_eq!(cm.bases[i].is_some(), part[i]);
            let Some(b) = &cm.bases[i] else { continue };
            assert!(b.srank() <= 32);
            let width = match tree.node(i).children {
                None => tree.node(i).len(),
                Some((l, r)) => cm.bases[l].as_ref().unwrap().srank() + cm.bases[r].as_ref().unwrap().srank(),
            };
            assert_eq!(b.v.rows(), width);
            let members: std::collections::HashSet<_> = tree.points_of(i).iter().collect();
            assert!(b.skeleton.iter().all(|s| members.contains(s)));
            if let Some((l, r)) = tree.node(i).children {
                let kids: Vec<usize> = cm.bases[l].as_ref().unwrap().skeleton.iter()
                    .chain(&cm.bases[r].as_ref().unwrap().skeleton).copied().collect();
                assert!(b.skeleton.iter().all(|s| kids.contains(s)));
            }
        }
        for (i, j) in cm.htree.far_pairs() {
            let b = &cm.far_blocks[&(i, j)];
            assert_eq!((b.rows(), b.cols()), (cm.srank_vector()[i], cm.srank_vector()[j]));
        }
        assert_eq!(cm.near_blocks.len(), cm.htree.num_near());
    }

    #[test]
    fn hss_near_blocks_are_leaves() {
        let (_, cm) = setup(AdmissibilityMode::Hss, SamplingMode::Neighbor, 1e-3);
        assert_eq!(cm.near_blocks.len(), cm.htree.tree.num_leaves());
        assert!(cm.near_blocks.keys().all(|(i, j)| i == j));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (p, cm) = setup(AdmissibilityMode::Hss, SamplingMode::Exact, 0.0);
        let s = SampleInfo { rows: vec![Vec::new(); cm.htree.num_nodes()] };
        let err = compress(&cm.htree, cm.kernel, &p, &s, 1e-3, 8).unwrap_err();
        assert!(matches!(err, Error::Internal(_)), "{err}");
        let s = SampleInfo { rows: vec![] };
        assert!(compress(&cm.htree, cm.kernel, &p, &s, 1e-3, 8).is_err());
    }
}
