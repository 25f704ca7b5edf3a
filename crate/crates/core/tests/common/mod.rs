#![allow(dead_code)]

use hkm::pipeline::{inspector_p1, inspector_p2_full, P1Artifacts, P1Config, P2Artifacts, P2Config};
use hkm::plan::PlanDefaults;
use hkm::sampling::SamplingConfig;
use hkm::{AdmissibilityMode, ClusterTree, CompressedMatrix, DenseMatrix, Kernel, PointSet, SamplingMode, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub points: PointSet,
    pub p1: P1Artifacts,
    pub p2: P2Artifacts,
    pub cm: CompressedMatrix,
}

#[derive(Clone, Copy)]
pub struct Setup {
    pub shape: Shape,
    pub n: usize,
    pub mode: AdmissibilityMode,
    pub leaf: usize,
    pub kernel: Kernel,
    pub bacc: f64,
    pub max_rank: usize,
    pub sampling: SamplingMode,
    pub budget: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            shape: Shape::UniformRandom { dim: 2 },
            n: 512,
            mode: AdmissibilityMode::Tau(0.65),
            leaf: 32,
            kernel: Kernel::Gaussian { bandwidth: 0.5 },
            bacc: 1e-5,
            max_rank: 64,
            sampling: SamplingMode::Neighbor,
            budget: 128,
            workers: 2,
            seed: 7,
        }
    }
}

impl Setup {
    pub fn p1_config(&self) -> P1Config {
        P1Config {
            mode: self.mode,
            leaf_size: self.leaf,
            tree_seed: self.seed,
            sampling: SamplingConfig {
                mode: self.sampling,
                budget: self.budget,
                seed: self.seed,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn p2_config(&self) -> P2Config {
        P2Config {
            kernel: self.kernel,
            bacc: self.bacc,
            max_rank: self.max_rank,
            plan: PlanDefaults {
                workers: self.workers,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn build(&self) -> Instance {
        let points = hkm::points::synth_points(self.shape, self.n, self.seed).unwrap();
        let p1 = inspector_p1(&points, &self.p1_config()).unwrap();
        let (p2, cm) = inspector_p2_full(&p1, &self.p2_config()).unwrap();
        Instance { points, p1, p2, cm }
    }
}

pub fn random_w(n: usize, q: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0))
}

/// Random binary tree with breadth-first ids and `leaf_len` points per leaf.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize, leaf_len: usize) -> ClusterTree {
    let mut children: Vec<Option<(usize, usize)>> = vec![None];
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let split = i == 0 || rng.random_bool(0.7);
        if split && children.len() + 2 <= max_nodes.max(3) {
            let l = children.len();
            children.push(None);
            children.push(None);
            children[i] = Some((l, l + 1));
            queue.push_back(l);
            queue.push_back(l + 1);
        }
    }
    let leaves = children.iter().filter(|c| c.is_none()).count();
    ClusterTree::from_children(&children, &vec![leaf_len; leaves], leaf_len).unwrap()
}
