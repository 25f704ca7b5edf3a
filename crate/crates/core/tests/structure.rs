mod common;

use std::collections::{BTreeMap, HashSet};

use common::{random_tree, Setup};
use hkm::compression::{CompressedMatrix, NodeBasis};
use hkm::structure::{block_interactions, coarsening, Cds, CoarsenSet};
use hkm::{AdmissibilityMode, BlockSet, ClusterTree, DenseMatrix, HTree, InteractionKind, Kernel, SamplingMode, Shape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lists_strategy() -> impl Strategy<Value = (usize, Vec<Vec<usize>>, usize)> {
    (2usize..60, 1usize..7).prop_flat_map(|(num, bs)| {
        let lists = prop::collection::vec(prop::collection::btree_set(1..num, 0..6), num - 1);
        (Just(num), lists, Just(bs)).prop_map(|(num, rest, bs)| {
            let mut lists = vec![Vec::new()];
            lists.extend(rest.into_iter().map(|s| s.into_iter().collect()));
            (num, lists, bs)
        })
    })
}

/// Pairs of every top-level entry, with each pair checked against its cell.
fn check_blockset(bs: &BlockSet, lists: &[Vec<usize>]) {
    let mut seen = Vec::new();
    let mut groups_per_row = Vec::new();
    for row in &bs.rows {
        let mut groups = HashSet::new();
        for block in &row.blocks {
            for &(i, j) in &block.pairs {
                assert_eq!(block.cell, ((i - 1) / bs.blocksize, (j - 1) / bs.blocksize));
                groups.insert((i - 1) / bs.blocksize);
                seen.push((i, j));
            }
        }
        groups_per_row.push(groups);
    }
    // Conflict freedom: no row group is written by two entries.
    for a in 0..groups_per_row.len() {
        for b in a + 1..groups_per_row.len() {
            assert!(groups_per_row[a].is_disjoint(&groups_per_row[b]));
        }
    }
    let mut expected: Vec<(usize, usize)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
        .collect();
    seen.sort_unstable();
    expected.sort_unstable();
    assert_eq!(seen, expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn blocking_partitions_without_conflicts((num, lists, bs) in lists_strategy()) {
        let set = block_interactions(num, &lists, bs, InteractionKind::Near).unwrap();
        check_blockset(&set, &lists);
    }
}

/// Participation closed under descendants, root usually excluded.
fn random_participation(rng: &mut impl Rng, tree: &ClusterTree) -> Vec<bool> {
    let num = tree.num_nodes();
    let mut part = vec![false; num];
    for i in 0..num {
        let parent_in = tree.node(i).parent.is_some_and(|p| part[p]);
        part[i] = parent_in || (i > 0 && rng.random_bool(0.4)) || (i == 0 && rng.random_bool(0.1));
    }
    part
}

fn check_coarsenset(cs: &CoarsenSet, tree: &ClusterTree, part: &[bool], rng: &mut impl Rng) {
    let mut count = vec![0usize; tree.num_nodes()];
    for i in cs.traversal() {
        count[i] += 1;
    }
    for i in 0..tree.num_nodes() {
        assert_eq!(count[i], usize::from(part[i]), "node {i}");
    }
    // Dependency simulation with partitions of a level in random order.
    let mut written = vec![false; tree.num_nodes()];
    for level in &cs.levels {
        let mut order: Vec<usize> = (0..level.partitions.len()).collect();
        order.shuffle(rng);
        let before = written.clone();
        for k in order {
            let mut local = HashSet::new();
            for &i in &level.partitions[k].nodes {
                if let Some((l, r)) = tree.node(i).children {
                    for c in [l, r] {
                        assert!(before[c] || local.contains(&c), "node {i} reads unwritten {c}");
                    }
                }
                local.insert(i);
                written[i] = true;
            }
        }
    }
}

#[test]
fn coarsening_schedulable_and_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut balanced_checks = 0;
    for _ in 0..500 {
        let max_nodes = rng.random_range(3..200);
        let tree = random_tree(&mut rng, max_nodes, 8);
        let part = random_participation(&mut rng, &tree);
        let sranks: Vec<usize> = (0..tree.num_nodes()).map(|i| if part[i] { rng.random_range(0..9) } else { 0 }).collect();
        let p = rng.random_range(1..7);
        let agg = rng.random_range(1..4);
        let cs = coarsening(&tree, &sranks, &part, p, agg, 1.0).unwrap();
        check_coarsenset(&cs, &tree, &part, &mut rng);

        let subtrees = hkm::structure::disjoint_subtrees(&tree, &sranks, &part, agg, 1.0).unwrap();
        let non_empty: Vec<_> = subtrees.iter().filter(|l| !l.is_empty()).collect();
        assert_eq!(non_empty.len(), cs.levels.len());
        for (st, level) in non_empty.iter().zip(&cs.levels) {
            let n_part = if st.len() > p { p } else { (st.len() / 2).max(1) };
            assert!(level.partitions.len() <= n_part);
            if st.len() >= 2 * n_part {
                let costs: Vec<f64> = level.partitions.iter().map(|q| q.cost).collect();
                let mean = costs.iter().sum::<f64>() / n_part as f64;
                let max = costs.iter().copied().fold(0.0, f64::max);
                let largest = st.iter().map(|s| s.cost).fold(0.0, f64::max);
                // A single sub-tree heavier than twice the mean cannot be split.
                if largest <= 2.0 * mean {
                    assert!(max <= 2.0 * mean, "max {max} mean {mean}");
                    balanced_checks += 1;
                }
            }
        }
    }
    assert!(balanced_checks > 100);
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Compressed matrix on the seven-leaf running-example tree, with the near
/// pairs of leaves 9 and 10 and sibling far pairs.
fn example_compressed() -> CompressedMatrix {
    let ch = [
        Some((1, 2)),
        Some((3, 4)),
        Some((5, 6)),
        None,
        None,
        Some((7, 8)),
        Some((9, 10)),
        None,
        None,
        None,
        None,
    ];
    let tree = ClusterTree::from_children(&ch, &[4; 6], 4).unwrap();
    let mut near = vec![Vec::new(); 11];
    near[9] = vec![9, 10];
    near[10] = vec![9, 10];
    let mut far = vec![Vec::new(); 11];
    for (a, b) in [(1, 2), (3, 4), (5, 6), (7, 8)] {
        far[a].push(b);
        far[b].push(a);
    }
    let htree = HTree { tree: tree.clone(), near, far, mode: AdmissibilityMode::Tau(1.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let part = htree.participating();
    let mut bases = vec![None; 11];
    for i in (0..11).rev() {
        if !part[i] {
            continue;
        }
        // Leaf size, or two children of rank 2.
        let width = 4;
        let first = tree.node(i).start;
        bases[i] = Some(NodeBasis { skeleton: vec![first, first + 1], v: random_matrix(&mut rng, width, 2) });
    }
    let far_blocks: BTreeMap<_, _> = htree.far_pairs().map(|p| (p, random_matrix(&mut rng, 2, 2))).collect();
    let near_blocks: BTreeMap<_, _> = htree.near_pairs().map(|p| (p, random_matrix(&mut rng, 4, 4))).collect();
    CompressedMatrix {
        htree,
        kernel: Kernel::InverseDistance,
        bacc: 0.0,
        max_rank: 2,
        bases,
        far_blocks,
        near_blocks,
    }
}

#[test]
fn example_layout_starts_with_the_blocked_near_pairs() {
    let cm = example_compressed();
    let near = block_interactions(11, &cm.htree.near, 2, InteractionKind::Near).unwrap();
    let far = block_interactions(11, &cm.htree.far, 4, InteractionKind::Far).unwrap();
    let sr = cm.srank_vector();
    let cs = coarsening(&cm.htree.tree, &sr, &cm.htree.participating(), 2, 2, 1.0).unwrap();
    let cds = Cds::build(&cm, 3, &near, &far, &cs).unwrap();
    let expect: Vec<f64> = [(9, 9), (9, 10), (10, 9), (10, 10)]
        .iter()
        .flat_map(|p| cm.near_blocks[p].as_slice().to_vec())
        .collect();
    assert_eq!(cds.d_gen, expect);
    assert_eq!(cds.d_ptr, vec![0, 16, 32, 48, 64]);
    // V in coarsenset traversal order.
    let order: Vec<usize> = cs.traversal().collect();
    let v_expect: Vec<f64> = order.iter().flat_map(|&i| cm.bases[i].as_ref().unwrap().v.as_slice().to_vec()).collect();
    assert_eq!(cds.v_gen, v_expect);
    assert_eq!(Cds::from_bytes(&cds.to_bytes()).unwrap(), cds);
}

fn check_cds(setup: &Setup) {
    let inst = setup.build();
    let cds = &inst.p2.cds;
    let cm = &inst.cm;
    for w in [&cds.d_ptr, &cds.b_ptr, &cds.v_ptr] {
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }
    assert_eq!(*cds.d_ptr.last().unwrap(), cds.d_gen.len());
    let tree = &cm.htree.tree;
    let d_len: usize = cm.htree.near_pairs().map(|(i, j)| tree.node(i).len() * tree.node(j).len()).sum();
    assert_eq!(cds.d_gen.len(), d_len);
    for ((i, j), blk) in &cm.near_blocks {
        assert_eq!(cds.d_block(*i, *j).as_ref(), Some(blk));
    }
    for ((i, j), blk) in &cm.far_blocks {
        assert_eq!(cds.b_block(*i, *j).as_ref(), Some(blk));
    }
    for (i, b) in cm.bases.iter().enumerate() {
        assert_eq!(cds.v_block(i), b.as_ref().map(|b| b.v.clone()));
    }
    let bytes = cds.to_bytes();
    let back = Cds::from_bytes(&bytes).unwrap();
    assert_eq!(&back, cds);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn cds_round_trip_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..25 {
        let dim = [1, 2, 3, 5][k % 4];
        let setup = Setup {
            shape: Shape::UniformRandom { dim },
            n: rng.random_range(40..400),
            leaf: rng.random_range(4..40),
            mode: if rng.random_bool(0.5) { AdmissibilityMode::Hss } else { AdmissibilityMode::Tau(rng.random_range(0.2..1.5)) },
            sampling: if rng.random_bool(0.3) { SamplingMode::Exact } else { SamplingMode::Neighbor },
            bacc: 10f64.powi(-rng.random_range(1..8)),
            max_rank: rng.random_range(1..40),
            seed: k as u64,
            ..Default::default()
        };
        check_cds(&setup);
    }
}

#[test]
fn corrupted_cds_is_rejected() {
    let inst = Setup { n: 200, ..Default::default() }.build();
    let bytes = inst.p2.cds.to_bytes();
    assert!(Cds::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Cds::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9; // version
    assert!(Cds::from_bytes(&bad).is_err());
    let mut extended = bytes;
    extended.push(0);
    assert!(Cds::from_bytes(&extended).is_err());
}

#[test]
fn large_tau_equals_hss_structure() {
    let a = Setup { mode: AdmissibilityMode::Hss, n: 500, ..Default::default() }.build();
    let b = Setup { mode: AdmissibilityMode::Tau(100.0), n: 500, ..Default::default() }.build();
    assert_eq!(a.p1.htree.near, b.p1.htree.near);
    assert_eq!(a.p1.htree.far, b.p1.htree.far);
    assert_eq!(a.p1.near, b.p1.near);
    assert_eq!(a.p1.far, b.p1.far);
}
