//! Evaluation plans: which specialized loop shape the executor runs for each
//! pass, chosen from the structure sets and two thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::{BlockSet, CoarsenSet};
use crate::tree::ClusterTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Run the near pass over the blockset (else a flat loop with merged partials).
    pub block_lowering_near: bool,
    pub block_lowering_far: bool,
    /// Run the tree passes over the coarsenset (else level by level).
    pub coarsen_lowering: bool,
    /// Run the last tree level with intra-block parallelism.
    pub peel_top: bool,
    pub workers: usize,
    pub block_threshold: usize,
    pub coarsen_threshold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDefaults {
    /// `None` uses the number of leaves.
    pub block_threshold: Option<usize>,
    pub coarsen_threshold: usize,
    pub workers: usize,
}

impl Default for PlanDefaults {
    fn default() -> Self {
        PlanDefaults {
            block_threshold: None,
            coarsen_threshold: 4,
            workers: default_workers(),
        }
    }
}

/// Physical core count when known, else logical parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Block lowering applies when a pass has more interactions than
/// `block_threshold`; coarsen lowering when the tree has more levels than
/// `coarsen_threshold`.
pub fn generate_plan(
    near: &BlockSet,
    far: &BlockSet,
    coarsen: &CoarsenSet,
    tree: &ClusterTree,
    defaults: &PlanDefaults,
) -> Result<EvalPlan> {
    if defaults.workers == 0 {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    let block_threshold = defaults.block_threshold.unwrap_or_else(|| tree.num_leaves());
    let tree_levels = tree.height() + 1;
    let coarsen_lowering = tree_levels > defaults.coarsen_threshold;
    let top_partitions = coarsen.levels.last().map_or(0, |l| l.partitions.len());
    Ok(EvalPlan {
        block_lowering_near: near.num_pairs() > block_threshold,
        block_lowering_far: far.num_pairs() > block_threshold,
        coarsen_lowering,
        peel_top: top_partitions > 0 && top_partitions < defaults.workers,
        workers: defaults.workers,
        block_threshold,
        coarsen_threshold: defaults.coarsen_threshold,
    })
}

impl EvalPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: EvalPlan = serde_json::from_str(s).map_err(|e| Error::Format(format!("plan: {e}")))?;
        if plan.workers == 0 {
            return Err(Error::Format("plan: zero workers".into()));
        }
        Ok(plan)
    }

    /// Human-readable loop nest of the active plan.
    pub fn pseudocode(&self) -> String {
        let mut s = String::new();
        let tree_loop = |s: &mut String, dir: &str, body: &str| {
            if self.coarsen_lowering {
                s.push_str(&format!("for cl in coarsenset ({dir}):\n"));
                if self.peel_top {
                    s.push_str("  if cl is last: for i in cl (block-parallel):\n");
                    s.push_str(&format!("      {body}\n"));
                }
                s.push_str("  parallel for subtree in cl:\n");
                s.push_str(&format!("    for i in subtree:\n      {body}\n"));
            } else {
                s.push_str(&format!("for level in tree ({dir}):\n"));
                s.push_str(&format!("  parallel for i in level:\n    {body}\n"));
            }
        };
        s.push_str(&format!("// workers = {}\n", self.workers));
        s.push_str("// upward pass\n");
        tree_loop(&mut s, "leaves -> root", "T[i] = V[i]^T * (leaf ? W[i] : [T[lc]; T[rc]])");
        s.push_str("// far pass\n");
        if self.block_lowering_far {
            s.push_str("parallel for row in far_blockset:\n  for (i, j) in row:\n    S[i] += B[i,j] * T[j]\n");
        } else {
            s.push_str("parallel for (i, j) in far: P[i,j] = B[i,j] * T[j]\nparallel for i: S[i] += sum_j P[i,j]\n");
        }
        s.push_str("// downward pass\n");
        tree_loop(&mut s, "root -> leaves", "leaf ? Y[i] += V[i] * S[i] : [S[lc]; S[rc]] += V[i] * S[i]");
        s.push_str("// near pass\n");
        if self.block_lowering_near {
            s.push_str("parallel for row in near_blockset:\n  for (i, j) in row:\n    Y[i] += D[i,j] * W[j]\n");
        } else {
            s.push_str("parallel for (i, j) in near: P[i,j] = D[i,j] * W[j]\nparallel for i: Y[i] += sum_j P[i,j]\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::block_interactions;
    use crate::structure::InteractionKind;

    fn two_level_tree() -> ClusterTree {
        ClusterTree::from_children(&[Some((1, 2)), None, None], &[3, 3], 3).unwrap()
    }

    #[test]
    fn thresholds() {
        let t = two_level_tree();
        let near_lists = vec![vec![], vec![1, 2], vec![1, 2]];
        let near = block_interactions(3, &near_lists, 2, InteractionKind::Near).unwrap();
        let far = block_interactions(3, &vec![vec![]; 3], 4, InteractionKind::Far).unwrap();
        let d = PlanDefaults {
            workers: 2,
            ..Default::default()
        };
        let plan = generate_plan(&near, &far, &CoarsenSet::default(), &t, &d).unwrap();
        assert!(plan.block_lowering_near); // 4 pairs > 2 leaves
        assert!(!plan.block_lowering_far);
        assert!(!plan.coarsen_lowering);
        assert_eq!(plan.block_threshold, 2);

        let self_only = vec![vec![], vec![1], vec![2]];
        let near = block_interactions(3, &self_only, 2, InteractionKind::Near).unwrap();
        let plan = generate_plan(&near, &far, &CoarsenSet::default(), &t, &d).unwrap();
        assert!(!plan.block_lowering_near);

        let bad = PlanDefaults { workers: 0, ..d };
        assert!(generate_plan(&near, &far, &CoarsenSet::default(), &t, &bad).is_err());
    }

    #[test]
    fn json_round_trip() {
        let plan = EvalPlan {
            block_lowering_near: true,
            block_lowering_far: false,
            coarsen_lowering: true,
            peel_top: true,
            workers: 3,
            block_threshold: 10,
            coarsen_threshold: 4,
        };
        assert_eq!(EvalPlan::from_json(&plan.to_json()).unwrap(), plan);
        assert!(EvalPlan::from_json("{").is_err());
        assert!(plan.pseudocode().contains("near_blockset"));
    }
}
