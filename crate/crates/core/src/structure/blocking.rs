//! Grouping of interaction pairs into conflict-free, locality-friendly blocks.
//!
//! Pair `(i, j)` maps to grid cell `((i - 1) / bs, (j - 1) / bs)`. All cells of
//! one grid row form one top-level entry, so every target node `i` is written
//! by exactly one entry and entries can run in parallel without atomics.

use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::interaction::HTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionKind {
    Near,
    Far,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    /// Grid cell `(row group, column group)`.
    pub cell: (usize, usize),
    pub pairs: Vec<(usize, usize)>,
}

/// All blocks of one grid row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRow {
    pub group: usize,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSet {
    pub kind: InteractionKind,
    pub blocksize: usize,
    /// Non-empty grid rows in ascending group order.
    pub rows: Vec<BlockRow>,
}

impl BlockSet {
    pub fn num_blocks(&self) -> usize {
        self.rows.iter().map(|r| r.blocks.len()).sum()
    }

    pub fn num_pairs(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| &r.blocks)
            .map(|b| b.pairs.len())
            .sum()
    }

    /// Pairs in storage/execution order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(|r| &r.blocks)
            .flat_map(|b| b.pairs.iter().copied())
    }

    /// Row group of a node id.
    pub fn group_of(&self, node: usize) -> usize {
        (node - 1) / self.blocksize
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.u8(match self.kind {
            InteractionKind::Near => 0,
            InteractionKind::Far => 1,
        });
        e.usize(self.blocksize);
        e.usize(self.rows.len());
        for row in &self.rows {
            e.usize(row.group);
            e.usize(row.blocks.len());
            for b in &row.blocks {
                e.usize(b.cell.0);
                e.usize(b.cell.1);
                e.pairs(&b.pairs);
            }
        }
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let kind = match d.u8()? {
            0 => InteractionKind::Near,
            1 => InteractionKind::Far,
            k => return Err(Error::Format(format!("blockset: bad kind {k}"))),
        };
        let blocksize = d.usize()?;
        if blocksize == 0 {
            return Err(Error::Format("blockset: zero blocksize".into()));
        }
        let nrows = d.usize()?;
        let mut rows = Vec::with_capacity(nrows.min(1 << 20));
        for _ in 0..nrows {
            let group = d.usize()?;
            let nb = d.usize()?;
            let mut blocks = Vec::with_capacity(nb.min(1 << 20));
            for _ in 0..nb {
                let cell = (d.usize()?, d.usize()?);
                let pairs = d.pairs()?;
                if pairs.iter().any(|&(i, j)| i == 0 || j == 0) {
                    return Err(Error::Format("blockset: root in an interaction".into()));
                }
                blocks.push(Block { cell, pairs });
            }
            rows.push(BlockRow { group, blocks });
        }
        Ok(BlockSet { kind, blocksize, rows })
    }
}

/// Blocks the near or far interactions of `htree`.
pub fn blocking(htree: &HTree, blocksize: usize, kind: InteractionKind) -> Result<BlockSet> {
    let lists = match kind {
        InteractionKind::Near => &htree.near,
        InteractionKind::Far => &htree.far,
    };
    block_interactions(htree.num_nodes(), lists, blocksize, kind)
}

/// Blocking over explicit per-node interaction lists (`lists[i]` = partners of `i`).
pub fn block_interactions(
    num_nodes: usize,
    lists: &[Vec<usize>],
    blocksize: usize,
    kind: InteractionKind,
) -> Result<BlockSet> {
    if blocksize == 0 {
        return Err(Error::invalid("blocksize must be at least 1"));
    }
    if lists.len() != num_nodes {
        return Err(Error::invalid("one interaction list per node required"));
    }
    if !lists[0].is_empty() || lists.iter().any(|l| l.contains(&0)) {
        return Err(Error::Internal("the root cannot take part in an interaction".into()));
    }
    let block_dim = (num_nodes - 1 + blocksize) / blocksize;
    // Sparse grid: cells keyed by (iid, jid); BTreeMap gives row-major order.
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<(usize, usize)>> = Default::default();
    for (i, partners) in lists.iter().enumerate().skip(1) {
        let iid = (i - 1) / blocksize;
        for &j in partners {
            if j >= num_nodes {
                return Err(Error::invalid(format!("interaction partner {j} out of range")));
            }
            let jid = (j - 1) / blocksize;
            debug_assert!(iid < block_dim && jid < block_dim);
            cells.entry((iid, jid)).or_default().push((i, j));
        }
    }
    let mut rows: Vec<BlockRow> = Vec::new();
    for ((iid, jid), pairs) in cells {
        if rows.last().is_none_or(|r| r.group != iid) {
            rows.push(BlockRow {
                group: iid,
                blocks: Vec::new(),
            });
        }
        rows.last_mut().unwrap().blocks.push(Block {
            cell: (iid, jid),
            pairs,
        });
    }
    Ok(BlockSet { kind, blocksize, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists_from(num: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
        let mut l = vec![Vec::new(); num];
        for &(i, j) in pairs {
            l[i].push(j);
        }
        l
    }

    #[test]
    fn near_example_single_block() {
        let l = lists_from(11, &[(9, 9), (9, 10), (10, 9), (10, 10)]);
        let bs = block_interactions(11, &l, 2, InteractionKind::Near).unwrap();
        assert_eq!(bs.num_blocks(), 1);
        assert_eq!(bs.rows[0].blocks[0].pairs, vec![(9, 9), (9, 10), (10, 9), (10, 10)]);
        assert_eq!(bs.rows[0].blocks[0].cell, (4, 4));
    }

    #[test]
    fn far_example_two_blocks() {
        let l = lists_from(11, &[(1, 2), (2, 1), (5, 6), (6, 5)]);
        let bs = block_interactions(11, &l, 2, InteractionKind::Far).unwrap();
        let blocks: Vec<_> = bs.rows.iter().flat_map(|r| &r.blocks).collect();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].cell, (0, 0));
        assert_eq!(blocks[0].pairs, vec![(1, 2), (2, 1)]);
        assert_eq!(blocks[1].cell, (2, 2));
        assert_eq!(blocks[1].pairs, vec![(5, 6), (6, 5)]);
    }

    #[test]
    fn empty_and_errors() {
        let bs = block_interactions(5, &vec![Vec::new(); 5], 2, InteractionKind::Near).unwrap();
        assert_eq!(bs.num_blocks(), 0);
        assert!(block_interactions(5, &vec![Vec::new(); 5], 0, InteractionKind::Near).is_err());
        let l = lists_from(5, &[(0, 1)]);
        assert!(matches!(
            block_interactions(5, &l, 2, InteractionKind::Near),
            Err(Error::Internal(_))
        ));
        let l = lists_from(5, &[(1, 0)]);
        assert!(block_interactions(5, &l, 2, InteractionKind::Near).is_err());
    }
}
