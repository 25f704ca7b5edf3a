//! Compressed data-sparse storage: all generators flattened in the order the
//! executor visits them.
//!
//! * `D` (near blocks) in near-blockset order,
//! * `B` (far blocks) in far-blockset order,
//! * `V` (bases, also used as `U`) in coarsenset traversal order.
//!
//! Each generator array has an offset array with one extra trailing entry, so
//! block `k` is `gen[ptr[k]..ptr[k + 1]]`, column-major.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::compression::CompressedMatrix;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::structure::{BlockSet, CoarsenSet, InteractionKind};
use crate::tree::ClusterTree;

pub const CDS_MAGIC: &[u8; 4] = b"CDS1";

#[derive(Debug, Clone)]
pub struct Cds {
    pub n: usize,
    pub d: usize,
    pub tree: ClusterTree,
    pub sranks: Vec<usize>,
    pub near: BlockSet,
    pub far: BlockSet,
    pub coarsen: CoarsenSet,
    pub d_ptr: Vec<usize>,
    pub d_gen: Vec<f64>,
    pub b_ptr: Vec<usize>,
    pub b_gen: Vec<f64>,
    pub v_ptr: Vec<usize>,
    pub v_gen: Vec<f64>,
    index: CdsIndex,
}

/// Lookup tables rebuilt from the stored sets; not serialized.
#[derive(Debug, Clone, Default)]
struct CdsIndex {
    near_slot: HashMap<(usize, usize), usize>,
    far_slot: HashMap<(usize, usize), usize>,
    v_slot: Vec<Option<usize>>,
}

impl PartialEq for Cds {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.d == other.d
            && self.tree == other.tree
            && self.sranks == other.sranks
            && self.near == other.near
            && self.far == other.far
            && self.coarsen == other.coarsen
            && self.d_ptr == other.d_ptr
            && self.b_ptr == other.b_ptr
            && self.v_ptr == other.v_ptr
            && bits_eq(&self.d_gen, &other.d_gen)
            && bits_eq(&self.b_gen, &other.b_gen)
            && bits_eq(&self.v_gen, &other.v_gen)
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl Cds {
    /// Lays out the generators of `cm` following the structure sets.
    pub fn build(cm: &CompressedMatrix, dim: usize, near: &BlockSet, far: &BlockSet, coarsen: &CoarsenSet) -> Result<Self> {
        if near.kind != InteractionKind::Near || far.kind != InteractionKind::Far {
            return Err(Error::invalid("blockset kinds swapped"));
        }
        let tree = cm.htree.tree.clone();
        let sranks = cm.srank_vector();

        let mut d_ptr = vec![0];
        let mut d_gen = Vec::new();
        for pair in near.pairs() {
            let blk = cm
                .near_blocks
                .get(&pair)
                .ok_or_else(|| Error::Internal(format!("near pair {pair:?} has no D block")))?;
            d_gen.extend_from_slice(blk.as_slice());
            d_ptr.push(d_gen.len());
        }
        if d_ptr.len() - 1 != cm.near_blocks.len() {
            return Err(Error::Internal("near blockset does not cover every D block".into()));
        }

        let mut b_ptr = vec![0];
        let mut b_gen = Vec::new();
        for pair in far.pairs() {
            let blk = cm
                .far_blocks
                .get(&pair)
                .ok_or_else(|| Error::Internal(format!("far pair {pair:?} has no B block")))?;
            b_gen.extend_from_slice(blk.as_slice());
            b_ptr.push(b_gen.len());
        }
        if b_ptr.len() - 1 != cm.far_blocks.len() {
            return Err(Error::Internal("far blockset does not cover every B block".into()));
        }

        let mut v_ptr = vec![0];
        let mut v_gen = Vec::new();
        for node in coarsen.traversal() {
            let basis = cm.bases[node]
                .as_ref()
                .ok_or_else(|| Error::Internal(format!("coarsened node {node} has no basis")))?;
            v_gen.extend_from_slice(basis.v.as_slice());
            v_ptr.push(v_gen.len());
        }
        if v_ptr.len() - 1 != cm.bases.iter().filter(|b| b.is_some()).count() {
            return Err(Error::Internal("coarsenset does not cover every basis".into()));
        }

        let mut cds = Cds {
            n: tree.num_points(),
            d: dim,
            tree,
            sranks,
            near: near.clone(),
            far: far.clone(),
            coarsen: coarsen.clone(),
            d_ptr,
            d_gen,
            b_ptr,
            b_gen,
            v_ptr,
            v_gen,
            index: CdsIndex::default(),
        };
        cds.reindex()?;
        Ok(cds)
    }

    fn reindex(&mut self) -> Result<()> {
        let near_slot: HashMap<_, _> = self.near.pairs().enumerate().map(|(k, p)| (p, k)).collect();
        let far_slot: HashMap<_, _> = self.far.pairs().enumerate().map(|(k, p)| (p, k)).collect();
        let mut v_slot = vec![None; self.tree.num_nodes()];
        for (k, node) in self.coarsen.traversal().enumerate() {
            if node >= v_slot.len() || v_slot[node].replace(k).is_some() {
                return Err(Error::Format(format!("coarsenset lists node {node} twice or out of range")));
            }
        }
        self.index = CdsIndex {
            near_slot,
            far_slot,
            v_slot,
        };
        self.check_offsets()
    }

    fn check_offsets(&self) -> Result<()> {
        let check = |name: &str, ptr: &[usize], gen: &[f64], count: usize, dims: &dyn Fn(usize) -> usize| -> Result<()> {
            if ptr.len() != count + 1 || ptr[0] != 0 || *ptr.last().unwrap() != gen.len() {
                return Err(Error::Format(format!("{name}: offset array inconsistent")));
            }
            for k in 0..count {
                if ptr[k + 1] < ptr[k] || ptr[k + 1] - ptr[k] != dims(k) {
                    return Err(Error::Format(format!("{name}: block {k} has wrong size")));
                }
            }
            Ok(())
        };
        let nodes = self.tree.num_nodes();
        if self.sranks.len() != nodes {
            return Err(Error::Format("srank array length mismatch".into()));
        }
        let near: Vec<_> = self.near.pairs().collect();
        let far: Vec<_> = self.far.pairs().collect();
        let order: Vec<usize> = self.coarsen.traversal().collect();
        if near.iter().chain(&far).any(|&(i, j)| i >= nodes || j >= nodes) {
            return Err(Error::Format("interaction id out of range".into()));
        }
        check("D", &self.d_ptr, &self.d_gen, near.len(), &|k| {
            let (i, j) = near[k];
            self.tree.node(i).len() * self.tree.node(j).len()
        })?;
        check("B", &self.b_ptr, &self.b_gen, far.len(), &|k| {
            let (i, j) = far[k];
            self.sranks[i] * self.sranks[j]
        })?;
        check("V", &self.v_ptr, &self.v_gen, order.len(), &|k| {
            let i = order[k];
            self.v_width(i) * self.sranks[i]
        })?;
        Ok(())
    }

    /// Row count of `V_i`: node size for leaves, children's rank sum otherwise.
    pub fn v_width(&self, i: usize) -> usize {
        match self.tree.node(i).children {
            None => self.tree.node(i).len(),
            Some((l, r)) => self.sranks[l] + self.sranks[r],
        }
    }

    pub fn d_slice(&self, slot: usize) -> &[f64] {
        &self.d_gen[self.d_ptr[slot]..self.d_ptr[slot + 1]]
    }

    pub fn b_slice(&self, slot: usize) -> &[f64] {
        &self.b_gen[self.b_ptr[slot]..self.b_ptr[slot + 1]]
    }

    pub fn v_slice(&self, node: usize) -> Option<&[f64]> {
        let slot = (*self.index.v_slot.get(node)?)?;
        Some(&self.v_gen[self.v_ptr[slot]..self.v_ptr[slot + 1]])
    }

    pub fn has_basis(&self, node: usize) -> bool {
        self.index.v_slot.get(node).is_some_and(Option::is_some)
    }

    pub fn d_block(&self, i: usize, j: usize) -> Option<DenseMatrix> {
        let slot = *self.index.near_slot.get(&(i, j))?;
        DenseMatrix::from_col_major(self.tree.node(i).len(), self.tree.node(j).len(), self.d_slice(slot).to_vec()).ok()
    }

    pub fn b_block(&self, i: usize, j: usize) -> Option<DenseMatrix> {
        let slot = *self.index.far_slot.get(&(i, j))?;
        DenseMatrix::from_col_major(self.sranks[i], self.sranks[j], self.b_slice(slot).to_vec()).ok()
    }

    pub fn v_block(&self, node: usize) -> Option<DenseMatrix> {
        let data = self.v_slice(node)?.to_vec();
        DenseMatrix::from_col_major(self.v_width(node), self.sranks[node], data).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(CDS_MAGIC);
        e.usize(self.n);
        e.usize(self.d);
        e.usize(self.tree.num_nodes());
        self.tree.encode(&mut e);
        e.usizes(&self.sranks);
        self.near.encode(&mut e);
        self.far.encode(&mut e);
        self.coarsen.encode(&mut e);
        e.usizes(&self.d_ptr);
        e.f64s(&self.d_gen);
        e.usizes(&self.b_ptr);
        e.f64s(&self.b_gen);
        e.usizes(&self.v_ptr);
        e.f64s(&self.v_gen);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, CDS_MAGIC, "cds")?;
        let n = dec.usize()?;
        let d = dec.usize()?;
        let num_nodes = dec.usize()?;
        let tree = ClusterTree::decode(&mut dec)?;
        if tree.num_nodes() != num_nodes || tree.num_points() != n {
            return Err(Error::Format("cds: header disagrees with stored tree".into()));
        }
        let sranks = dec.usizes()?;
        let near = BlockSet::decode(&mut dec)?;
        let far = BlockSet::decode(&mut dec)?;
        let coarsen = CoarsenSet::decode(&mut dec)?;
        let d_ptr = dec.usizes()?;
        let d_gen = dec.f64s()?;
        let b_ptr = dec.usizes()?;
        let b_gen = dec.f64s()?;
        let v_ptr = dec.usizes()?;
        let v_gen = dec.f64s()?;
        dec.finish()?;
        let mut cds = Cds {
            n,
            d,
            tree,
            sranks,
            near,
            far,
            coarsen,
            d_ptr,
            d_gen,
            b_ptr,
            b_gen,
            v_ptr,
            v_gen,
            index: CdsIndex::default(),
        };
        cds.reindex()?;
        Ok(cds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
