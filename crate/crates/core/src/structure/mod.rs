//! Structure analysis: blocking of interactions, coarsening of the tree and
//! the computation-ordered storage layout built from both.

pub mod blocking;
pub mod cds;
pub mod coarsen;

pub use blocking::{block_interactions, blocking, Block, BlockRow, BlockSet, InteractionKind};
pub use cds::Cds;
pub use coarsen::{bin_pack, coarsening, disjoint_subtrees, node_cost, CoarsenLevel, CoarsenSet, Partition, SubTree};
