//! Hierarchical kernel-matrix approximation with structure-aware evaluation.
//!
//! The crate compresses an implicit `n x n` kernel matrix `K(i, j) = k(x_i, x_j)`
//! into an H2 / HSS representation and multiplies it with dense matrices.
//! Work is split into three phases:
//!
//! * **inspector, phase one** ([`pipeline::inspector_p1`]): cluster tree,
//!   near/far interactions, nearest-neighbour sampling and blocking. Depends
//!   only on the points and the admissibility setting.
//! * **inspector, phase two** ([`pipeline::inspector_p2`]): low-rank
//!   compression, coarsening, the computation-ordered [`Cds`] storage and the
//!   evaluation plan. Depends on the kernel and the requested accuracy.
//! * **executor** ([`executor::Executor`]): the plan-driven parallel product
//!   `Y = K~ W`.
//!
//! Changing the kernel or accuracy only reruns phase two.

pub mod codec;
pub mod compression;
pub mod error;
pub mod executor;
pub mod interaction;
pub mod kernel;
pub mod matrix;
pub mod pipeline;
pub mod plan;
pub mod points;
pub mod reference;
pub mod sampling;
pub mod structure;
pub mod tree;

pub use compression::{compress, interpolative_decomposition, CompressedMatrix, NodeBasis};
pub use error::{Error, Result};
pub use executor::Executor;
pub use interaction::{AdmissibilityMode, HTree, NodeGeometry};
pub use kernel::Kernel;
pub use matrix::DenseMatrix;
pub use plan::{EvalPlan, PlanDefaults};
pub use points::{PointFormat, PointSet, Shape};
pub use sampling::{NeighborLists, SampleInfo, SamplingMode};
pub use structure::{BlockSet, Cds, CoarsenSet, InteractionKind};
pub use tree::{ClusterTree, SplitMethod};

/// Marker for "no node" in serialized topology arrays.
pub const NONE: usize = usize::MAX;
