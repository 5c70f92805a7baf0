//! Distributed sparse linear algebra on an in-process communication fabric.
//!
//! The crate simulates a multi-rank message-passing world with one thread per
//! rank, then builds the usual solver stack on top of it: star-forest
//! communication graphs, distributed vectors and CSR matrices with two-phase
//! coordinate assembly, an asynchronous task-stream engine with managed
//! scalars, Krylov solvers (synchronous, stream-asynchronous, and batched),
//! and limited-memory BFGS with three apply formulations.
//!
//! Everything is deterministic by construction: message queues are FIFO per
//! (sender, receiver, tag), reductions accumulate in ascending rank order,
//! and unpack plans have a fixed traversal order, so repeated runs produce
//! bit-identical results unless scheduler jitter is explicitly requested.

pub mod comm;
pub mod device_ops;
pub mod error;
pub mod krylov;
pub mod layout;
pub mod lbfgs;
pub mod mat;
pub mod object;
pub mod sf;
pub mod stream;
pub mod vector;

pub use comm::{spawn_world, Communicator, ReduceOp};
pub use device_ops::{
    axpy_async, aypx_async, copy_async, dot_async, dot_many_async, mat_mult_async, norm2_async,
    pointwise_mult_async, scale_async,
};
pub use error::{Error, Result};
pub use layout::Layout;
pub use lbfgs::{apply_varmetric, effective_bandwidth, BaseOperator, Formulation, LbfgsState};
pub use mat::{from_triplet_file, read_triplets, DistCsrMatrix, TripletFile};
pub use object::{next_object_id, ObjectId};
pub use sf::{LeafSpec, StarForest};
pub use stream::scalar::{scalar_compute, ManagedScalar, ScalarExpr};
pub use stream::{AccessMode, DeviceContext, StreamConfig, StreamStats, StreamWorld};
pub use vector::{DistVector, InsertMode};
