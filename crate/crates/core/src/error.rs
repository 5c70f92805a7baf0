//! Crate-wide error type.
//!
//! One enum covers all modules so that collective operations can surface a
//! failure from any layer (transport, graph setup, assembly, scheduling,
//! solves) through a single `Result` alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // transport
    #[error("world shut down: recv(src={src}, tag={tag}) cannot be matched, sender terminated")]
    WorldShutDown { src: usize, tag: String },
    #[error("deadlock: every live rank is blocked in recv with no deliverable message")]
    Deadlock,
    #[error("rank {rank} failed: {detail}")]
    RankFailed { rank: usize, detail: String },
    #[error("world teardown found {count} undelivered message(s), first: {first}")]
    UndeliveredMessages { count: usize, first: String },
    #[error("invalid rank {rank} for world of size {size}")]
    InvalidRank { rank: usize, size: usize },
    #[error("allreduce length mismatch: rank {rank} contributed {got} values, expected {expected}")]
    AllreduceLengthMismatch { rank: usize, expected: usize, got: usize },
    #[error("collective operation aborted by a failure on another rank")]
    CollectiveAborted,
    #[error("payload decode failed: {0}")]
    Codec(String),

    // layouts and vectors
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("index {index} out of range for global size {size} (entry {k})")]
    IndexOutOfRange { k: usize, index: i64, size: usize },
    #[error("vector length {got} does not match expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no assembly plan: call the preallocation step first")]
    NoPlan,
    #[error("host copy is stale; synchronize the device side first")]
    HostStale,
    #[error("object is not registered with a stream world")]
    NotRegistered,

    // star forests
    #[error("star forest leaf {leaf} on rank {rank} references root offset {offset} on rank {owner}, which owns only {nroots} roots")]
    SfOffsetOutOfRange { rank: usize, leaf: usize, owner: usize, offset: usize, nroots: usize },
    #[error("star forest operation already in progress")]
    SfPending,
    #[error("star forest end without a matching begin")]
    SfNoPending,
    #[error("star forest end does not match the pending begin (kind or op differs)")]
    SfMismatchedEnd,
    #[error("star forest buffer too small: need {need}, got {got}")]
    SfBufferTooSmall { need: usize, got: usize },
    #[error("reduce op {0} is not supported for raw byte transfers")]
    SfRawOpUnsupported(String),

    // stream engine
    #[error("task submitted from inside a task on the same context")]
    ReentrantSubmit,
    #[error("context already joined")]
    DoubleJoin,
    #[error("intent end without a matching begin for object {0}")]
    IntentUnbalanced(u64),
    #[error("scalar or vector belongs to a different stream world")]
    WorldMismatch,
    #[error("scalar expression exceeds maximum depth {max} (got {depth})")]
    ExprTooDeep { depth: usize, max: usize },
    #[error("task failed: {0}")]
    TaskFailed(String),

    // solvers
    #[error("matrix is not symmetric positive definite: p^T A p = {0:e}")]
    NotSpd(f64),
    #[error("numerical breakdown: |{quantity}| = {value:e} below safe threshold")]
    Breakdown { quantity: &'static str, value: f64 },
    #[error("invalid scalar operation: {0}")]
    ScalarMath(String),
    #[error("zero diagonal entry at row {row}{}", .lane.map(|l| format!(" in lane {l}")).unwrap_or_default())]
    ZeroDiagonal { row: usize, lane: Option<usize> },
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),

    // limited-memory BFGS
    #[error("history degenerate: {0}")]
    DegenerateHistory(String),
    #[error("nonpositive time interval: {0}")]
    NonpositiveTime(f64),

    // i/o
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
