//! In-process multi-rank worlds.
//!
//! A world of `R` ranks runs as `R` concurrent worker threads in one
//! process, each owning a [`Communicator`] handle. Point-to-point messages
//! are FIFO per (sender, receiver, tag); collectives gather to rank 0 and
//! broadcast back, accumulating in ascending rank order so results are
//! bit-deterministic across runs. Worlds are torn down when every program
//! returns; teardown fails if any message was left undelivered.

pub mod codec;
pub(crate) mod fabric;

use std::cell::Cell;
use std::marker::PhantomData;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use crate::error::{Error, Result};
use fabric::{Fabric, Tag};

/// How values combine when communication fans in.
///
/// `Sum` is associative over the deterministic accumulation orders used by
/// this crate; `Replace` keeps the last contribution in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Replace,
    Sum,
}

/// Per-rank handle to a world. Owned by exactly one worker thread at a time;
/// the handle is `Send` but deliberately not `Sync`.
#[derive(Clone)]
pub struct Communicator {
    fabric: Arc<Fabric>,
    rank: usize,
    _not_sync: PhantomData<Cell<()>>,
}

impl Communicator {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.fabric.size()
    }

    /// One-rank world on the calling thread, handy for rank-local use of
    /// collective-flavored interfaces.
    pub fn solo() -> Communicator {
        Communicator { fabric: Arc::new(Fabric::new(1)), rank: 0, _not_sync: PhantomData }
    }

    /// Non-blocking enqueue of `payload` for `dest`.
    pub fn send(&self, dest: usize, tag: u64, payload: &[u8]) -> Result<()> {
        self.fabric.send(self.rank, dest, Tag::User(tag), payload.to_vec())
    }

    /// Blocking receive of the oldest matching message from `src`.
    pub fn recv(&self, src: usize, tag: u64) -> Result<Vec<u8>> {
        self.fabric.recv(self.rank, src, Tag::User(tag), false)
    }

    /// Element-wise global sum; every rank receives the same result.
    /// All ranks must call collectives in the same order.
    pub fn allreduce_sum(&self, values: &[f64]) -> Result<Vec<f64>> {
        let tag = self.fabric.next_coll_tag(self.rank);
        fabric::allreduce_sum(&self.fabric, self.rank, tag, values, false)
    }

    pub fn barrier(&self) -> Result<()> {
        self.allreduce_sum(&[]).map(|_| ())
    }

    /// Gathers one byte payload per rank to every rank.
    pub fn allgather_bytes(&self, mine: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let tag = self.fabric.next_coll_tag(self.rank);
        fabric::allgather_bytes(&self.fabric, self.rank, tag, mine)
    }

    /// Number of global reductions this rank has performed.
    pub fn reduction_count(&self) -> u64 {
        self.fabric.reduction_count(self.rank)
    }

    pub(crate) fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub(crate) fn from_parts(fabric: Arc<Fabric>, rank: usize) -> Communicator {
        Communicator { fabric, rank, _not_sync: PhantomData }
    }
}

struct FinishGuard<'a> {
    fabric: &'a Fabric,
    rank: usize,
}

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        self.fabric.mark_finished(self.rank);
    }
}

pub(crate) fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with non-string payload".to_string()
    }
}

/// Runs `program` on `size` concurrent rank workers and collects their
/// results in rank order. The first failing rank (by rank index) aborts the
/// world; teardown reports undelivered messages as an error.
pub fn spawn_world<T, F>(size: usize, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Communicator) -> Result<T> + Send + Sync,
{
    assert!(size > 0, "world needs at least one rank");
    let fabric = Arc::new(Fabric::new(size));
    let program = &program;
    let mut outcomes: Vec<Option<std::result::Result<Result<T>, String>>> =
        (0..size).map(|_| None).collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(size);
        for rank in 0..size {
            let fabric = Arc::clone(&fabric);
            handles.push(scope.spawn(move || {
                let guard = FinishGuard { fabric: &fabric, rank };
                let comm = Communicator::from_parts(Arc::clone(&fabric), rank);
                let out = catch_unwind(AssertUnwindSafe(|| program(comm)))
                    .map_err(panic_message);
                drop(guard);
                out
            }));
        }
        for (rank, h) in handles.into_iter().enumerate() {
            outcomes[rank] = Some(h.join().unwrap_or_else(|p| Err(panic_message(p))));
        }
    });

    // prefer a specific failure over a rank that merely aborted a collective
    // because someone else failed
    let generic = Error::CollectiveAborted.to_string();
    let mut first_failure: Option<(usize, String)> = None;
    let mut results = Vec::with_capacity(size);
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        let detail = match outcome.expect("worker outcome recorded") {
            Err(panic_msg) => Some(panic_msg),
            Ok(Err(e)) => Some(e.to_string()),
            Ok(Ok(v)) => {
                results.push(v);
                None
            }
        };
        if let Some(detail) = detail {
            match &first_failure {
                None => first_failure = Some((rank, detail)),
                Some((_, prior)) if *prior == generic && detail != generic => {
                    first_failure = Some((rank, detail))
                }
                Some(_) => {}
            }
        }
    }
    if let Some((rank, detail)) = first_failure {
        return Err(Error::RankFailed { rank, detail });
    }
    fabric.verify_drained()?;
    Ok(results)
}
