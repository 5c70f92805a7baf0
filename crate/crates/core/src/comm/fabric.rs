//! Shared transport backing one world of simulated ranks.
//!
//! Messages are opaque byte payloads in per-(sender, receiver, tag) FIFO
//! queues guarded by a single mutex/condvar pair. A receive blocks until a
//! matching payload arrives, the sender terminates (shut-down error), or all
//! live rank workers are found blocked with nothing deliverable (deadlock
//! error). Worker threads of stream pools use `external` receives, which are
//! exempt from the rank-worker deadlock bookkeeping because their matching
//! sends also come from pools.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use crate::error::{Error, Result};

/// Message tag namespaces. User tags can never collide with the internal
/// tags used by collectives, star forests, and stream-side reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Tag {
    User(u64),
    Coll(u64),
    Sf(u64),
    AsyncColl(u64),
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tag::User(t) => write!(f, "user:{t}"),
            Tag::Coll(t) => write!(f, "coll:{t}"),
            Tag::Sf(t) => write!(f, "sf:{t}"),
            Tag::AsyncColl(t) => write!(f, "async-coll:{t}"),
        }
    }
}

#[derive(Default)]
pub(crate) struct RankCounters {
    /// Global scalar/vector reductions performed by this rank.
    pub reductions: AtomicU64,
    /// Next sequence number for blocking collectives.
    pub coll_seq: AtomicU64,
    /// Next sequence number for collectives enqueued as stream tasks.
    pub async_coll_seq: AtomicU64,
    /// Next star-forest instance id (matched across ranks by collective order).
    pub sf_seq: AtomicU64,
}

struct FabricState {
    queues: HashMap<(usize, usize, Tag), VecDeque<Vec<u8>>>,
    finished: Vec<bool>,
    finished_count: usize,
    /// rank worker -> (src, tag) it is blocked on
    blocked: HashMap<usize, (usize, Tag)>,
    pending_msgs: usize,
    deadlocked: bool,
}

pub(crate) struct Fabric {
    size: usize,
    state: Mutex<FabricState>,
    cv: Condvar,
    pub(crate) counters: Vec<RankCounters>,
}

impl Fabric {
    pub fn new(size: usize) -> Fabric {
        Fabric {
            size,
            state: Mutex::new(FabricState {
                queues: HashMap::new(),
                finished: vec![false; size],
                finished_count: 0,
                blocked: HashMap::new(),
                pending_msgs: 0,
                deadlocked: false,
            }),
            cv: Condvar::new(),
            counters: (0..size).map(|_| RankCounters::default()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.size {
            return Err(Error::InvalidRank { rank, size: self.size });
        }
        Ok(())
    }

    pub fn send(&self, src: usize, dst: usize, tag: Tag, payload: Vec<u8>) -> Result<()> {
        self.check_rank(src)?;
        self.check_rank(dst)?;
        let mut st = self.state.lock().unwrap();
        st.queues.entry((src, dst, tag)).or_default().push_back(payload);
        st.pending_msgs += 1;
        drop(st);
        self.cv.notify_all();
        Ok(())
    }

    /// Blocking receive. `external` marks calls from stream pool workers.
    pub fn recv(&self, me: usize, src: usize, tag: Tag, external: bool) -> Result<Vec<u8>> {
        self.check_rank(me)?;
        self.check_rank(src)?;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(q) = st.queues.get_mut(&(src, me, tag)) {
                if let Some(payload) = q.pop_front() {
                    st.pending_msgs -= 1;
                    if !external {
                        st.blocked.remove(&me);
                    }
                    return Ok(payload);
                }
            }
            if st.deadlocked {
                if !external {
                    st.blocked.remove(&me);
                }
                return Err(Error::Deadlock);
            }
            if external {
                if st.finished_count == self.size {
                    return Err(Error::WorldShutDown { src, tag: tag.to_string() });
                }
            } else {
                if st.finished[src] {
                    st.blocked.remove(&me);
                    return Err(Error::WorldShutDown { src, tag: tag.to_string() });
                }
                st.blocked.insert(me, (src, tag));
                if self.all_blocked_without_progress(&st) {
                    st.deadlocked = true;
                    st.blocked.remove(&me);
                    drop(st);
                    self.cv.notify_all();
                    return Err(Error::Deadlock);
                }
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    /// True when every unfinished rank worker sits in a fabric receive and no
    /// blocked receive has a deliverable message.
    fn all_blocked_without_progress(&self, st: &FabricState) -> bool {
        if st.blocked.len() + st.finished_count < self.size {
            return false;
        }
        !st.blocked.iter().any(|(&me, &(src, tag))| {
            st.queues.get(&(src, me, tag)).is_some_and(|q| !q.is_empty())
        })
    }

    pub fn mark_finished(&self, rank: usize) {
        let mut st = self.state.lock().unwrap();
        if !st.finished[rank] {
            st.finished[rank] = true;
            st.finished_count += 1;
        }
        drop(st);
        self.cv.notify_all();
    }

    /// Teardown check run after all rank workers joined.
    pub fn verify_drained(&self) -> Result<()> {
        let st = self.state.lock().unwrap();
        if st.pending_msgs == 0 {
            return Ok(());
        }
        let first = st
            .queues
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(&(src, dst, tag), q)| format!("{} message(s) from rank {src} to rank {dst} tag {tag}", q.len()))
            .min()
            .unwrap_or_default();
        Err(Error::UndeliveredMessages { count: st.pending_msgs, first })
    }

    pub fn reduction_count(&self, rank: usize) -> u64 {
        self.counters[rank].reductions.load(Ordering::Relaxed)
    }

    pub fn next_coll_tag(&self, rank: usize) -> Tag {
        Tag::Coll(self.counters[rank].coll_seq.fetch_add(1, Ordering::Relaxed))
    }

    pub fn next_async_coll_tag(&self, rank: usize) -> Tag {
        Tag::AsyncColl(self.counters[rank].async_coll_seq.fetch_add(1, Ordering::Relaxed))
    }

    pub fn next_sf_id(&self, rank: usize) -> u64 {
        self.counters[rank].sf_seq.fetch_add(1, Ordering::Relaxed)
    }
}

const HDR_DATA: u8 = 0;
const HDR_ERROR: u8 = 1;

/// Element-wise sum allreduce: gather to rank 0, accumulate in ascending rank
/// order, broadcast the result. The accumulation order is fixed, so results
/// are bit-deterministic across runs at a given rank count.
pub(crate) fn allreduce_sum(
    fabric: &Fabric,
    rank: usize,
    tag: Tag,
    values: &[f64],
    external: bool,
) -> Result<Vec<f64>> {
    fabric.counters[rank].reductions.fetch_add(1, Ordering::Relaxed);
    let size = fabric.size();
    if size == 1 {
        return Ok(values.to_vec());
    }
    if rank == 0 {
        let mut acc = values.to_vec();
        let mut bad: Option<Error> = None;
        for src in 1..size {
            let payload = fabric.recv(0, src, tag, external)?;
            let got = super::codec::decode_f64s(&payload[1..])?;
            if got.len() != acc.len() && bad.is_none() {
                bad = Some(Error::AllreduceLengthMismatch {
                    rank: src,
                    expected: acc.len(),
                    got: got.len(),
                });
                continue;
            }
            if bad.is_none() {
                for (a, v) in acc.iter_mut().zip(&got) {
                    *a += v;
                }
            }
        }
        let reply = match &bad {
            None => {
                let mut p = vec![HDR_DATA];
                p.extend_from_slice(&super::codec::encode_f64s(&acc));
                p
            }
            Some(_) => vec![HDR_ERROR],
        };
        for dst in 1..size {
            fabric.send(0, dst, tag, reply.clone())?;
        }
        match bad {
            None => Ok(acc),
            Some(e) => Err(e),
        }
    } else {
        let mut p = vec![HDR_DATA];
        p.extend_from_slice(&super::codec::encode_f64s(values));
        fabric.send(rank, 0, tag, p)?;
        let reply = fabric.recv(rank, 0, tag, external)?;
        match reply[0] {
            HDR_DATA => super::codec::decode_f64s(&reply[1..]),
            _ => Err(Error::CollectiveAborted),
        }
    }
}

/// Variable-length gather of byte payloads to every rank (rank 0 relays).
/// Returned vector is indexed by source rank.
pub(crate) fn allgather_bytes(
    fabric: &Fabric,
    rank: usize,
    tag: Tag,
    mine: Vec<u8>,
) -> Result<Vec<Vec<u8>>> {
    let size = fabric.size();
    if size == 1 {
        return Ok(vec![mine]);
    }
    if rank == 0 {
        let mut all = vec![Vec::new(); size];
        all[0] = mine;
        for src in 1..size {
            all[src] = fabric.recv(0, src, tag, false)?;
        }
        let packed = super::codec::encode_sections(&all);
        for dst in 1..size {
            fabric.send(0, dst, tag, packed.clone())?;
        }
        Ok(all)
    } else {
        fabric.send(rank, 0, tag, mine)?;
        let packed = fabric.recv(rank, 0, tag, false)?;
        super::codec::decode_sections(&packed)
    }
}
