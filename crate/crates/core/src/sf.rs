//! Star forests: bipartite communication graphs from owned roots to local
//! leaves.
//!
//! Each rank owns `nroots` root slots; leaves are local array indices (holes
//! allowed) that each reference one remote or local root as (owner rank,
//! offset). Broadcast moves root values to leaves, reduce moves leaf values
//! to roots; both are split-phase so computation can overlap the exchange.
//!
//! All pack and unpack plans are grouped per neighbor rank and ordered by
//! ascending (rank, root offset, leaf index), which makes fan-in reductions
//! deterministic: contributions to one root accumulate by ascending source
//! rank, then ascending leaf index within a rank. `Replace` with fan-in
//! greater than one therefore keeps the last contribution in that order.

use std::sync::{Arc, Mutex};

use crate::comm::codec;
use crate::comm::fabric::{allreduce_sum, Fabric, Tag};
use crate::comm::{Communicator, ReduceOp};
use crate::error::{Error, Result};

/// One leaf-to-root edge supplied at setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafSpec {
    /// Local leaf index (index into leaf-side data arrays).
    pub leaf: usize,
    /// Rank owning the referenced root.
    pub root_rank: usize,
    /// Offset of the root on its owner.
    pub root_offset: usize,
}

/// Gather/scatter plan for one neighbor; contiguous index runs skip the
/// indexed pack loop.
#[derive(Debug)]
enum Pack {
    Contiguous { start: usize, len: usize },
    Indexed(Vec<usize>),
}

impl Pack {
    fn from_indices(idx: Vec<usize>) -> Pack {
        let contiguous = idx.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous && !idx.is_empty() {
            Pack::Contiguous { start: idx[0], len: idx.len() }
        } else {
            Pack::Indexed(idx)
        }
    }

    fn len(&self) -> usize {
        match self {
            Pack::Contiguous { len, .. } => *len,
            Pack::Indexed(v) => v.len(),
        }
    }

    fn gather(&self, src: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Pack::Contiguous { start, len } => out.extend_from_slice(&src[*start..*start + *len]),
            Pack::Indexed(idx) => out.extend(idx.iter().map(|&i| src[i])),
        }
    }

    fn scatter(&self, vals: &[f64], dst: &mut [f64], op: ReduceOp) {
        let apply = |slot: &mut f64, v: f64| match op {
            ReduceOp::Replace => *slot = v,
            ReduceOp::Sum => *slot += v,
        };
        match self {
            Pack::Contiguous { start, .. } => {
                for (i, &v) in vals.iter().enumerate() {
                    apply(&mut dst[start + i], v);
                }
            }
            Pack::Indexed(idx) => {
                for (&i, &v) in idx.iter().zip(vals) {
                    apply(&mut dst[i], v);
                }
            }
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            Pack::Contiguous { start, len } => len.checked_sub(1).map(|l| start + l),
            Pack::Indexed(idx) => idx.iter().copied().max(),
        }
    }
}

/// Neighbor on the leaf side: a rank owning roots this rank references.
#[derive(Debug)]
struct LeafNeighbor {
    rank: usize,
    /// Leaf indices in pack order (ascending root offset, then leaf index).
    leaves: Pack,
}

/// Neighbor on the root side: a rank referencing roots this rank owns.
#[derive(Debug)]
struct RootNeighbor {
    rank: usize,
    /// Root offsets in the neighbor's pack order.
    offsets: Pack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Bcast,
    Reduce,
}

struct Buffers {
    /// Packed self-exchange payload (owner == this rank), shared by both phases.
    selfbuf: Vec<f64>,
    scratch: Vec<f64>,
}

pub struct StarForest {
    fabric: Arc<Fabric>,
    rank: usize,
    size: usize,
    tag: Tag,
    nroots: usize,
    nleaves: usize,
    max_leaf: Option<usize>,
    leaf_side: Vec<LeafNeighbor>,
    root_side: Vec<RootNeighbor>,
    bufs: Mutex<Buffers>,
    pending: Mutex<Option<(Phase, ReduceOp)>>,
}

impl StarForest {
    /// Collective construction. Every rank passes its root count and leaf
    /// specs; owners validate the referenced offsets, and an out-of-range
    /// offset aborts the build on all ranks.
    pub fn setup(comm: &Communicator, nroots: usize, leaves: &[LeafSpec]) -> Result<Arc<StarForest>> {
        let fabric = Arc::clone(comm.fabric());
        let rank = comm.rank();
        let size = comm.size();
        let tag = Tag::Sf(fabric.next_sf_id(rank));

        for spec in leaves {
            if spec.root_rank >= size {
                return Err(Error::InvalidRank { rank: spec.root_rank, size });
            }
        }

        // group edges by owner; pack order is (root offset, leaf index)
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); size];
        for spec in leaves {
            groups[spec.root_rank].push((spec.root_offset, spec.leaf));
        }
        for g in &mut groups {
            g.sort_unstable();
        }

        // one request list per owner: (offset, leaf) pairs in pack order
        for dst in 0..size {
            if dst == rank {
                continue;
            }
            let flat: Vec<i64> = groups[dst]
                .iter()
                .flat_map(|&(off, leaf)| [off as i64, leaf as i64])
                .collect();
            fabric.send(rank, dst, tag, codec::encode_i64s(&flat))?;
        }

        let mut root_side = Vec::new();
        let mut bad: Option<Error> = None;
        for src in 0..size {
            let pairs: Vec<(usize, usize)> = if src == rank {
                groups[rank].clone()
            } else {
                let flat = codec::decode_i64s(&fabric.recv(rank, src, tag, false)?)?;
                flat.chunks_exact(2).map(|c| (c[0] as usize, c[1] as usize)).collect()
            };
            if pairs.is_empty() {
                continue;
            }
            for &(off, leaf) in &pairs {
                if off >= nroots && bad.is_none() {
                    bad = Some(Error::SfOffsetOutOfRange {
                        rank: src,
                        leaf,
                        owner: rank,
                        offset: off,
                        nroots,
                    });
                }
            }
            root_side.push(RootNeighbor {
                rank: src,
                offsets: Pack::from_indices(pairs.iter().map(|&(off, _)| off).collect()),
            });
        }

        let flag = [if bad.is_some() { 1.0 } else { 0.0 }];
        let verdict = allreduce_sum(&fabric, rank, Tag::Sf(fabric.next_sf_id(rank)), &flag, false)?;
        if verdict[0] > 0.0 {
            return Err(bad.unwrap_or(Error::CollectiveAborted));
        }

        let leaf_side: Vec<LeafNeighbor> = (0..size)
            .filter(|&r| !groups[r].is_empty())
            .map(|r| LeafNeighbor {
                rank: r,
                leaves: Pack::from_indices(groups[r].iter().map(|&(_, leaf)| leaf).collect()),
            })
            .collect();

        let max_leaf = leaf_side.iter().filter_map(|n| n.leaves.max_index()).max();
        let self_len = groups[rank].len();

        Ok(Arc::new(StarForest {
            fabric,
            rank,
            size,
            tag,
            nroots,
            nleaves: leaves.len(),
            max_leaf,
            leaf_side,
            root_side,
            bufs: Mutex::new(Buffers { selfbuf: vec![0.0; self_len], scratch: Vec::new() }),
            pending: Mutex::new(None),
        }))
    }

    pub fn nroots(&self) -> usize {
        self.nroots
    }

    pub fn nleaves(&self) -> usize {
        self.nleaves
    }

    /// World size the forest was built over.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Smallest leaf-array length this forest can address.
    pub fn leaf_span(&self) -> usize {
        self.max_leaf.map_or(0, |m| m + 1)
    }

    fn check_root_len(&self, len: usize) -> Result<()> {
        if len < self.nroots {
            return Err(Error::SfBufferTooSmall { need: self.nroots, got: len });
        }
        Ok(())
    }

    fn check_leaf_len(&self, len: usize) -> Result<()> {
        if len < self.leaf_span() {
            return Err(Error::SfBufferTooSmall { need: self.leaf_span(), got: len });
        }
        Ok(())
    }

    fn begin(&self, phase: Phase, op: ReduceOp) -> Result<()> {
        let mut pending = self.pending.lock().unwrap();
        if pending.is_some() {
            return Err(Error::SfPending);
        }
        *pending = Some((phase, op));
        Ok(())
    }

    fn end(&self, phase: Phase, op: ReduceOp) -> Result<()> {
        let mut pending = self.pending.lock().unwrap();
        match pending.take() {
            None => Err(Error::SfNoPending),
            Some(p) if p != (phase, op) => {
                *pending = Some(p);
                Err(Error::SfMismatchedEnd)
            }
            Some(_) => Ok(()),
        }
    }

    fn send_packed(&self, to: usize, data: &[f64]) -> Result<()> {
        self.fabric.send(self.rank, to, self.tag, codec::encode_f64s(data))
    }

    fn recv_packed(&self, from: usize, external: bool) -> Result<Vec<f64>> {
        codec::decode_f64s(&self.fabric.recv(self.rank, from, self.tag, external)?)
    }

    fn pack_and_send_roots(&self, rootdata: &[f64]) -> Result<()> {
        self.check_root_len(rootdata.len())?;
        let mut bufs = self.bufs.lock().unwrap();
        let Buffers { selfbuf, scratch } = &mut *bufs;
        for nb in &self.root_side {
            if nb.rank == self.rank {
                nb.offsets.gather(rootdata, selfbuf);
            } else {
                nb.offsets.gather(rootdata, scratch);
                self.send_packed(nb.rank, scratch)?;
            }
        }
        Ok(())
    }

    fn recv_and_unpack_leaves(&self, leafdata: &mut [f64], op: ReduceOp, external: bool) -> Result<()> {
        self.check_leaf_len(leafdata.len())?;
        let bufs = self.bufs.lock().unwrap();
        for nb in &self.leaf_side {
            if nb.rank == self.rank {
                nb.leaves.scatter(&bufs.selfbuf, leafdata, op);
            } else {
                let vals = self.recv_packed(nb.rank, external)?;
                if vals.len() != nb.leaves.len() {
                    return Err(Error::Codec(format!(
                        "star forest payload from rank {} has {} values, expected {}",
                        nb.rank,
                        vals.len(),
                        nb.leaves.len()
                    )));
                }
                nb.leaves.scatter(&vals, leafdata, op);
            }
        }
        Ok(())
    }

    fn pack_and_send_leaves(&self, leafdata: &[f64]) -> Result<()> {
        self.check_leaf_len(leafdata.len())?;
        let mut bufs = self.bufs.lock().unwrap();
        let Buffers { selfbuf, scratch } = &mut *bufs;
        for nb in &self.leaf_side {
            if nb.rank == self.rank {
                nb.leaves.gather(leafdata, selfbuf);
            } else {
                nb.leaves.gather(leafdata, scratch);
                self.send_packed(nb.rank, scratch)?;
            }
        }
        Ok(())
    }

    fn recv_and_unpack_roots(&self, rootdata: &mut [f64], op: ReduceOp, external: bool) -> Result<()> {
        self.check_root_len(rootdata.len())?;
        let bufs = self.bufs.lock().unwrap();
        for nb in &self.root_side {
            if nb.rank == self.rank {
                nb.offsets.scatter(&bufs.selfbuf, rootdata, op);
            } else {
                let vals = self.recv_packed(nb.rank, external)?;
                if vals.len() != nb.offsets.len() {
                    return Err(Error::Codec(format!(
                        "star forest payload from rank {} has {} values, expected {}",
                        nb.rank,
                        vals.len(),
                        nb.offsets.len()
                    )));
                }
                nb.offsets.scatter(&vals, rootdata, op);
            }
        }
        Ok(())
    }

    /// Starts a root-to-leaf broadcast: packs and sends root values.
    pub fn bcast_begin(&self, rootdata: &[f64], op: ReduceOp) -> Result<()> {
        self.begin(Phase::Bcast, op)?;
        self.pack_and_send_roots(rootdata)
    }

    /// Finishes a broadcast: receives and applies values at the leaves.
    pub fn bcast_end(&self, leafdata: &mut [f64], op: ReduceOp) -> Result<()> {
        self.end(Phase::Bcast, op)?;
        self.recv_and_unpack_leaves(leafdata, op, false)
    }

    pub fn bcast(&self, rootdata: &[f64], leafdata: &mut [f64], op: ReduceOp) -> Result<()> {
        self.bcast_begin(rootdata, op)?;
        self.bcast_end(leafdata, op)
    }

    /// Starts a leaf-to-root reduction: packs and sends leaf values.
    pub fn reduce_begin(&self, leafdata: &[f64], op: ReduceOp) -> Result<()> {
        self.begin(Phase::Reduce, op)?;
        self.pack_and_send_leaves(leafdata)
    }

    /// Finishes a reduction: accumulates received values into root slots in
    /// ascending (source rank, leaf index) order.
    pub fn reduce_end(&self, rootdata: &mut [f64], op: ReduceOp) -> Result<()> {
        self.end(Phase::Reduce, op)?;
        self.recv_and_unpack_roots(rootdata, op, false)
    }

    pub fn reduce(&self, leafdata: &[f64], rootdata: &mut [f64], op: ReduceOp) -> Result<()> {
        self.reduce_begin(leafdata, op)?;
        self.reduce_end(rootdata, op)
    }

    /// Whole broadcast usable from stream pool workers (blocking receive is
    /// marked external so it is exempt from rank-worker deadlock accounting).
    pub(crate) fn exchange_bcast(
        &self,
        rootdata: &[f64],
        leafdata: &mut [f64],
        op: ReduceOp,
        external: bool,
    ) -> Result<()> {
        self.begin(Phase::Bcast, op)?;
        self.pack_and_send_roots(rootdata)?;
        self.end(Phase::Bcast, op)?;
        self.recv_and_unpack_leaves(leafdata, op, external)
    }

    /// Broadcast of fixed-size opaque items; `Replace` only.
    pub fn bcast_raw(
        &self,
        unit: usize,
        rootdata: &[u8],
        leafdata: &mut [u8],
        op: ReduceOp,
    ) -> Result<()> {
        if op != ReduceOp::Replace {
            return Err(Error::SfRawOpUnsupported(format!("{op:?}")));
        }
        assert!(unit > 0, "raw unit must be positive");
        if rootdata.len() < self.nroots * unit {
            return Err(Error::SfBufferTooSmall { need: self.nroots * unit, got: rootdata.len() });
        }
        if leafdata.len() < self.leaf_span() * unit {
            return Err(Error::SfBufferTooSmall {
                need: self.leaf_span() * unit,
                got: leafdata.len(),
            });
        }
        // pack bytes per neighbor
        let gather_bytes = |pack: &Pack, src: &[u8]| -> Vec<u8> {
            let mut out = Vec::with_capacity(pack.len() * unit);
            match pack {
                Pack::Contiguous { start, len } => {
                    out.extend_from_slice(&src[start * unit..(start + len) * unit])
                }
                Pack::Indexed(idx) => {
                    for &i in idx {
                        out.extend_from_slice(&src[i * unit..(i + 1) * unit]);
                    }
                }
            }
            out
        };
        let mut selfpkt = None;
        for nb in &self.root_side {
            let pkt = gather_bytes(&nb.offsets, rootdata);
            if nb.rank == self.rank {
                selfpkt = Some(pkt);
            } else {
                self.fabric.send(self.rank, nb.rank, self.tag, pkt)?;
            }
        }
        for nb in &self.leaf_side {
            let pkt = if nb.rank == self.rank {
                selfpkt.take().expect("self packet present")
            } else {
                self.fabric.recv(self.rank, nb.rank, self.tag, false)?
            };
            if pkt.len() != nb.leaves.len() * unit {
                return Err(Error::Codec(format!(
                    "raw star forest payload from rank {} has {} bytes, expected {}",
                    nb.rank,
                    pkt.len(),
                    nb.leaves.len() * unit
                )));
            }
            match &nb.leaves {
                Pack::Contiguous { start, len } => {
                    leafdata[start * unit..(start + len) * unit].copy_from_slice(&pkt)
                }
                Pack::Indexed(idx) => {
                    for (slot, &i) in idx.iter().enumerate() {
                        leafdata[i * unit..(i + 1) * unit]
                            .copy_from_slice(&pkt[slot * unit..(slot + 1) * unit]);
                    }
                }
            }
        }
        Ok(())
    }
}
