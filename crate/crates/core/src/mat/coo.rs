//! Two-phase coordinate assembly for distributed matrices.
//!
//! The structural pass ([`build_plan`]) routes (row, col) pairs to the rank
//! owning the row, deduplicates them into a CSR pattern, and records where
//! every contribution will come from in later value passes: a position in
//! the local call, or a slot in some rank's incoming payload. The value pass
//! ([`apply_values`]) then moves only numbers and accumulates them in a
//! fixed order per stored nonzero: local contributions by position in the
//! call, then received contributions by source rank and slot. Repeating a
//! value pass with the same input is bit-reproducible, and
//! [`assemble_baseline`] recomputes the same result through an entirely
//! different path (an allgather of all triplets) for use as a test oracle.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::comm::codec;
use crate::comm::fabric::{allreduce_sum, Fabric, Tag};
use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::vector::InsertMode;

/// Where one contribution to a stored nonzero comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Contribution {
    /// Position in the caller's value array.
    Local(usize),
    /// Slot in the payload received from `src`.
    Recv { src: usize, slot: usize },
}

pub(crate) struct CooPlan {
    /// Length of the coordinate arrays the plan was built for.
    pub nvals: usize,
    /// Per destination rank, ascending: positions to pack into the payload.
    pub send: Vec<(usize, Vec<usize>)>,
    /// Per source rank, ascending: expected payload length.
    pub recv: Vec<(usize, usize)>,
    /// Contribution runs per stored nonzero, in storage order.
    pub seg_ptr: Vec<usize>,
    pub contribs: Vec<Contribution>,
    pub tag: Tag,
}

/// Deduplicated local structure produced by the routing pass.
pub(crate) struct Assembled {
    /// Owned nonzeros as (local row, global col), sorted.
    pub entries: Vec<(usize, usize)>,
    pub plan: CooPlan,
}

/// Structural pass (collective). Entries with a negative row or column are
/// dropped; a row or column index at or beyond its global size fails on
/// every rank, naming the first offending entry on the rank that passed it.
pub(crate) fn build_plan(
    comm: &Communicator,
    row_layout: &Layout,
    col_layout: &Layout,
    rows: &[i64],
    cols: &[i64],
) -> Result<Assembled> {
    if rows.len() != cols.len() {
        return Err(Error::LengthMismatch { expected: rows.len(), got: cols.len() });
    }
    let rank = comm.rank();
    let nranks = comm.size();
    let fabric: Arc<Fabric> = Arc::clone(comm.fabric());

    let mut bad: Option<Error> = None;
    for (k, (&r, &c)) in rows.iter().zip(cols).enumerate() {
        if r < 0 || c < 0 {
            continue;
        }
        if r as usize >= row_layout.global_size() {
            bad = Some(Error::IndexOutOfRange { k, index: r, size: row_layout.global_size() });
            break;
        }
        if c as usize >= col_layout.global_size() {
            bad = Some(Error::IndexOutOfRange { k, index: c, size: col_layout.global_size() });
            break;
        }
    }
    let flag = [if bad.is_some() { 1.0 } else { 0.0 }];
    let verdict = allreduce_sum(&fabric, rank, fabric.next_coll_tag(rank), &flag, false)?;
    if verdict[0] > 0.0 {
        return Err(bad.unwrap_or(Error::CollectiveAborted));
    }

    // route kept triplets to row owners, preserving call order per owner
    let mut local: Vec<(usize, usize, usize)> = Vec::new(); // (k, lrow, gcol)
    let mut outgoing: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); nranks];
    for (k, (&r, &c)) in rows.iter().zip(cols).enumerate() {
        if r < 0 || c < 0 {
            continue;
        }
        let (r, c) = (r as usize, c as usize);
        let owner = row_layout.owner_of(r)?;
        if owner == rank {
            local.push((k, row_layout.to_local(rank, r), c));
        } else {
            outgoing[owner].push((k, r, c));
        }
    }

    let tag = fabric.next_coll_tag(rank);
    for dst in 0..nranks {
        if dst == rank {
            continue;
        }
        let flat: Vec<i64> = outgoing[dst]
            .iter()
            .flat_map(|&(_, r, c)| [r as i64, c as i64])
            .collect();
        fabric.send(rank, dst, tag, codec::encode_i64s(&flat))?;
    }

    // sources in the deterministic accumulation order: local first (by call
    // position), then each source rank ascending (by slot)
    let mut sources: Vec<((usize, usize), Contribution)> = local
        .iter()
        .map(|&(k, lrow, gcol)| ((lrow, gcol), Contribution::Local(k)))
        .collect();
    let mut recv: Vec<(usize, usize)> = Vec::new();
    for src in 0..nranks {
        if src == rank {
            continue;
        }
        let flat = codec::decode_i64s(&fabric.recv(rank, src, tag, false)?)?;
        let pairs = flat.chunks_exact(2);
        if !flat.is_empty() {
            recv.push((src, flat.len() / 2));
        }
        for (slot, pair) in pairs.enumerate() {
            let lrow = row_layout.to_local(rank, pair[0] as usize);
            sources.push(((lrow, pair[1] as usize), Contribution::Recv { src, slot }));
        }
    }

    sources.sort_by_key(|&(key, _)| key); // stable: preserves source order per key

    let mut entries: Vec<(usize, usize)> = Vec::new();
    let mut seg_ptr = vec![0usize];
    let mut contribs = Vec::with_capacity(sources.len());
    for (key, contrib) in sources {
        if entries.last() != Some(&key) {
            entries.push(key);
            seg_ptr.push(contribs.len());
        }
        contribs.push(contrib);
        *seg_ptr.last_mut().unwrap() = contribs.len();
    }

    let send: Vec<(usize, Vec<usize>)> = (0..nranks)
        .filter(|&d| d != rank && !outgoing[d].is_empty())
        .map(|d| (d, outgoing[d].iter().map(|&(k, _, _)| k).collect()))
        .collect();

    Ok(Assembled {
        entries,
        plan: CooPlan {
            nvals: rows.len(),
            send,
            recv,
            seg_ptr,
            contribs,
            tag: fabric.next_coll_tag(rank),
        },
    })
}

/// Value pass (collective): exchanges the numbers and folds them into
/// `target` (the stored nonzero values, in the storage order implied by
/// `perm`). `perm[i]` is the storage index of pattern entry `i`.
pub(crate) fn apply_values(
    comm: &Communicator,
    plan: &CooPlan,
    perm: &[usize],
    values: &[f64],
    mode: InsertMode,
    target: &mut [f64],
) -> Result<()> {
    if values.len() != plan.nvals {
        return Err(Error::LengthMismatch { expected: plan.nvals, got: values.len() });
    }
    let rank = comm.rank();
    let fabric = Arc::clone(comm.fabric());
    for &(dst, ref ks) in &plan.send {
        let vals: Vec<f64> = ks.iter().map(|&k| values[k]).collect();
        fabric.send(rank, dst, plan.tag, codec::encode_f64s(&vals))?;
    }
    let mut payloads: Vec<Vec<f64>> = Vec::with_capacity(plan.recv.len());
    for &(src, count) in &plan.recv {
        let vals = codec::decode_f64s(&fabric.recv(rank, src, plan.tag, false)?)?;
        if vals.len() != count {
            return Err(Error::Codec(format!(
                "assembly payload from rank {src} has {} values, expected {count}",
                vals.len()
            )));
        }
        payloads.push(vals);
    }
    // src rank -> payload position
    let src_index: BTreeMap<usize, usize> =
        plan.recv.iter().enumerate().map(|(i, &(src, _))| (src, i)).collect();

    if mode == InsertMode::Insert {
        target.fill(0.0);
    }
    for (entry, win) in plan.seg_ptr.windows(2).enumerate() {
        let slot = perm[entry];
        for c in &plan.contribs[win[0]..win[1]] {
            target[slot] += match *c {
                Contribution::Local(k) => values[k],
                Contribution::Recv { src, slot } => payloads[src_index[&src]][slot],
            };
        }
    }
    Ok(())
}

/// Independent assembly oracle: every rank gathers every rank's triplets and
/// accumulates its own rows in the same deterministic order the production
/// path uses (own contributions by call position, then other ranks ascending
/// by call position). Results must match [`apply_values`] bit for bit.
pub fn assemble_baseline(
    comm: &Communicator,
    row_layout: &Layout,
    rows: &[i64],
    cols: &[i64],
    values: &[f64],
) -> Result<BTreeMap<(usize, usize), f64>> {
    let rank = comm.rank();
    let sections = codec::encode_sections(&[
        codec::encode_i64s(rows),
        codec::encode_i64s(cols),
        codec::encode_f64s(values),
    ]);
    let gathered = comm.allgather_bytes(sections)?;

    let mut out: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut fold = |bytes: &[u8]| -> Result<()> {
        let parts = codec::decode_sections(bytes)?;
        let rs = codec::decode_i64s(&parts[0])?;
        let cs = codec::decode_i64s(&parts[1])?;
        let vs = codec::decode_f64s(&parts[2])?;
        for ((&r, &c), &v) in rs.iter().zip(&cs).zip(&vs) {
            if r < 0 || c < 0 {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if row_layout.owner_of(r)? != rank {
                continue;
            }
            *out.entry((r, c)).or_insert(0.0) += v;
        }
        Ok(())
    };
    fold(&gathered[rank])?;
    for (src, bytes) in gathered.iter().enumerate() {
        if src != rank {
            fold(bytes)?;
        }
    }
    Ok(out)
}
