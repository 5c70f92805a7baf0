//! Distributed vectors with a host copy and an optional device copy.
//!
//! Each rank stores the contiguous slice of the global vector its layout
//! assigns to it. The host copy is a plain buffer mutated through `&mut`
//! methods; once a vector is registered with a stream world it also carries
//! a device copy that asynchronous tasks read and write. A residency flag
//! tracks which copies are current, and transfers happen lazily: host to
//! device when an asynchronous operation is enqueued against a stale device
//! copy, device to host when [`DistVector::refresh_host`] is called after
//! device-side writes. Both directions are counted, so tests can assert that
//! repeated device work does not bounce data across the boundary.
//!
//! Coordinate assembly mirrors the matrix path: a preallocation pass routes
//! arbitrary (index, value) pairs to their owners and caches the routing
//! plan; the value pass then moves only numbers. Contributions accumulate in
//! a fixed order (local entries by position in the call, then received
//! entries by source rank and position), so assembled results are
//! reproducible bit for bit.

use std::cell::Cell;
use std::sync::{Arc, Mutex};

use crate::comm::codec;
use crate::comm::fabric::{allreduce_sum, Tag};
use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::object::{next_object_id, ObjectId};
use crate::sf::{LeafSpec, StarForest};
use crate::stream::StreamWorld;

/// How assembled values combine with what the vector already holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertMode {
    /// Contributions add to the current entries.
    Add,
    /// Entries touched by the call are replaced by the sum of the call's
    /// contributions to them; untouched entries keep their values.
    Insert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Residency {
    HostOnly,
    DeviceOnly,
    Both,
}

struct VecCooPlan {
    /// Length of the index array the plan was built for.
    nvals: usize,
    /// (position in call, local index), ascending position.
    local: Vec<(usize, usize)>,
    /// Per destination rank, ascending: positions in the call to pack.
    send: Vec<(usize, Vec<usize>)>,
    /// Per source rank, ascending: local indices in the sender's pack order.
    recv: Vec<(usize, Vec<usize>)>,
    /// Local indices receiving any contribution, sorted and deduplicated.
    touched: Vec<usize>,
    tag: Tag,
}

pub struct DistVector {
    id: ObjectId,
    layout: Layout,
    comm: Communicator,
    host: Vec<f64>,
    device: Arc<Mutex<Vec<f64>>>,
    world: Option<Arc<StreamWorld>>,
    residency: Cell<Residency>,
    h2d: Cell<u64>,
    d2h: Cell<u64>,
    plan: Option<VecCooPlan>,
}

impl DistVector {
    pub fn new(comm: &Communicator, layout: Layout) -> DistVector {
        let n = layout.local_size(comm.rank());
        DistVector {
            id: next_object_id(),
            layout,
            comm: comm.clone(),
            host: vec![0.0; n],
            device: Arc::new(Mutex::new(Vec::new())),
            world: None,
            residency: Cell::new(Residency::HostOnly),
            h2d: Cell::new(0),
            d2h: Cell::new(0),
            plan: None,
        }
    }

    pub fn from_local(comm: &Communicator, layout: Layout, local: Vec<f64>) -> Result<DistVector> {
        let expected = layout.local_size(comm.rank());
        if local.len() != expected {
            return Err(Error::LengthMismatch { expected, got: local.len() });
        }
        let mut v = DistVector::new(comm, layout);
        v.host = local;
        Ok(v)
    }

    pub fn id(&self) -> ObjectId {
        self.id
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn global_size(&self) -> usize {
        self.layout.global_size()
    }

    pub fn local_size(&self) -> usize {
        self.host.len()
    }

    /// Global index of the first locally owned entry.
    pub fn first_global(&self) -> usize {
        self.layout.start(self.comm.rank())
    }

    pub fn world(&self) -> Option<&Arc<StreamWorld>> {
        self.world.as_ref()
    }

    pub fn h2d_copies(&self) -> u64 {
        self.h2d.get()
    }

    pub fn d2h_copies(&self) -> u64 {
        self.d2h.get()
    }

    /// Binds the vector to a stream world so asynchronous operations can use
    /// it. The device copy starts stale and is filled on first use.
    pub fn register_with(&mut self, world: &Arc<StreamWorld>) -> Result<()> {
        if let Some(w) = &self.world {
            if !w.same_world(world) {
                return Err(Error::WorldMismatch);
            }
            return Ok(());
        }
        self.device.lock().unwrap().resize(self.host.len(), 0.0);
        self.world = Some(Arc::clone(world));
        Ok(())
    }

    fn host_valid(&self) -> bool {
        self.residency.get() != Residency::DeviceOnly
    }

    /// Read access to the locally owned entries; fails if pending device
    /// writes have made the host copy stale.
    pub fn local(&self) -> Result<&[f64]> {
        if !self.host_valid() {
            return Err(Error::HostStale);
        }
        Ok(&self.host)
    }

    /// Mutable access to the locally owned entries. Waits for every pending
    /// device task using this vector, refreshes the host copy if needed, and
    /// marks the device copy stale.
    pub fn local_mut(&mut self) -> Result<&mut [f64]> {
        if let Some(world) = &self.world {
            world.wait_object_rw(self.id)?;
        }
        if !self.host_valid() {
            self.pull_device()?;
        }
        self.residency.set(Residency::HostOnly);
        Ok(&mut self.host)
    }

    /// Brings the host copy up to date after device-side writes.
    pub fn refresh_host(&mut self) -> Result<()> {
        match self.residency.get() {
            Residency::HostOnly | Residency::Both => {
                if let Some(world) = &self.world {
                    world.check_error()?;
                }
                Ok(())
            }
            Residency::DeviceOnly => {
                let world = self.world.as_ref().ok_or(Error::NotRegistered)?;
                world.wait_object_read(self.id)?;
                self.pull_device()?;
                self.residency.set(Residency::Both);
                Ok(())
            }
        }
    }

    fn pull_device(&mut self) -> Result<()> {
        let device = self.device.lock().unwrap();
        if device.len() != self.host.len() {
            return Err(Error::NotRegistered);
        }
        self.host.copy_from_slice(&device);
        self.d2h.set(self.d2h.get() + 1);
        Ok(())
    }

    /// Makes the device copy current before enqueueing device work that
    /// reads this vector. Safe to call from the submitting thread only: a
    /// stale device copy implies no task in flight touches it.
    pub(crate) fn ensure_device(&self) -> Result<()> {
        let world = self.world.as_ref().ok_or(Error::NotRegistered)?;
        let _ = world;
        if self.residency.get() == Residency::HostOnly {
            let mut device = self.device.lock().unwrap();
            device.resize(self.host.len(), 0.0);
            device.copy_from_slice(&self.host);
            self.h2d.set(self.h2d.get() + 1);
            self.residency.set(Residency::Both);
        }
        Ok(())
    }

    /// Marks the host copy stale; call when enqueueing device work that
    /// writes this vector.
    pub(crate) fn begin_device_write(&self) {
        self.residency.set(Residency::DeviceOnly);
    }

    pub(crate) fn device_handle(&self) -> &Arc<Mutex<Vec<f64>>> {
        &self.device
    }

    pub(crate) fn check_compatible(&self, other: &DistVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(format!(
                "vector layouts differ: {} vs {} entries",
                self.layout.global_size(),
                other.layout.global_size()
            )));
        }
        if !Arc::ptr_eq(self.comm.fabric(), other.comm.fabric()) {
            return Err(Error::WorldMismatch);
        }
        Ok(())
    }

    /// Same layout, world registration, and communicator; entries zeroed.
    pub fn duplicate(&self) -> DistVector {
        let mut v = DistVector::new(&self.comm, self.layout.clone());
        if let Some(world) = &self.world {
            v.register_with(world).expect("fresh vector registers cleanly");
        }
        v
    }

    pub fn copy_from(&mut self, other: &DistVector) -> Result<()> {
        self.check_compatible(other)?;
        let src = other.local()?.to_vec();
        self.local_mut()?.copy_from_slice(&src);
        Ok(())
    }

    pub fn set_all(&mut self, value: f64) -> Result<()> {
        self.local_mut()?.fill(value);
        Ok(())
    }

    /// Global inner product (collective). Local partials accumulate in
    /// ascending rank order, so the result is identical on every rank and
    /// across runs.
    pub fn dot(&self, other: &DistVector) -> Result<f64> {
        self.check_compatible(other)?;
        let a = self.local()?;
        let b = other.local()?;
        let partial: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        Ok(self.comm.allreduce_sum(&[partial])?[0])
    }

    /// Global 2-norm (collective).
    pub fn norm2(&self) -> Result<f64> {
        Ok(self.dot(self)?.sqrt())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &DistVector) -> Result<()> {
        self.check_compatible(x)?;
        let xs = x.local()?.to_vec();
        for (y, xv) in self.local_mut()?.iter_mut().zip(xs) {
            *y += a * xv;
        }
        Ok(())
    }

    /// `self = a * self + x`
    pub fn aypx(&mut self, a: f64, x: &DistVector) -> Result<()> {
        self.check_compatible(x)?;
        let xs = x.local()?.to_vec();
        for (y, xv) in self.local_mut()?.iter_mut().zip(xs) {
            *y = a * *y + xv;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) -> Result<()> {
        for y in self.local_mut()? {
            *y *= a;
        }
        Ok(())
    }

    /// `self[i] *= x[i]` entrywise.
    pub fn pointwise_mult(&mut self, x: &DistVector) -> Result<()> {
        self.check_compatible(x)?;
        let xs = x.local()?.to_vec();
        for (y, xv) in self.local_mut()?.iter_mut().zip(xs) {
            *y *= xv;
        }
        Ok(())
    }

    /// Collects the full vector on every rank (testing and small problems).
    pub fn gather(&self) -> Result<Vec<f64>> {
        let mine = codec::encode_f64s(self.local()?);
        let parts = self.comm.allgather_bytes(mine)?;
        let mut out = Vec::with_capacity(self.global_size());
        for part in parts {
            out.extend(codec::decode_f64s(&part)?);
        }
        Ok(out)
    }

    /// Routing pass for coordinate assembly (collective). Negative indices
    /// are dropped; an index at or beyond the global size fails on every
    /// rank, naming the first offending entry. The plan is cached and reused
    /// by every following value pass with the same index list.
    pub fn prealloc_coo(&mut self, indices: &[i64]) -> Result<()> {
        let size = self.layout.global_size();
        let rank = self.comm.rank();
        let nranks = self.comm.size();
        let fabric = Arc::clone(self.comm.fabric());

        let mut bad: Option<Error> = None;
        for (k, &idx) in indices.iter().enumerate() {
            if idx >= 0 && idx as usize >= size {
                bad = Some(Error::IndexOutOfRange { k, index: idx, size });
                break;
            }
        }
        let flag = [if bad.is_some() { 1.0 } else { 0.0 }];
        let verdict = allreduce_sum(&fabric, rank, fabric.next_coll_tag(rank), &flag, false)?;
        if verdict[0] > 0.0 {
            return Err(bad.unwrap_or(Error::CollectiveAborted));
        }

        // route kept entries to their owners
        let mut local: Vec<(usize, usize)> = Vec::new();
        let mut outgoing: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nranks]; // (k, owner-local idx)
        for (k, &idx) in indices.iter().enumerate() {
            if idx < 0 {
                continue;
            }
            let idx = idx as usize;
            let owner = self.layout.owner_of(idx)?;
            let loc = self.layout.to_local(owner, idx);
            if owner == rank {
                local.push((k, loc));
            } else {
                outgoing[owner].push((k, loc));
            }
        }

        let tag = fabric.next_coll_tag(rank);
        for dst in 0..nranks {
            if dst == rank {
                continue;
            }
            let idxs: Vec<i64> = outgoing[dst].iter().map(|&(_, loc)| loc as i64).collect();
            fabric.send(rank, dst, tag, codec::encode_i64s(&idxs))?;
        }
        let mut recv: Vec<(usize, Vec<usize>)> = Vec::new();
        for src in 0..nranks {
            if src == rank {
                continue;
            }
            let idxs = codec::decode_i64s(&fabric.recv(rank, src, tag, false)?)?;
            if !idxs.is_empty() {
                recv.push((src, idxs.into_iter().map(|i| i as usize).collect()));
            }
        }

        let send: Vec<(usize, Vec<usize>)> = (0..nranks)
            .filter(|&d| d != rank && !outgoing[d].is_empty())
            .map(|d| (d, outgoing[d].iter().map(|&(k, _)| k).collect()))
            .collect();

        let mut touched: Vec<usize> = local.iter().map(|&(_, loc)| loc).collect();
        for (_, locs) in &recv {
            touched.extend_from_slice(locs);
        }
        touched.sort_unstable();
        touched.dedup();

        self.plan = Some(VecCooPlan {
            nvals: indices.len(),
            local,
            send,
            recv,
            touched,
            tag: fabric.next_coll_tag(rank),
        });
        Ok(())
    }

    /// Value pass for coordinate assembly (collective); requires a plan from
    /// [`DistVector::prealloc_coo`]. Accumulation order is fixed: local
    /// contributions by position, then received contributions by source rank
    /// and position.
    pub fn set_values_coo(&mut self, values: &[f64], mode: InsertMode) -> Result<()> {
        let rank = self.comm.rank();
        let fabric = Arc::clone(self.comm.fabric());
        let plan = self.plan.as_ref().ok_or(Error::NoPlan)?;
        if values.len() != plan.nvals {
            return Err(Error::LengthMismatch { expected: plan.nvals, got: values.len() });
        }
        // pull out the plan pieces before borrowing host mutably
        let tag = plan.tag;
        for &(dst, ref ks) in &plan.send {
            let vals: Vec<f64> = ks.iter().map(|&k| values[k]).collect();
            fabric.send(rank, dst, tag, codec::encode_f64s(&vals))?;
        }
        let mut incoming: Vec<(usize, Vec<f64>, Vec<usize>)> = Vec::new();
        for &(src, ref locs) in &plan.recv {
            let vals = codec::decode_f64s(&fabric.recv(rank, src, tag, false)?)?;
            if vals.len() != locs.len() {
                return Err(Error::Codec(format!(
                    "assembly payload from rank {src} has {} values, expected {}",
                    vals.len(),
                    locs.len()
                )));
            }
            incoming.push((src, vals, locs.clone()));
        }
        let local_adds: Vec<(usize, f64)> =
            plan.local.iter().map(|&(k, loc)| (loc, values[k])).collect();
        let touched = plan.touched.clone();

        let host = self.local_mut()?;
        if mode == InsertMode::Insert {
            for &loc in &touched {
                host[loc] = 0.0;
            }
        }
        for (loc, v) in local_adds {
            host[loc] += v;
        }
        for (_, vals, locs) in incoming {
            for (&loc, v) in locs.iter().zip(vals) {
                host[loc] += v;
            }
        }
        Ok(())
    }

    /// Builds the halo forest broadcasting owned entries of this vector to
    /// the given ghost indices (collective). Ghost slot `i` becomes leaf `i`.
    pub fn ghost_forest(&self, ghosts: &[usize]) -> Result<Arc<StarForest>> {
        let leaves: Result<Vec<LeafSpec>> = ghosts
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let owner = self.layout.owner_of(g)?;
                Ok(LeafSpec { leaf: i, root_rank: owner, root_offset: self.layout.to_local(owner, g) })
            })
            .collect();
        StarForest::setup(&self.comm, self.local_size(), &leaves?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{spawn_world, ReduceOp};
    use crate::stream::StreamConfig;

    fn filled(comm: &Communicator, global: usize, f: impl Fn(usize) -> f64) -> DistVector {
        let layout = Layout::split_even(global, comm.size());
        let local: Vec<f64> = layout.range(comm.rank()).map(f).collect();
        DistVector::from_local(comm, layout, local).unwrap()
    }

    #[test]
    fn gather_reassembles_the_global_vector() {
        spawn_world(3, |comm| {
            let v = filled(&comm, 10, |i| i as f64 * 1.5);
            let full = v.gather()?;
            assert_eq!(full, (0..10).map(|i| i as f64 * 1.5).collect::<Vec<_>>());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn dot_and_norm_match_serial_computation() {
        spawn_world(4, |comm| {
            let x = filled(&comm, 23, |i| (i as f64) * 0.5 - 3.0);
            let y = filled(&comm, 23, |i| 1.0 / (i as f64 + 1.0));
            let dist = x.dot(&y)?;
            let serial: f64 = (0..23).map(|i| ((i as f64) * 0.5 - 3.0) / (i as f64 + 1.0)).sum();
            assert!((dist - serial).abs() <= 1e-12 * serial.abs().max(1.0));
            let n = x.norm2()?;
            let serial_n: f64 = (0..23).map(|i| ((i as f64) * 0.5 - 3.0).powi(2)).sum::<f64>().sqrt();
            assert!((n - serial_n).abs() <= 1e-12 * serial_n);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn integer_valued_dot_is_bit_identical_across_world_sizes() {
        // integer entries keep every partial sum exact, so the accumulation
        // grouping cannot change the result
        let gen = |i: usize| ((i * 2654435761) % 2017) as f64 - 1008.0;
        let solo = {
            let comm = Communicator::solo();
            let x = filled(&comm, 101, gen);
            let y = filled(&comm, 101, |i| gen(i + 7));
            x.dot(&y).unwrap()
        };
        for ranks in [2, 3, 5, 8] {
            let bits = spawn_world(ranks, move |comm| {
                let x = filled(&comm, 101, gen);
                let y = filled(&comm, 101, |i| gen(i + 7));
                Ok(x.dot(&y)?.to_bits())
            })
            .unwrap();
            for b in bits {
                assert_eq!(b, solo.to_bits(), "ranks={ranks}");
            }
        }
    }

    #[test]
    fn axpy_aypx_scale_pointwise_do_what_they_say() {
        spawn_world(2, |comm| {
            let x = filled(&comm, 9, |i| i as f64);
            let mut y = filled(&comm, 9, |_| 2.0);
            y.axpy(0.5, &x)?; // y = 2 + 0.5 i
            y.aypx(2.0, &x)?; // y = 2*(2 + 0.5 i) + i = 4 + 2 i
            y.scale(0.25)?; // y = 1 + 0.5 i
            y.pointwise_mult(&x)?; // y = i + 0.5 i^2
            let full = y.gather()?;
            for (i, v) in full.iter().enumerate() {
                let want = i as f64 + 0.5 * (i as f64).powi(2);
                assert!((v - want).abs() < 1e-13, "entry {i}: {v} vs {want}");
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        spawn_world(2, |comm| {
            let x = filled(&comm, 8, |i| i as f64);
            let y = filled(&comm, 9, |i| i as f64);
            assert!(matches!(x.dot(&y), Err(Error::LayoutMismatch(_))));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn coo_add_routes_remote_contributions_and_merges_duplicates() {
        spawn_world(3, |comm| {
            let layout = Layout::split_even(9, 3);
            let mut v = DistVector::new(&comm, layout);
            // every rank contributes to entry 0 and to entry (rank*3 + 1),
            // plus a duplicate pair on entry 8; negatives are dropped
            let indices: Vec<i64> = vec![0, (comm.rank() * 3 + 1) as i64, 8, 8, -1];
            let values = vec![1.0, 10.0, 0.25, 0.75, 999.0];
            v.prealloc_coo(&indices)?;
            v.set_values_coo(&values, InsertMode::Add)?;
            let full = v.gather()?;
            assert_eq!(full[0], 3.0);
            assert_eq!(full[1], 10.0);
            assert_eq!(full[4], 10.0);
            assert_eq!(full[7], 10.0);
            assert_eq!(full[8], 3.0); // 3 ranks x (0.25 + 0.75)
            assert_eq!(full[2] + full[3] + full[5] + full[6], 0.0);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn coo_insert_replaces_touched_entries_only() {
        spawn_world(2, |comm| {
            let layout = Layout::split_even(6, 2);
            let mut v = DistVector::from_local(
                &comm,
                layout,
                vec![5.0; 3],
            )?;
            let indices: Vec<i64> = if comm.rank() == 0 { vec![1, 1, 4] } else { vec![4] };
            let values: Vec<f64> = if comm.rank() == 0 { vec![2.0, 3.0, 1.5] } else { vec![0.5] };
            v.prealloc_coo(&indices)?;
            v.set_values_coo(&values, InsertMode::Insert)?;
            let full = v.gather()?;
            // touched entries hold the sum of this call's contributions
            assert_eq!(full, vec![5.0, 5.0, 5.0, 5.0, 2.0, 5.0]);
            // second value pass reuses the plan
            let values2: Vec<f64> = if comm.rank() == 0 { vec![1.0, 1.0, 1.0] } else { vec![1.0] };
            v.set_values_coo(&values2, InsertMode::Insert)?;
            let full = v.gather()?;
            assert_eq!(full, vec![5.0, 2.0, 5.0, 5.0, 2.0, 5.0]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn coo_out_of_range_fails_on_every_rank_naming_the_entry() {
        let err = spawn_world(2, |comm| {
            let layout = Layout::split_even(4, 2);
            let mut v = DistVector::new(&comm, layout);
            let indices: Vec<i64> = if comm.rank() == 1 { vec![0, 7] } else { vec![1] };
            v.prealloc_coo(&indices).map(|_| ())
        })
        .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("7") && text.contains("entry 1"), "got {text}");
    }

    #[test]
    fn value_pass_without_plan_or_with_wrong_length_errors() {
        let comm = Communicator::solo();
        let mut v = DistVector::new(&comm, Layout::split_even(3, 1));
        assert!(matches!(v.set_values_coo(&[1.0], InsertMode::Add), Err(Error::NoPlan)));
        v.prealloc_coo(&[0, 2]).unwrap();
        assert!(matches!(
            v.set_values_coo(&[1.0], InsertMode::Add),
            Err(Error::LengthMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn stale_host_reads_are_rejected_until_refresh() {
        let comm = Communicator::solo();
        let world = StreamWorld::new(&comm, StreamConfig::default());
        let mut v = DistVector::from_local(&comm, Layout::split_even(4, 1), vec![1.0; 4]).unwrap();
        v.register_with(&world).unwrap();
        v.ensure_device().unwrap();
        assert_eq!(v.h2d_copies(), 1);
        v.ensure_device().unwrap();
        assert_eq!(v.h2d_copies(), 1, "device already current");
        // pretend a device task wrote: host must go stale
        v.begin_device_write();
        v.device_handle().lock().unwrap().copy_from_slice(&[9.0; 4]);
        assert!(matches!(v.local(), Err(Error::HostStale)));
        assert!(matches!(v.dot(&v.duplicate()), Err(Error::HostStale)));
        v.refresh_host().unwrap();
        assert_eq!(v.local().unwrap(), &[9.0; 4]);
        assert_eq!(v.d2h_copies(), 1);
        world.shutdown().unwrap();
    }

    #[test]
    fn local_mut_invalidates_device_and_next_enqueue_recopies() {
        let comm = Communicator::solo();
        let world = StreamWorld::new(&comm, StreamConfig::default());
        let mut v = DistVector::from_local(&comm, Layout::split_even(2, 1), vec![1.0, 2.0]).unwrap();
        v.register_with(&world).unwrap();
        v.ensure_device().unwrap();
        v.local_mut().unwrap()[0] = 42.0;
        v.ensure_device().unwrap();
        assert_eq!(v.h2d_copies(), 2);
        assert_eq!(v.device_handle().lock().unwrap()[0], 42.0);
        world.shutdown().unwrap();
    }

    #[test]
    fn ghost_forest_broadcasts_owned_values_to_ghost_slots() {
        spawn_world(2, |comm| {
            let v = filled(&comm, 8, |i| i as f64 + 0.5);
            // each rank ghosts the other's first entry
            let ghosts = if comm.rank() == 0 { vec![4] } else { vec![0] };
            let sf = v.ghost_forest(&ghosts)?;
            let mut halo = vec![0.0; 1];
            sf.bcast(v.local()?, &mut halo, ReduceOp::Replace)?;
            let want = if comm.rank() == 0 { 4.5 } else { 0.5 };
            assert_eq!(halo[0], want);
            Ok(())
        })
        .unwrap();
    }
}
