//! Distributed vector and matrix kernels that run as device tasks.
//!
//! Every function here enqueues exactly one task on the given context and
//! returns immediately; results land in managed scalars or in the device
//! copies of the output vectors. Reductions claim their collective tag on
//! the submitting thread, in program order, so the tag sequence agrees
//! across ranks no matter how pool workers interleave, and the in-task
//! accumulation order (local entries ascending, then ranks ascending) is
//! the same one the synchronous kernels use, making async results
//! bit-identical to their blocking counterparts.
//!
//! Locking discipline inside task bodies: inputs are snapshotted one lock
//! at a time before any output lock is taken, so aliased arguments and
//! cross-kernel lock ordering need no global protocol. The matrix multiply
//! is the one kernel that nests guards, always in the fixed order ghost,
//! values, output.

use std::sync::Arc;

use crate::comm::fabric;
use crate::error::{Error, Result};
use crate::mat::DistCsrMatrix;
use crate::stream::scalar::ManagedScalar;
use crate::stream::{AccessMode, DeviceContext, StreamWorld};
use crate::vector::DistVector;

fn check_bound(ctx: &DeviceContext, v: &DistVector) -> Result<Arc<StreamWorld>> {
    match v.world() {
        Some(w) if w.same_world(ctx.world()) => Ok(Arc::clone(w)),
        Some(_) => Err(Error::WorldMismatch),
        None => Err(Error::NotRegistered),
    }
}

/// Fused inner products: one task, one reduction, `pairs.len()` results.
/// Partial sums are packed in pair order into a single exchange, which is
/// what keeps multi-dot recurrences at one collective per call.
pub fn dot_many_async(
    ctx: &DeviceContext,
    pairs: &[(&DistVector, &DistVector)],
) -> Result<Vec<ManagedScalar>> {
    let world = ctx.world();
    let mut accesses = Vec::with_capacity(pairs.len() * 3);
    let mut args = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        check_bound(ctx, x)?;
        check_bound(ctx, y)?;
        x.check_compatible(y)?;
        x.ensure_device()?;
        y.ensure_device()?;
        accesses.push((x.id(), AccessMode::Read));
        accesses.push((y.id(), AccessMode::Read));
        args.push((Arc::clone(x.device_handle()), Arc::clone(y.device_handle())));
    }
    let results: Vec<ManagedScalar> =
        pairs.iter().map(|_| ManagedScalar::new(world, 0.0)).collect();
    for r in &results {
        r.begin_device_write();
        accesses.push((r.id(), AccessMode::Write));
    }
    let fab = Arc::clone(world.fabric());
    let rank = world.rank();
    let tag = fab.next_async_coll_tag(rank);
    let outs = results.clone();
    ctx.submit(&accesses, move || {
        let mut partials = Vec::with_capacity(args.len());
        for (xd, yd) in &args {
            let partial = if Arc::ptr_eq(xd, yd) {
                let x = xd.lock().unwrap();
                x.iter().map(|v| v * v).sum::<f64>()
            } else {
                let snapshot = xd.lock().unwrap().clone();
                let y = yd.lock().unwrap();
                snapshot.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            partials.push(partial);
        }
        let totals = fabric::allreduce_sum(&fab, rank, tag, &partials, true)?;
        for (out, total) in outs.iter().zip(totals) {
            out.set_device_value(total);
        }
        Ok(())
    })?;
    Ok(results)
}

/// x . y as a managed scalar (one task, one reduction).
pub fn dot_async(ctx: &DeviceContext, x: &DistVector, y: &DistVector) -> Result<ManagedScalar> {
    Ok(dot_many_async(ctx, &[(x, y)])?.pop().expect("one pair in, one scalar out"))
}

/// The 2-norm of x as a managed scalar (one task, one reduction).
pub fn norm2_async(ctx: &DeviceContext, x: &DistVector) -> Result<ManagedScalar> {
    let world = check_bound(ctx, x)?;
    x.ensure_device()?;
    let result = ManagedScalar::new(&world, 0.0);
    result.begin_device_write();
    let xd = Arc::clone(x.device_handle());
    let fab = Arc::clone(world.fabric());
    let rank = world.rank();
    let tag = fab.next_async_coll_tag(rank);
    let out = result.clone();
    ctx.submit(&[(x.id(), AccessMode::Read), (result.id(), AccessMode::Write)], move || {
        let partial = { xd.lock().unwrap().iter().map(|v| v * v).sum::<f64>() };
        let total = fabric::allreduce_sum(&fab, rank, tag, &[partial], true)?;
        out.set_device_value(total[0].sqrt());
        Ok(())
    })?;
    Ok(result)
}

/// y += alpha * x (no communication).
pub fn axpy_async(
    ctx: &DeviceContext,
    alpha: &ManagedScalar,
    x: &DistVector,
    y: &DistVector,
) -> Result<()> {
    check_bound(ctx, x)?;
    check_bound(ctx, y)?;
    x.check_compatible(y)?;
    x.ensure_device()?;
    y.ensure_device()?;
    y.begin_device_write();
    let a = alpha.clone();
    let xd = Arc::clone(x.device_handle());
    let yd = Arc::clone(y.device_handle());
    ctx.submit(
        &[
            (alpha.id(), AccessMode::Read),
            (x.id(), AccessMode::Read),
            (y.id(), AccessMode::ReadWrite),
        ],
        move || {
            let a = a.device_value();
            let snapshot = xd.lock().unwrap().clone();
            let mut y = yd.lock().unwrap();
            for (yi, xi) in y.iter_mut().zip(&snapshot) {
                *yi += a * xi;
            }
            Ok(())
        },
    )?;
    Ok(())
}

/// y = x + beta * y (no communication).
pub fn aypx_async(
    ctx: &DeviceContext,
    beta: &ManagedScalar,
    x: &DistVector,
    y: &DistVector,
) -> Result<()> {
    check_bound(ctx, x)?;
    check_bound(ctx, y)?;
    x.check_compatible(y)?;
    x.ensure_device()?;
    y.ensure_device()?;
    y.begin_device_write();
    let b = beta.clone();
    let xd = Arc::clone(x.device_handle());
    let yd = Arc::clone(y.device_handle());
    ctx.submit(
        &[
            (beta.id(), AccessMode::Read),
            (x.id(), AccessMode::Read),
            (y.id(), AccessMode::ReadWrite),
        ],
        move || {
            let b = b.device_value();
            let snapshot = xd.lock().unwrap().clone();
            let mut y = yd.lock().unwrap();
            for (yi, xi) in y.iter_mut().zip(&snapshot) {
                *yi = xi + b * *yi;
            }
            Ok(())
        },
    )?;
    Ok(())
}

/// x *= alpha (no communication).
pub fn scale_async(ctx: &DeviceContext, alpha: &ManagedScalar, x: &DistVector) -> Result<()> {
    check_bound(ctx, x)?;
    x.ensure_device()?;
    x.begin_device_write();
    let a = alpha.clone();
    let xd = Arc::clone(x.device_handle());
    ctx.submit(
        &[(alpha.id(), AccessMode::Read), (x.id(), AccessMode::ReadWrite)],
        move || {
            let a = a.device_value();
            for v in xd.lock().unwrap().iter_mut() {
                *v *= a;
            }
            Ok(())
        },
    )?;
    Ok(())
}

/// w = x ⊙ y entrywise (no communication).
pub fn pointwise_mult_async(
    ctx: &DeviceContext,
    w: &DistVector,
    x: &DistVector,
    y: &DistVector,
) -> Result<()> {
    check_bound(ctx, w)?;
    check_bound(ctx, x)?;
    check_bound(ctx, y)?;
    w.check_compatible(x)?;
    w.check_compatible(y)?;
    x.ensure_device()?;
    y.ensure_device()?;
    w.begin_device_write();
    let wd = Arc::clone(w.device_handle());
    let xd = Arc::clone(x.device_handle());
    let yd = Arc::clone(y.device_handle());
    ctx.submit(
        &[
            (w.id(), AccessMode::Write),
            (x.id(), AccessMode::Read),
            (y.id(), AccessMode::Read),
        ],
        move || {
            let xs = xd.lock().unwrap().clone();
            let ys = yd.lock().unwrap().clone();
            let mut w = wd.lock().unwrap();
            for i in 0..w.len() {
                w[i] = xs[i] * ys[i];
            }
            Ok(())
        },
    )?;
    Ok(())
}

/// y = x (no communication).
pub fn copy_async(ctx: &DeviceContext, x: &DistVector, y: &DistVector) -> Result<()> {
    check_bound(ctx, x)?;
    check_bound(ctx, y)?;
    x.check_compatible(y)?;
    x.ensure_device()?;
    y.begin_device_write();
    let xd = Arc::clone(x.device_handle());
    let yd = Arc::clone(y.device_handle());
    ctx.submit(&[(x.id(), AccessMode::Read), (y.id(), AccessMode::Write)], move || {
        let snapshot = xd.lock().unwrap().clone();
        yd.lock().unwrap().copy_from_slice(&snapshot);
        Ok(())
    })?;
    Ok(())
}

/// y = A x. One task per call: it refreshes the ghost entries through the
/// matrix's halo forest, then multiplies the local blocks. The ghost buffer
/// is declared as a written object, so back-to-back multiplies with the
/// same matrix serialize on it.
pub fn mat_mult_async(
    ctx: &DeviceContext,
    a: &DistCsrMatrix,
    x: &DistVector,
    y: &DistVector,
) -> Result<()> {
    match a.world() {
        Some(w) if w.same_world(ctx.world()) => {}
        Some(_) => return Err(Error::WorldMismatch),
        None => return Err(Error::NotRegistered),
    }
    check_bound(ctx, x)?;
    check_bound(ctx, y)?;
    if x.layout() != a.col_layout() {
        return Err(Error::LayoutMismatch(format!(
            "input vector has {} entries, matrix has {} columns",
            x.layout().global_size(),
            a.col_layout().global_size()
        )));
    }
    if y.layout() != a.row_layout() {
        return Err(Error::LayoutMismatch(format!(
            "output vector has {} entries, matrix has {} rows",
            y.layout().global_size(),
            a.row_layout().global_size()
        )));
    }
    x.ensure_device()?;
    y.begin_device_write();
    let shape = Arc::clone(a.shape());
    let vals = Arc::clone(a.vals_handle());
    let ghost = Arc::clone(a.ghost_handle());
    let halo = Arc::clone(a.halo());
    let xd = Arc::clone(x.device_handle());
    let yd = Arc::clone(y.device_handle());
    ctx.submit(
        &[
            (a.id(), AccessMode::Read),
            (a.ghost_id(), AccessMode::Write),
            (x.id(), AccessMode::Read),
            (y.id(), AccessMode::Write),
        ],
        move || {
            let snapshot = xd.lock().unwrap().clone();
            let mut ghost = ghost.lock().unwrap();
            halo.exchange_bcast(&snapshot, &mut ghost, crate::comm::ReduceOp::Replace, true)?;
            let vals = vals.lock().unwrap();
            let mut y = yd.lock().unwrap();
            shape.spmv(&vals, &snapshot, &ghost, &mut y);
            Ok(())
        },
    )?;
    Ok(())
}
