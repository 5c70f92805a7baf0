//! Device-resident solver variants.
//!
//! Whole iterations are enqueued on a stream: matrix products, vector
//! updates, reductions, and the scalar recurrences between them all run as
//! tasks, so the caller thread blocks only at check boundaries (every
//! `check_stride` iterations and at the cap). With `check_stride == max_it`
//! a solve has exactly one synchronization point.
//!
//! Kernel accumulation orders match the blocking solvers element for
//! element, so a device-resident solve reproduces its blocking counterpart
//! to rounding noise at equal iteration counts. Numerical failures detected
//! inside tasks (loss of positive definiteness, recurrence breakdown) are
//! recorded by the stream world and surface as task failures at the next
//! boundary.

use std::sync::Arc;

use super::tfqmr::BREAKDOWN_EPS;
use super::{
    pc_apply, pc_jacobi_setup, residual_denominator, true_relres, Preconditioner, SolveReport,
    SolverConfig,
};
use crate::device_ops::{
    axpy_async, aypx_async, copy_async, dot_async, mat_mult_async, norm2_async,
    pointwise_mult_async,
};
use crate::error::{Error, Result};
use crate::mat::DistCsrMatrix;
use crate::stream::scalar::{scalar_compute, ManagedScalar, ScalarExpr};
use crate::stream::{DeviceContext, StreamWorld};
use crate::vector::DistVector;

fn shared_world(
    a: &DistCsrMatrix,
    b: &DistVector,
    x: &DistVector,
) -> Result<Arc<StreamWorld>> {
    let world = a.world().ok_or(Error::NotRegistered)?;
    for other in [b.world(), x.world()] {
        match other {
            None => return Err(Error::NotRegistered),
            Some(w) if !w.same_world(world) => return Err(Error::WorldMismatch),
            Some(_) => {}
        }
    }
    Ok(Arc::clone(world))
}

pub(super) fn solve_cg_async(
    a: &DistCsrMatrix,
    b: &DistVector,
    x: &mut DistVector,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let world = shared_world(a, b, x)?;
    let comm = a.comm();
    let red0 = comm.reduction_count();
    let dinv = match cfg.pc {
        Preconditioner::Jacobi => {
            let mut d = pc_jacobi_setup(a)?;
            d.register_with(&world)?;
            Some(d)
        }
        Preconditioner::None => None,
    };
    let denom = residual_denominator(b.norm2()?);

    // host-side setup: initial residual, preconditioned direction, rho
    x.refresh_host()?;
    let mut r = b.duplicate();
    a.mult(x, &mut r)?;
    r.aypx(-1.0, b)?;
    let mut z = r.duplicate();
    match &dinv {
        Some(d) => pc_apply(d, &r, &mut z)?,
        None => z.copy_from(&r)?,
    }
    let rho0 = r.dot(&z)?;
    let r0norm = match &dinv {
        None => rho0.max(0.0).sqrt(),
        Some(_) => r.norm2()?,
    };

    let mut iterations = 0usize;
    let mut sync_points = 0u64;
    if r0norm > cfg.rtol * denom {
        let mut p = z.duplicate();
        p.copy_from(&z)?;
        let w = r.duplicate();

        let ctx = world.context();
        let mut rho = ManagedScalar::new(&world, rho0);
        let mut done = false;
        while !done && iterations < cfg.max_it {
            mat_mult_async(&ctx, a, &p, &w)?;
            let sigma = dot_async(&ctx, &p, &w)?;
            // a zero rho means the residual already vanished: stall until
            // the boundary notices instead of flagging indefiniteness
            let alpha = scalar_compute(&ctx, &[&rho, &sigma], |v| {
                if v[0] == 0.0 {
                    Ok(0.0)
                } else if v[1] <= 0.0 {
                    Err(Error::NotSpd(v[1]))
                } else {
                    Ok(v[0] / v[1])
                }
            })?;
            axpy_async(&ctx, &alpha, &p, x)?;
            let neg_alpha = (-&alpha).eval(&ctx)?;
            axpy_async(&ctx, &neg_alpha, &w, &r)?;
            let zref: &DistVector = match &dinv {
                Some(d) => {
                    pointwise_mult_async(&ctx, &z, d, &r)?;
                    &z
                }
                None => &r,
            };
            let rho_new = dot_async(&ctx, zref, &r)?;
            iterations += 1;
            if iterations % cfg.check_stride == 0 || iterations == cfg.max_it {
                let rnorm_dev = match &dinv {
                    Some(_) => Some(norm2_async(&ctx, &r)?),
                    None => None,
                };
                ctx.synchronize()?;
                sync_points += 1;
                let rnorm = match rnorm_dev {
                    Some(s) => s.materialize()?,
                    None => rho_new.materialize()?.max(0.0).sqrt(),
                };
                if rnorm <= cfg.rtol * denom {
                    done = true;
                }
            }
            if !done && iterations < cfg.max_it {
                let beta = scalar_compute(&ctx, &[&rho_new, &rho], |v| {
                    if v[1] == 0.0 {
                        Ok(0.0)
                    } else {
                        Ok(v[0] / v[1])
                    }
                })?;
                aypx_async(&ctx, &beta, zref, &p)?;
            }
            rho = rho_new;
        }
    }

    x.refresh_host()?;
    let mut scratch = b.duplicate();
    let final_relres = true_relres(a, b, x, &mut scratch, denom)?;
    let reductions = comm.reduction_count() - red0;
    Ok(SolveReport {
        iterations,
        final_relres,
        converged: final_relres <= cfg.rtol,
        sync_points,
        reductions,
    })
}

/// op(v) = A (dinv . v) when preconditioned, A v otherwise.
fn apply_op_async(
    ctx: &DeviceContext,
    a: &DistCsrMatrix,
    dinv: Option<&DistVector>,
    tmp: &DistVector,
    x: &DistVector,
    y: &DistVector,
) -> Result<()> {
    match dinv {
        Some(d) => {
            pointwise_mult_async(ctx, tmp, d, x)?;
            mat_mult_async(ctx, a, tmp, y)
        }
        None => mat_mult_async(ctx, a, x, y),
    }
}

pub(super) fn solve_tfqmr_async(
    a: &DistCsrMatrix,
    b: &DistVector,
    x: &mut DistVector,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let world = shared_world(a, b, x)?;
    let comm = a.comm();
    let red0 = comm.reduction_count();
    let dinv = match cfg.pc {
        Preconditioner::Jacobi => {
            let mut d = pc_jacobi_setup(a)?;
            d.register_with(&world)?;
            Some(d)
        }
        Preconditioner::None => None,
    };
    let denom = residual_denominator(b.norm2()?);

    x.refresh_host()?;
    let mut r0 = b.duplicate();
    a.mult(x, &mut r0)?;
    r0.aypx(-1.0, b)?;
    // rho0 = ||r0||^2 exactly, matching the blocking variant bit for bit
    let rho0 = r0.dot(&r0)?;
    let tau0 = rho0.sqrt();

    let mut iterations = 0usize;
    let mut sync_points = 0u64;
    if tau0 > cfg.rtol * denom {
        // state in the correction system op . xi = r0, xi starting at zero
        let xi = r0.duplicate();
        let rt = {
            let mut s = r0.duplicate();
            s.copy_from(&r0)?;
            s
        };
        let mut w = rt.duplicate();
        w.copy_from(&r0)?;
        let mut u = rt.duplicate();
        u.copy_from(&r0)?;
        let mut unext = r0.duplicate();
        let d = r0.duplicate();
        let mut au = r0.duplicate();
        let mut au2 = r0.duplicate();
        let v = r0.duplicate();
        let tmp = r0.duplicate();

        let ctx = world.context();
        apply_op_async(&ctx, a, dinv.as_ref(), &tmp, &u, &au)?;
        copy_async(&ctx, &au, &v)?;

        let mut rho = ManagedScalar::new(&world, rho0);
        let mut tau = ManagedScalar::new(&world, tau0);
        let mut theta = ManagedScalar::new(&world, 0.0);
        let mut eta = ManagedScalar::new(&world, 0.0);
        let mut alpha = ManagedScalar::new(&world, 0.0);
        let mut neg_alpha = ManagedScalar::new(&world, 0.0);
        let mut done = false;

        while !done && iterations < cfg.max_it {
            let even = iterations % 2 == 0;
            if even {
                let sigma = dot_async(&ctx, &rt, &v)?;
                alpha = scalar_compute(&ctx, &[&rho, &sigma], |v| {
                    if v[1].abs() < BREAKDOWN_EPS {
                        Err(Error::Breakdown { quantity: "sigma", value: v[1] })
                    } else {
                        Ok(v[0] / v[1])
                    }
                })?;
                neg_alpha = (-&alpha).eval(&ctx)?;
                copy_async(&ctx, &u, &unext)?;
                axpy_async(&ctx, &neg_alpha, &v, &unext)?;
            }
            axpy_async(&ctx, &neg_alpha, &au, &w)?;
            let coef = scalar_compute(&ctx, &[&theta, &eta, &alpha], |v| {
                if v[2] == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(v[0] * v[0] * v[1] / v[2])
                }
            })?;
            aypx_async(&ctx, &coef, &u, &d)?;
            let wnorm = norm2_async(&ctx, &w)?;
            theta = scalar_compute(&ctx, &[&wnorm, &tau], |v| {
                if v[1] == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(v[0] / v[1])
                }
            })?;
            let c = (ScalarExpr::lit(1.0) + &theta * &theta).sqrt().recip().eval(&ctx)?;
            tau = (&tau * &theta * &c).eval(&ctx)?;
            eta = (&c * &c * &alpha).eval(&ctx)?;
            axpy_async(&ctx, &eta, &d, &xi)?;
            iterations += 1;
            if iterations % cfg.check_stride == 0 || iterations == cfg.max_it {
                ctx.synchronize()?;
                sync_points += 1;
                let t = tau.materialize()?;
                if t * ((iterations + 1) as f64).sqrt() <= cfg.rtol * denom {
                    done = true;
                }
            }
            if !done && iterations < cfg.max_it {
                if even {
                    std::mem::swap(&mut u, &mut unext);
                    apply_op_async(&ctx, a, dinv.as_ref(), &tmp, &u, &au)?;
                } else {
                    let rho_new = dot_async(&ctx, &rt, &w)?;
                    let beta = scalar_compute(&ctx, &[&rho_new, &rho], |v| {
                        if v[0].abs() < BREAKDOWN_EPS {
                            Err(Error::Breakdown { quantity: "rho", value: v[0] })
                        } else if v[1] == 0.0 {
                            Ok(0.0)
                        } else {
                            Ok(v[0] / v[1])
                        }
                    })?;
                    rho = rho_new;
                    aypx_async(&ctx, &beta, &w, &u)?;
                    aypx_async(&ctx, &beta, &au, &v)?;
                    apply_op_async(&ctx, a, dinv.as_ref(), &tmp, &u, &au2)?;
                    aypx_async(&ctx, &beta, &au2, &v)?;
                    std::mem::swap(&mut au, &mut au2);
                }
            }
        }
        // queue is drained (the last iteration always hits a boundary), so
        // the correction folds into the solution without further blocking
        let mut xi = xi;
        xi.refresh_host()?;
        if let Some(dv) = &dinv {
            xi.pointwise_mult(dv)?;
        }
        x.axpy(1.0, &xi)?;
    }

    x.refresh_host()?;
    let mut scratch = b.duplicate();
    let final_relres = true_relres(a, b, x, &mut scratch, denom)?;
    let reductions = comm.reduction_count() - red0;
    Ok(SolveReport {
        iterations,
        final_relres,
        converged: final_relres <= cfg.rtol,
        sync_points,
        reductions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{spawn_world, Communicator};
    use crate::krylov::{solve, Method};
    use crate::layout::Layout;
    use crate::stream::StreamConfig;
    use crate::vector::InsertMode;

    fn dist_from_dense(comm: &Communicator, dense: &[&[f64]]) -> (DistCsrMatrix, Layout) {
        let n = dense.len();
        let layout = Layout::split_even(n, comm.size());
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in layout.range(comm.rank()) {
            for j in 0..n {
                if dense[i][j] != 0.0 {
                    rows.push(i as i64);
                    cols.push(j as i64);
                    vals.push(dense[i][j]);
                }
            }
        }
        let mut a =
            DistCsrMatrix::with_coo(comm, layout.clone(), layout.clone(), &rows, &cols).unwrap();
        a.set_values_coo(&vals, InsertMode::Insert).unwrap();
        (a, layout)
    }

    const SPD4: [[f64; 4]; 4] = [
        [6.0, 1.0, 0.0, 2.0],
        [1.0, 5.0, 1.0, 0.0],
        [0.0, 1.0, 4.0, 1.0],
        [2.0, 0.0, 1.0, 7.0],
    ];

    const NONSYM4: [[f64; 4]; 4] = [
        [8.0, 1.0, 0.0, -2.0],
        [0.5, 6.0, 1.5, 0.0],
        [0.0, -1.0, 5.0, 1.0],
        [1.0, 0.0, 2.0, 9.0],
    ];

    fn run_pair(
        comm: &Communicator,
        dense: &[&[f64]],
        sync_method: Method,
        async_method: Method,
        pc: Preconditioner,
        stride: usize,
    ) -> crate::error::Result<(SolveReport, SolveReport, Vec<f64>, Vec<f64>)> {
        let (a, layout) = dist_from_dense(comm, dense);
        let n = layout.global_size();
        let b = DistVector::from_local(
            comm,
            layout.clone(),
            layout.range(comm.rank()).map(|i| (i % 3) as f64 - 1.0).collect(),
        )?;
        let mut xs = b.duplicate();
        let cfg = SolverConfig {
            rtol: 1e-11,
            max_it: 16 * n,
            check_stride: stride,
            pc,
            method: sync_method,
        };
        let rep_s = solve(&a, &b, &mut xs, &cfg)?;

        let world = StreamWorld::new(comm, StreamConfig::default());
        let mut a2 = a;
        a2.register_with(&world)?;
        let mut b2 = b;
        b2.register_with(&world)?;
        let mut xa = b2.duplicate();
        let cfg_a = SolverConfig { method: async_method, ..cfg };
        let rep_a = solve(&a2, &b2, &mut xa, &cfg_a)?;
        let gs = xs.gather()?;
        let ga = xa.gather()?;
        world.shutdown()?;
        Ok((rep_s, rep_a, gs, ga))
    }

    #[test]
    fn cg_async_matches_blocking_cg() {
        for ranks in [1, 2] {
            spawn_world(ranks, |comm| {
                let rows: Vec<&[f64]> = SPD4.iter().map(|r| r.as_slice()).collect();
                for (pc, stride) in [
                    (Preconditioner::None, 1),
                    (Preconditioner::None, 3),
                    (Preconditioner::Jacobi, 1),
                ] {
                    let (rs, ra, gs, ga) =
                        run_pair(&comm, &rows, Method::Cg, Method::CgAsync, pc, stride)?;
                    assert!(rs.converged && ra.converged, "{rs:?} vs {ra:?}");
                    assert_eq!(rs.iterations, ra.iterations);
                    for (s, a) in gs.iter().zip(&ga) {
                        assert!((s - a).abs() <= 1e-12, "{gs:?} vs {ga:?}");
                    }
                }
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn tfqmr_async_matches_blocking_tfqmr() {
        for ranks in [1, 2] {
            spawn_world(ranks, |comm| {
                let rows: Vec<&[f64]> = NONSYM4.iter().map(|r| r.as_slice()).collect();
                for (pc, stride) in [
                    (Preconditioner::None, 1),
                    (Preconditioner::None, 2),
                    (Preconditioner::Jacobi, 1),
                ] {
                    let (rs, ra, gs, ga) =
                        run_pair(&comm, &rows, Method::Tfqmr, Method::TfqmrAsync, pc, stride)?;
                    assert!(rs.converged && ra.converged, "{rs:?} vs {ra:?}");
                    assert_eq!(rs.iterations, ra.iterations);
                    for (s, a) in gs.iter().zip(&ga) {
                        assert!((s - a).abs() <= 1e-12, "{gs:?} vs {ga:?}");
                    }
                }
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn one_boundary_when_stride_equals_the_cap() {
        spawn_world(2, |comm| {
            let rows: Vec<&[f64]> = SPD4.iter().map(|r| r.as_slice()).collect();
            let (a, layout) = dist_from_dense(&comm, &rows);
            let world = StreamWorld::new(&comm, StreamConfig::default());
            let mut a = a;
            a.register_with(&world)?;
            let mut b = DistVector::from_local(
                &comm,
                layout.clone(),
                layout.range(comm.rank()).map(|i| (i + 1) as f64).collect(),
            )?;
            b.register_with(&world)?;
            let mut x = b.duplicate();
            let cfg = SolverConfig {
                method: Method::CgAsync,
                rtol: 1e-10,
                max_it: 8,
                check_stride: 8,
                pc: Preconditioner::None,
            };
            let rep = solve(&a, &b, &mut x, &cfg)?;
            assert_eq!(rep.sync_points, 1, "report: {rep:?}");
            assert!(rep.converged);
            world.shutdown()?;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn indefinite_failure_surfaces_at_the_boundary() {
        spawn_world(1, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[1.0, 0.0], &[0.0, -1.0]]);
            let world = StreamWorld::new(&comm, StreamConfig::default());
            let mut a = a;
            a.register_with(&world)?;
            let mut b = DistVector::from_local(&comm, layout, vec![1.0, 1.0])?;
            b.register_with(&world)?;
            let mut x = b.duplicate();
            let cfg = SolverConfig { method: Method::CgAsync, ..SolverConfig::new(Method::CgAsync) };
            match solve(&a, &b, &mut x, &cfg) {
                Err(Error::TaskFailed(msg)) => {
                    assert!(msg.contains("positive definite"), "got: {msg}")
                }
                Err(other) => panic!("expected a task failure, got {other:?}"),
                Ok(rep) => panic!("expected a task failure, got {rep:?}"),
            }
            // the failure is sticky, so shutdown reports it again
            assert!(world.shutdown().is_err());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn unregistered_operands_are_rejected() {
        spawn_world(1, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[2.0, 0.0], &[0.0, 2.0]]);
            let b = DistVector::from_local(&comm, layout, vec![1.0, 1.0])?;
            let mut x = b.duplicate();
            let cfg = SolverConfig::new(Method::CgAsync);
            assert!(matches!(solve(&a, &b, &mut x, &cfg), Err(Error::NotRegistered)));
            Ok(())
        })
        .unwrap();
    }
}
