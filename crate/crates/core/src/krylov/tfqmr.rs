//! Blocking transpose-free quasi-minimal residual solver.
//!
//! Each half-step costs one operator application and two reductions. The
//! iteration minimizes a quasi-residual whose norm `tau` yields the bound
//! ||r_m|| <= tau * sqrt(m + 2); convergence is declared on the bound and
//! confirmed against the recomputed residual of the original system.
//!
//! Preconditioning is applied from the right, so the method iterates on the
//! correction system A dinv xi = r0 and the residual it monitors equals the
//! residual of the original problem.

use super::{
    pc_jacobi_setup, residual_denominator, true_relres, LinOp, PlainOp, Preconditioner,
    RightJacobiOp, SolveReport, SolverConfig,
};
use crate::error::{Error, Result};
use crate::mat::DistCsrMatrix;
use crate::vector::DistVector;

/// Inner products smaller than this in magnitude end the recurrence.
pub(super) const BREAKDOWN_EPS: f64 = 1e-300;

pub(super) fn solve_tfqmr(
    a: &DistCsrMatrix,
    b: &DistVector,
    x: &mut DistVector,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let comm = a.comm();
    let red0 = comm.reduction_count();
    let dinv = match cfg.pc {
        Preconditioner::Jacobi => Some(pc_jacobi_setup(a)?),
        Preconditioner::None => None,
    };
    let denom = residual_denominator(b.norm2()?);

    let mut r0 = b.duplicate();
    a.mult(x, &mut r0)?;
    r0.aypx(-1.0, b)?;
    // rho0 = ||r0||^2 exactly, so tau0 * tau0 never drifts an ulp from it
    let rho0 = r0.dot(&r0)?;

    let (xi, iterations) = if rho0.sqrt() <= cfg.rtol * denom {
        (r0.duplicate(), 0)
    } else {
        match &dinv {
            Some(d) => half_steps(&RightJacobiOp::new(a, d), &r0, rho0, denom, cfg)?,
            None => half_steps(&PlainOp(a), &r0, rho0, denom, cfg)?,
        }
    };

    match &dinv {
        Some(d) => {
            let mut corr = xi;
            corr.pointwise_mult(d)?;
            x.axpy(1.0, &corr)?;
        }
        None => x.axpy(1.0, &xi)?,
    }
    let final_relres = true_relres(a, b, x, &mut r0, denom)?;
    let reductions = comm.reduction_count() - red0;
    Ok(SolveReport {
        iterations,
        final_relres,
        converged: final_relres <= cfg.rtol,
        sync_points: reductions,
        reductions,
    })
}

/// Runs the half-step recurrence on op . xi = r0 from xi = 0 and returns the
/// correction together with the number of half-steps taken.
fn half_steps<O: LinOp>(
    op: &O,
    r0: &DistVector,
    rho0: f64,
    denom: f64,
    cfg: &SolverConfig,
) -> Result<(DistVector, usize)> {
    let mut xi = r0.duplicate();
    let rt = {
        let mut s = r0.duplicate();
        s.copy_from(r0)?;
        s
    };
    let mut w = rt.duplicate();
    w.copy_from(r0)?;
    let mut u = rt.duplicate();
    u.copy_from(r0)?;
    let mut unext = r0.duplicate();
    let mut d = r0.duplicate();
    let mut au = r0.duplicate();
    op.apply(&u, &mut au)?;
    let mut v = r0.duplicate();
    v.copy_from(&au)?;
    let mut au2 = r0.duplicate();

    let mut rho = rho0;
    let mut tau = rho0.sqrt();
    let mut theta = 0.0;
    let mut eta = 0.0;
    let mut alpha = 0.0;
    let mut m = 0usize;
    let mut done = false;

    while !done && m < cfg.max_it {
        let even = m % 2 == 0;
        if even {
            let sigma = rt.dot(&v)?;
            if sigma.abs() < BREAKDOWN_EPS {
                return Err(Error::Breakdown { quantity: "sigma", value: sigma });
            }
            alpha = rho / sigma;
            unext.copy_from(&u)?;
            unext.axpy(-alpha, &v)?;
        }
        w.axpy(-alpha, &au)?;
        let coef = if alpha == 0.0 { 0.0 } else { theta * theta * eta / alpha };
        d.aypx(coef, &u)?;
        let wnorm = w.norm2()?;
        theta = if tau == 0.0 { 0.0 } else { wnorm / tau };
        let c = 1.0 / (1.0 + theta * theta).sqrt();
        tau = tau * theta * c;
        eta = c * c * alpha;
        xi.axpy(eta, &d)?;
        m += 1;
        if m % cfg.check_stride == 0 || m == cfg.max_it {
            if tau * ((m + 1) as f64).sqrt() <= cfg.rtol * denom {
                done = true;
            }
        }
        if !done && m < cfg.max_it {
            if even {
                std::mem::swap(&mut u, &mut unext);
                op.apply(&u, &mut au)?;
            } else {
                let rho_new = rt.dot(&w)?;
                if rho_new.abs() < BREAKDOWN_EPS {
                    return Err(Error::Breakdown { quantity: "rho", value: rho_new });
                }
                let beta = rho_new / rho;
                rho = rho_new;
                u.aypx(beta, &w)?;
                v.aypx(beta, &au)?;
                op.apply(&u, &mut au2)?;
                v.aypx(beta, &au2)?;
                std::mem::swap(&mut au, &mut au2);
            }
        }
    }
    Ok((xi, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{spawn_world, Communicator};
    use crate::krylov::Method;
    use crate::layout::Layout;
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

    #[test]
    fn solves_a_nonsymmetric_system() {
        for ranks in [1, 2] {
            spawn_world(ranks, |comm| {
                let (a, layout) = dist_from_dense(&comm, &[&[2.0, 1.0], &[0.0, 3.0]]);
                let b = DistVector::from_local(
                    &comm,
                    layout.clone(),
                    layout.range(comm.rank()).map(|_| 3.0).collect(),
                )?;
                let mut x = b.duplicate();
                let cfg = SolverConfig { rtol: 1e-12, ..SolverConfig::new(Method::Tfqmr) };
                let rep = solve_tfqmr(&a, &b, &mut x, &cfg)?;
                assert!(rep.converged, "report: {rep:?}");
                let g = x.gather()?;
                assert!((g[0] - 1.0).abs() < 1e-10, "x = {g:?}");
                assert!((g[1] - 1.0).abs() < 1e-10);
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn solves_the_spd_example_too() {
        spawn_world(2, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[4.0, 1.0], &[1.0, 3.0]]);
            let b = DistVector::from_local(
                &comm,
                layout.clone(),
                layout.range(comm.rank()).map(|i| [1.0, 2.0][i]).collect(),
            )?;
            let mut x = b.duplicate();
            let cfg = SolverConfig { rtol: 1e-12, ..SolverConfig::new(Method::Tfqmr) };
            let rep = solve_tfqmr(&a, &b, &mut x, &cfg)?;
            assert!(rep.converged);
            assert!(rep.final_relres <= 1e-12);
            let g = x.gather()?;
            assert!((g[0] - 1.0 / 11.0).abs() < 1e-10);
            assert!((g[1] - 7.0 / 11.0).abs() < 1e-10);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn identity_needs_a_single_half_step() {
        spawn_world(1, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[1.0, 0.0], &[0.0, 1.0]]);
            let b = DistVector::from_local(&comm, layout, vec![5.0, -2.0])?;
            let mut x = b.duplicate();
            let rep = solve_tfqmr(&a, &b, &mut x, &SolverConfig::new(Method::Tfqmr))?;
            assert!(rep.converged);
            assert_eq!(rep.iterations, 1);
            assert_eq!(x.gather()?, vec![5.0, -2.0]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn right_jacobi_preserves_the_true_residual_story() {
        spawn_world(2, |comm| {
            // badly scaled nonsymmetric system
            let (a, layout) =
                dist_from_dense(&comm, &[&[1000.0, 1.0], &[0.0, 0.001]]);
            let b = DistVector::from_local(
                &comm,
                layout.clone(),
                layout.range(comm.rank()).map(|i| [2000.0, 0.002][i]).collect(),
            )?;
            let mut x = b.duplicate();
            let cfg = SolverConfig {
                rtol: 1e-12,
                pc: Preconditioner::Jacobi,
                ..SolverConfig::new(Method::Tfqmr)
            };
            let rep = solve_tfqmr(&a, &b, &mut x, &cfg)?;
            assert!(rep.converged, "report: {rep:?}");
            let g = x.gather()?;
            assert!((g[0] - 1.998).abs() < 1e-8, "x = {g:?}");
            assert!((g[1] - 2.0).abs() < 1e-8);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn honors_a_nonzero_initial_guess() {
        spawn_world(1, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[2.0, 1.0], &[0.0, 3.0]]);
            let b = DistVector::from_local(&comm, layout.clone(), vec![3.0, 3.0])?;
            let mut x = DistVector::from_local(&comm, layout, vec![1.0, 1.0])?;
            let rep = solve_tfqmr(&a, &b, &mut x, &SolverConfig::new(Method::Tfqmr))?;
            assert!(rep.converged);
            assert_eq!(rep.iterations, 0, "exact guess should be recognized in setup");
            assert_eq!(x.gather()?, vec![1.0, 1.0]);
            Ok(())
        })
        .unwrap();
    }
}
