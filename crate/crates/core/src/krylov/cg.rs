//! Blocking preconditioned conjugate gradients.
//!
//! The classical two-reduction form: one inner product for the step length
//! (p^T A p) and one for the new search direction (r^T z). Without a
//! preconditioner the residual norm falls out of the second product for
//! free; with Jacobi an extra norm is taken at check boundaries only.

use super::{pc_apply, pc_jacobi_setup, residual_denominator, true_relres};
use super::{Preconditioner, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::mat::DistCsrMatrix;
use crate::vector::DistVector;

pub(super) fn solve_cg(
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

    let mut r = b.duplicate();
    a.mult(x, &mut r)?;
    r.aypx(-1.0, b)?;
    let mut z = r.duplicate();
    match &dinv {
        Some(d) => pc_apply(d, &r, &mut z)?,
        None => z.copy_from(&r)?,
    }
    let mut rho = r.dot(&z)?;
    let mut p = z.duplicate();
    p.copy_from(&z)?;
    let mut w = r.duplicate();

    let r0norm = match &dinv {
        None => rho.max(0.0).sqrt(),
        Some(_) => r.norm2()?,
    };
    let mut done = r0norm <= cfg.rtol * denom;
    let mut iterations = 0usize;

    while !done && iterations < cfg.max_it {
        a.mult(&p, &mut w)?;
        let sigma = p.dot(&w)?;
        if sigma <= 0.0 {
            return Err(Error::NotSpd(sigma));
        }
        let alpha = rho / sigma;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &w)?;
        match &dinv {
            Some(d) => pc_apply(d, &r, &mut z)?,
            None => z.copy_from(&r)?,
        }
        let rho_new = r.dot(&z)?;
        iterations += 1;
        if iterations % cfg.check_stride == 0 || iterations == cfg.max_it {
            let rnorm = match &dinv {
                None => rho_new.max(0.0).sqrt(),
                Some(_) => r.norm2()?,
            };
            if rnorm <= cfg.rtol * denom {
                done = true;
            }
        }
        if rho_new == 0.0 {
            break;
        }
        if !done && iterations < cfg.max_it {
            p.aypx(rho_new / rho, &z)?;
            rho = rho_new;
        }
    }

    let final_relres = true_relres(a, b, x, &mut w, denom)?;
    let reductions = comm.reduction_count() - red0;
    Ok(SolveReport {
        iterations,
        final_relres,
        converged: final_relres <= cfg.rtol,
        sync_points: reductions,
        reductions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::spawn_world;
    use crate::krylov::Method;
    use crate::layout::Layout;
    use crate::vector::InsertMode;

    fn dist_from_dense(
        comm: &crate::comm::Communicator,
        dense: &[&[f64]],
    ) -> (DistCsrMatrix, Layout) {
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
    fn recovers_the_known_two_by_two_solution() {
        for ranks in [1, 2] {
            spawn_world(ranks, |comm| {
                let (a, layout) = dist_from_dense(&comm, &[&[4.0, 1.0], &[1.0, 3.0]]);
                let r = layout.range(comm.rank());
                let b = DistVector::from_local(
                    &comm,
                    layout.clone(),
                    r.clone().map(|i| [1.0, 2.0][i]).collect(),
                )?;
                let mut x = b.duplicate();
                let cfg = SolverConfig { rtol: 1e-12, ..SolverConfig::new(Method::Cg) };
                let rep = solve_cg(&a, &b, &mut x, &cfg)?;
                assert!(rep.converged, "report: {rep:?}");
                assert!(rep.final_relres <= 1e-12);
                let g = x.gather()?;
                assert!((g[0] - 1.0 / 11.0).abs() < 1e-10, "x = {g:?}");
                assert!((g[1] - 7.0 / 11.0).abs() < 1e-10);
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        spawn_world(2, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[1.0, 0.0], &[0.0, 1.0]]);
            let b = DistVector::from_local(
                &comm,
                layout.clone(),
                layout.range(comm.rank()).map(|i| (i + 1) as f64).collect(),
            )?;
            let mut x = b.duplicate();
            let rep = solve_cg(&a, &b, &mut x, &SolverConfig::new(Method::Cg))?;
            assert!(rep.converged);
            assert_eq!(rep.iterations, 1);
            assert_eq!(x.gather()?, vec![1.0, 2.0]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        spawn_world(1, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[1.0, 0.0], &[0.0, -1.0]]);
            let b = DistVector::from_local(&comm, layout, vec![0.0, 1.0])?;
            let mut x = b.duplicate();
            match solve_cg(&a, &b, &mut x, &SolverConfig::new(Method::Cg)) {
                Err(Error::NotSpd(v)) => assert!(v <= 0.0),
                other => panic!("expected not-SPD rejection, got {other:?}"),
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn jacobi_cuts_iterations_on_an_ill_scaled_diagonal() {
        spawn_world(2, |comm| {
            let n = 8;
            let layout = Layout::split_even(n, comm.size());
            let mut rows = Vec::new();
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for i in layout.range(comm.rank()) {
                rows.push(i as i64);
                cols.push(i as i64);
                vals.push(10f64.powi(i as i32 - 4));
            }
            let mut a =
                DistCsrMatrix::with_coo(&comm, layout.clone(), layout.clone(), &rows, &cols)?;
            a.set_values_coo(&vals, InsertMode::Insert)?;
            let b = DistVector::from_local(
                &comm,
                layout.clone(),
                layout.range(comm.rank()).map(|i| (i % 3 + 1) as f64).collect(),
            )?;
            let mut x = b.duplicate();
            let cfg = SolverConfig {
                pc: Preconditioner::Jacobi,
                rtol: 1e-12,
                ..SolverConfig::new(Method::Cg)
            };
            let rep = solve_cg(&a, &b, &mut x, &cfg)?;
            assert!(rep.converged);
            // a diagonal system preconditioned by its own inverse diagonal
            // needs a single step
            assert!(rep.iterations <= 2, "took {} iterations", rep.iterations);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn zero_rhs_returns_the_zero_solution_immediately() {
        spawn_world(1, |comm| {
            let (a, layout) = dist_from_dense(&comm, &[&[4.0, 1.0], &[1.0, 3.0]]);
            let b = DistVector::new(&comm, layout);
            let mut x = b.duplicate();
            let rep = solve_cg(&a, &b, &mut x, &SolverConfig::new(Method::Cg))?;
            assert!(rep.converged);
            assert_eq!(rep.iterations, 0);
            assert_eq!(x.gather()?, vec![0.0, 0.0]);
            Ok(())
        })
        .unwrap();
    }
}
