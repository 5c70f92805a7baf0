//! Iterative Krylov solvers over distributed matrices.
//!
//! Two solver families share one entry point: blocking solvers whose every
//! inner product is a host round trip, and device-resident variants that
//! enqueue whole iterations on a stream and touch the host only at
//! configurable check boundaries. Batched rank-local solvers for many small
//! systems live in [`batched`].
//!
//! Counter conventions in [`SolveReport`]: `reductions` is the number of
//! communication-fabric reductions the solve issued (setup and final residual
//! confirmation included). `sync_points` is the number of times the caller
//! thread blocked: for blocking solvers that is every reduction, for
//! device-resident solvers it is the number of check boundaries only.

pub mod batched;
mod cg;
mod device;
mod tfqmr;

use std::cell::RefCell;

use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::mat::DistCsrMatrix;
use crate::vector::DistVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cg,
    CgAsync,
    Tfqmr,
    TfqmrAsync,
    /// Rank-local lockstep lanes; served by [`batched::solve_batched`].
    TfqmrBatched,
    /// Rank-local lockstep lanes; served by [`batched::solve_batched`].
    BicgBatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    #[default]
    None,
    Jacobi,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    /// Relative tolerance on ||b - Ax|| / ||b||.
    pub rtol: f64,
    /// Iteration cap; transpose-free QMR counts half-steps.
    pub max_it: usize,
    /// Convergence is inspected every `check_stride` iterations (and at the
    /// cap). Device-resident solvers synchronize only at these boundaries.
    pub check_stride: usize,
    pub pc: Preconditioner,
}

impl SolverConfig {
    pub fn new(method: Method) -> SolverConfig {
        SolverConfig {
            method,
            rtol: 1e-10,
            max_it: 1000,
            check_stride: 1,
            pc: Preconditioner::None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0) {
            return Err(Error::BadConfig(format!("rtol must be positive, got {}", self.rtol)));
        }
        if self.max_it == 0 {
            return Err(Error::BadConfig("max_it must be at least 1".into()));
        }
        if self.check_stride == 0 {
            return Err(Error::BadConfig("check_stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    /// ||b - Ax|| / ||b|| recomputed from scratch at exit.
    pub final_relres: f64,
    pub converged: bool,
    pub sync_points: u64,
    pub reductions: u64,
}

/// Linear operator abstraction for the blocking solvers: the bare matrix or
/// a preconditioned composition of it.
pub trait LinOp {
    fn apply(&self, x: &DistVector, y: &mut DistVector) -> Result<()>;
    fn comm(&self) -> &Communicator;
    fn layout(&self) -> &Layout;
}

pub struct PlainOp<'a>(pub &'a DistCsrMatrix);

impl LinOp for PlainOp<'_> {
    fn apply(&self, x: &DistVector, y: &mut DistVector) -> Result<()> {
        self.0.mult(x, y)
    }

    fn comm(&self) -> &Communicator {
        self.0.comm()
    }

    fn layout(&self) -> &Layout {
        self.0.row_layout()
    }
}

/// Right-preconditioned operator x -> A(dinv . x). Residuals of the
/// composed system equal residuals of the original one, so transpose-free
/// methods keep their natural convergence monitor.
pub struct RightJacobiOp<'a> {
    a: &'a DistCsrMatrix,
    dinv: &'a DistVector,
    scratch: RefCell<DistVector>,
}

impl<'a> RightJacobiOp<'a> {
    pub fn new(a: &'a DistCsrMatrix, dinv: &'a DistVector) -> RightJacobiOp<'a> {
        RightJacobiOp { a, dinv, scratch: RefCell::new(dinv.duplicate()) }
    }
}

impl LinOp for RightJacobiOp<'_> {
    fn apply(&self, x: &DistVector, y: &mut DistVector) -> Result<()> {
        let mut s = self.scratch.borrow_mut();
        s.copy_from(x)?;
        s.pointwise_mult(self.dinv)?;
        self.a.mult(&s, y)
    }

    fn comm(&self) -> &Communicator {
        self.a.comm()
    }

    fn layout(&self) -> &Layout {
        self.a.row_layout()
    }
}

/// Builds the inverse-diagonal vector for point-Jacobi preconditioning.
/// Collective: a zero diagonal entry raises [`Error::ZeroDiagonal`] with the
/// same (lowest) row on every rank.
pub fn pc_jacobi_setup(a: &DistCsrMatrix) -> Result<DistVector> {
    let mut d = a.diagonal()?;
    let first0 = a.row_layout().start(a.comm().rank());
    let mut bad = u64::MAX;
    for (i, &v) in d.local()?.iter().enumerate() {
        if v == 0.0 {
            bad = (first0 + i) as u64;
            break;
        }
    }
    let gathered = a.comm().allgather_bytes(bad.to_le_bytes().to_vec())?;
    let worst = gathered
        .iter()
        .map(|b| u64::from_le_bytes(b.as_slice().try_into().expect("eight bytes per rank")))
        .min()
        .unwrap_or(u64::MAX);
    if worst != u64::MAX {
        return Err(Error::ZeroDiagonal { row: worst as usize, lane: None });
    }
    for v in d.local_mut()? {
        *v = 1.0 / *v;
    }
    Ok(d)
}

/// z = dinv . r, the Jacobi application.
pub fn pc_apply(dinv: &DistVector, r: &DistVector, z: &mut DistVector) -> Result<()> {
    z.copy_from(r)?;
    z.pointwise_mult(dinv)
}

/// Solves A x = b with the configured method, using the incoming `x` as the
/// initial guess. Device-resident methods require `a`, `b`, and `x` to be
/// registered with the same stream world.
pub fn solve(
    a: &DistCsrMatrix,
    b: &DistVector,
    x: &mut DistVector,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    match cfg.method {
        Method::Cg => cg::solve_cg(a, b, x, cfg),
        Method::Tfqmr => tfqmr::solve_tfqmr(a, b, x, cfg),
        Method::CgAsync => device::solve_cg_async(a, b, x, cfg),
        Method::TfqmrAsync => device::solve_tfqmr_async(a, b, x, cfg),
        Method::TfqmrBatched | Method::BicgBatched => Err(Error::BadConfig(
            "batched methods operate on a BatchedSystem via solve_batched".into(),
        )),
    }
}

/// ||b - A x|| / denom recomputed from the inputs, the honest convergence
/// judgement every solver reports.
fn true_relres(
    a: &DistCsrMatrix,
    b: &DistVector,
    x: &DistVector,
    scratch: &mut DistVector,
    denom: f64,
) -> Result<f64> {
    a.mult(x, scratch)?;
    scratch.aypx(-1.0, b)?;
    Ok(scratch.norm2()? / denom)
}

fn residual_denominator(bnorm: f64) -> f64 {
    if bnorm == 0.0 {
        1.0
    } else {
        bnorm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::spawn_world;
    use crate::mat::DistCsrMatrix;
    use crate::vector::InsertMode;

    fn two_by_two(comm: &Communicator) -> DistCsrMatrix {
        let layout = Layout::split_even(2, comm.size());
        let r = layout.range(comm.rank());
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let dense = [[4.0, 1.0], [1.0, 3.0]];
        for i in r {
            for j in 0..2 {
                rows.push(i as i64);
                cols.push(j as i64);
                vals.push(dense[i][j]);
            }
        }
        let mut a = DistCsrMatrix::with_coo(comm, layout.clone(), layout, &rows, &cols).unwrap();
        a.set_values_coo(&vals, InsertMode::Insert).unwrap();
        a
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        spawn_world(1, |comm| {
            let a = two_by_two(&comm);
            let b = DistVector::from_local(&comm, Layout::split_even(2, 1), vec![1.0, 2.0])?;
            let mut x = b.duplicate();

            let mut cfg = SolverConfig::new(Method::Cg);
            cfg.rtol = 0.0;
            assert!(matches!(solve(&a, &b, &mut x, &cfg), Err(Error::BadConfig(_))));
            cfg = SolverConfig::new(Method::Cg);
            cfg.max_it = 0;
            assert!(matches!(solve(&a, &b, &mut x, &cfg), Err(Error::BadConfig(_))));
            cfg = SolverConfig::new(Method::Cg);
            cfg.check_stride = 0;
            assert!(matches!(solve(&a, &b, &mut x, &cfg), Err(Error::BadConfig(_))));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn jacobi_setup_inverts_the_diagonal() {
        spawn_world(2, |comm| {
            let a = two_by_two(&comm);
            let dinv = pc_jacobi_setup(&a)?;
            let g = dinv.gather()?;
            assert_eq!(g, vec![0.25, 1.0 / 3.0]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn jacobi_setup_reports_the_lowest_zero_row_everywhere() {
        let rows = spawn_world(2, |comm| {
            let layout = Layout::split_even(4, comm.size());
            let r = layout.range(comm.rank());
            let mut rows = Vec::new();
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for i in r {
                // rows 1 and 3 get no diagonal entry
                if i % 2 == 0 {
                    rows.push(i as i64);
                    cols.push(i as i64);
                    vals.push(2.0);
                }
            }
            let mut a = DistCsrMatrix::with_coo(&comm, layout.clone(), layout, &rows, &cols)?;
            a.set_values_coo(&vals, InsertMode::Insert)?;
            match pc_jacobi_setup(&a) {
                Err(Error::ZeroDiagonal { row, lane: None }) => Ok(row),
                other => panic!("expected zero-diagonal error, got {:?}", other.map(|_| ())),
            }
        })
        .unwrap();
        assert_eq!(rows, vec![1, 1]);
    }
}
