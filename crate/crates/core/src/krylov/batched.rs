//! Batched rank-local Krylov solvers.
//!
//! Many small systems with a shared sparsity pattern advance through the
//! same iteration in lockstep, vectorized across the lane dimension: values,
//! right-hand sides, and solutions are stored structure-of-arrays with the
//! lane index fastest, and every recurrence scalar becomes a lane array.
//! Lanes that converge or break down freeze; the rest keep iterating. There
//! is no cross-rank coupling anywhere, so these solvers need no communicator.
//!
//! Diagonal preconditioning is applied from the right, exactly as in the
//! distributed transpose-free solver: lanes iterate on the correction system
//! A dinv xi = r0 and fold dinv xi into the solution at exit.

use super::{residual_denominator, SolverConfig};
use crate::error::{Error, Result};

/// Inner products smaller than this in magnitude freeze the lane.
const BREAKDOWN_EPS: f64 = 1e-300;

/// A batch of same-sparsity small systems in structure-of-arrays layout:
/// entry `p` of lane `l` lives at `vals[p * lanes + l]`, element `i` of lane
/// `l` at `rhs[i * lanes + l]`, and likewise for `x`.
#[derive(Debug, Clone)]
pub struct BatchedSystem {
    n: usize,
    lanes: usize,
    rowptr: Vec<usize>,
    cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
    pub x: Vec<f64>,
}

impl BatchedSystem {
    pub fn new(
        n: usize,
        lanes: usize,
        rowptr: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
        rhs: Vec<f64>,
    ) -> Result<BatchedSystem> {
        if lanes == 0 {
            return Err(Error::BadConfig("batch needs at least one lane".into()));
        }
        if rowptr.len() != n + 1 || rowptr[0] != 0 {
            return Err(Error::BadConfig(format!(
                "row pointer must have {} entries starting at 0",
                n + 1
            )));
        }
        if rowptr.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::BadConfig("row pointer must be nondecreasing".into()));
        }
        let nnz = rowptr[n];
        if cols.len() != nnz {
            return Err(Error::LengthMismatch { expected: nnz, got: cols.len() });
        }
        if cols.iter().any(|&j| j >= n) {
            return Err(Error::BadConfig("column index out of range".into()));
        }
        if vals.len() != nnz * lanes {
            return Err(Error::LengthMismatch { expected: nnz * lanes, got: vals.len() });
        }
        if rhs.len() != n * lanes {
            return Err(Error::LengthMismatch { expected: n * lanes, got: rhs.len() });
        }
        let x = vec![0.0; n * lanes];
        Ok(BatchedSystem { n, lanes, rowptr, cols, vals, rhs, x })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn nnz(&self) -> usize {
        *self.rowptr.last().unwrap()
    }

    /// Extracts lane `l` as a plain (rowptr, cols, vals, rhs) system.
    pub fn lane_system(&self, l: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>, Vec<f64>) {
        let vals = (0..self.nnz()).map(|p| self.vals[p * self.lanes + l]).collect();
        let rhs = (0..self.n).map(|i| self.rhs[i * self.lanes + l]).collect();
        (self.rowptr.clone(), self.cols.clone(), vals, rhs)
    }

    /// y = A x for every active lane.
    fn spmv(&self, x: &[f64], y: &mut [f64], active: &[bool]) {
        let lanes = self.lanes;
        for i in 0..self.n {
            let row = &mut y[i * lanes..(i + 1) * lanes];
            for l in 0..lanes {
                if active[l] {
                    row[l] = 0.0;
                }
            }
            for p in self.rowptr[i]..self.rowptr[i + 1] {
                let xrow = &x[self.cols[p] * lanes..self.cols[p] * lanes + lanes];
                let vrow = &self.vals[p * lanes..p * lanes + lanes];
                for l in 0..lanes {
                    if active[l] {
                        row[l] += vrow[l] * xrow[l];
                    }
                }
            }
        }
    }

    /// y = A^T x for every active lane (scatter over rows).
    fn spmv_t(&self, x: &[f64], y: &mut [f64], active: &[bool]) {
        let lanes = self.lanes;
        for chunk in y.chunks_mut(lanes) {
            for l in 0..lanes {
                if active[l] {
                    chunk[l] = 0.0;
                }
            }
        }
        for i in 0..self.n {
            let xrow = &x[i * lanes..(i + 1) * lanes];
            for p in self.rowptr[i]..self.rowptr[i + 1] {
                let j = self.cols[p];
                let vrow = &self.vals[p * lanes..p * lanes + lanes];
                for l in 0..lanes {
                    if active[l] {
                        y[j * lanes + l] += vrow[l] * xrow[l];
                    }
                }
            }
        }
    }

    /// Per-lane inverse diagonals; a zero diagonal names its row and lane.
    fn jacobi_inverse(&self) -> Result<Vec<f64>> {
        let lanes = self.lanes;
        let mut dinv = vec![0.0; self.n * lanes];
        for i in 0..self.n {
            let diag_p = (self.rowptr[i]..self.rowptr[i + 1]).find(|&p| self.cols[p] == i);
            for l in 0..lanes {
                let v = diag_p.map_or(0.0, |p| self.vals[p * lanes + l]);
                if v == 0.0 {
                    return Err(Error::ZeroDiagonal { row: i, lane: Some(l) });
                }
                dinv[i * lanes + l] = 1.0 / v;
            }
        }
        Ok(dinv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchedMethod {
    Tfqmr,
    Bicg,
}

/// Outcome of one batch lane, mirroring the distributed solve report plus a
/// breakdown flag: a broken lane freezes with its best iterate while the
/// remaining lanes proceed.
#[derive(Debug, Clone)]
pub struct LaneReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_relres: f64,
    pub breakdown: Option<String>,
}

struct LaneCtl {
    active: Vec<bool>,
    iterations: Vec<usize>,
    breakdown: Vec<Option<String>>,
}

impl LaneCtl {
    fn new(lanes: usize) -> LaneCtl {
        LaneCtl {
            active: vec![true; lanes],
            iterations: vec![0; lanes],
            breakdown: vec![None; lanes],
        }
    }

    fn freeze(&mut self, l: usize, m: usize) {
        self.active[l] = false;
        self.iterations[l] = m;
    }

    fn break_lane(&mut self, l: usize, m: usize, what: &str, value: f64) {
        self.freeze(l, m);
        self.breakdown[l] =
            Some(format!("numerical breakdown: |{what}| = {value:e} below safe threshold"));
    }

    fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }
}

// lane-masked vector kernels over SoA storage

fn lane_copy(dst: &mut [f64], src: &[f64], lanes: usize, active: &[bool]) {
    for (d, s) in dst.chunks_mut(lanes).zip(src.chunks(lanes)) {
        for l in 0..lanes {
            if active[l] {
                d[l] = s[l];
            }
        }
    }
}

/// y += a_l * x per lane.
fn lane_axpy(y: &mut [f64], a: &[f64], x: &[f64], lanes: usize, active: &[bool]) {
    for (yc, xc) in y.chunks_mut(lanes).zip(x.chunks(lanes)) {
        for l in 0..lanes {
            if active[l] {
                yc[l] += a[l] * xc[l];
            }
        }
    }
}

/// y = x + a_l * y per lane.
fn lane_aypx(y: &mut [f64], a: &[f64], x: &[f64], lanes: usize, active: &[bool]) {
    for (yc, xc) in y.chunks_mut(lanes).zip(x.chunks(lanes)) {
        for l in 0..lanes {
            if active[l] {
                yc[l] = xc[l] + a[l] * yc[l];
            }
        }
    }
}

fn lane_dot(x: &[f64], y: &[f64], out: &mut [f64], lanes: usize, active: &[bool]) {
    for l in 0..lanes {
        if active[l] {
            out[l] = 0.0;
        }
    }
    for (xc, yc) in x.chunks(lanes).zip(y.chunks(lanes)) {
        for l in 0..lanes {
            if active[l] {
                out[l] += xc[l] * yc[l];
            }
        }
    }
}

fn lane_pointwise(dst: &mut [f64], a: &[f64], b: &[f64], lanes: usize, active: &[bool]) {
    for ((d, ac), bc) in dst.chunks_mut(lanes).zip(a.chunks(lanes)).zip(b.chunks(lanes)) {
        for l in 0..lanes {
            if active[l] {
                d[l] = ac[l] * bc[l];
            }
        }
    }
}

/// op(v) = A (dinv . v) when preconditioned, A v otherwise.
fn apply_op(
    sys: &BatchedSystem,
    dinv: Option<&[f64]>,
    tmp: &mut [f64],
    x: &[f64],
    y: &mut [f64],
    active: &[bool],
) {
    match dinv {
        Some(d) => {
            lane_pointwise(tmp, d, x, sys.lanes, active);
            sys.spmv(tmp, y, active);
        }
        None => sys.spmv(x, y, active),
    }
}

/// op^T(v) = dinv . (A^T v) when preconditioned.
fn apply_op_t(
    sys: &BatchedSystem,
    dinv: Option<&[f64]>,
    x: &[f64],
    y: &mut [f64],
    active: &[bool],
) {
    sys.spmv_t(x, y, active);
    if let Some(d) = dinv {
        for (yc, dc) in y.chunks_mut(sys.lanes).zip(d.chunks(sys.lanes)) {
            for l in 0..sys.lanes {
                if active[l] {
                    yc[l] *= dc[l];
                }
            }
        }
    }
}

/// Solves every lane of the batch with the requested method, using `sys.x`
/// as initial guesses and leaving the solutions there. Lanes converge,
/// break down, and freeze independently; the returned reports grade each
/// lane against its recomputed true residual.
pub fn solve_batched(
    sys: &mut BatchedSystem,
    method: BatchedMethod,
    cfg: &SolverConfig,
) -> Result<Vec<LaneReport>> {
    cfg.validate()?;
    let lanes = sys.lanes;
    let dinv = match cfg.pc {
        super::Preconditioner::Jacobi => Some(sys.jacobi_inverse()?),
        super::Preconditioner::None => None,
    };

    // per-lane denominators and initial residual r0 = b - A x0
    let all = vec![true; lanes];
    let mut denom = vec![0.0; lanes];
    lane_dot(&sys.rhs, &sys.rhs, &mut denom, lanes, &all);
    for d in &mut denom {
        *d = residual_denominator(d.sqrt());
    }
    let mut r0 = vec![0.0; sys.n * lanes];
    sys.spmv(&sys.x, &mut r0, &all);
    for (rc, bc) in r0.chunks_mut(lanes).zip(sys.rhs.chunks(lanes)) {
        for l in 0..lanes {
            rc[l] = bc[l] - rc[l];
        }
    }

    let mut ctl = LaneCtl::new(lanes);
    // rho0 = ||r0||^2 per lane, kept as the exact dot so tau0 * tau0 never
    // drifts an ulp from it
    let mut rho0 = vec![0.0; lanes];
    lane_dot(&r0, &r0, &mut rho0, lanes, &all);
    for l in 0..lanes {
        if rho0[l].sqrt() <= cfg.rtol * denom[l] {
            ctl.freeze(l, 0);
        }
    }

    let mut xi = vec![0.0; sys.n * lanes];
    if ctl.any_active() {
        match method {
            BatchedMethod::Tfqmr => {
                tfqmr_lanes(sys, dinv.as_deref(), &r0, &rho0, &denom, cfg, &mut ctl, &mut xi)
            }
            BatchedMethod::Bicg => {
                bicg_lanes(sys, dinv.as_deref(), &r0, &denom, cfg, &mut ctl, &mut xi)
            }
        }
    }

    // fold the correction into the solution: x += dinv . xi (or xi)
    if let Some(d) = &dinv {
        for (xc, dc) in xi.chunks_mut(lanes).zip(d.chunks(lanes)) {
            for l in 0..lanes {
                xc[l] *= dc[l];
            }
        }
    }
    for (xc, cc) in sys.x.chunks_mut(lanes).zip(xi.chunks(lanes)) {
        for l in 0..lanes {
            xc[l] += cc[l];
        }
    }

    // grade every lane against its recomputed residual
    let mut rfin = vec![0.0; sys.n * lanes];
    sys.spmv(&sys.x, &mut rfin, &all);
    for (rc, bc) in rfin.chunks_mut(lanes).zip(sys.rhs.chunks(lanes)) {
        for l in 0..lanes {
            rc[l] = bc[l] - rc[l];
        }
    }
    let mut rnorm = vec![0.0; lanes];
    lane_dot(&rfin, &rfin, &mut rnorm, lanes, &all);
    Ok((0..lanes)
        .map(|l| {
            let final_relres = rnorm[l].sqrt() / denom[l];
            LaneReport {
                converged: final_relres <= cfg.rtol && ctl.breakdown[l].is_none(),
                iterations: ctl.iterations[l],
                final_relres,
                breakdown: ctl.breakdown[l].clone(),
            }
        })
        .collect())
}

/// Transpose-free QMR half-steps across lanes. Correction system
/// op . xi = r0, xi starting at zero.
#[allow(clippy::too_many_arguments)]
fn tfqmr_lanes(
    sys: &BatchedSystem,
    dinv: Option<&[f64]>,
    r0: &[f64],
    rho0: &[f64],
    denom: &[f64],
    cfg: &SolverConfig,
    ctl: &mut LaneCtl,
    xi: &mut [f64],
) {
    let lanes = sys.lanes;
    let nl = sys.n * lanes;
    let mut w = r0.to_vec();
    let mut u = r0.to_vec();
    let mut unext = vec![0.0; nl];
    let mut d = vec![0.0; nl];
    let mut au = vec![0.0; nl];
    let mut au2 = vec![0.0; nl];
    let mut v = vec![0.0; nl];
    let mut tmp = vec![0.0; nl];
    apply_op(sys, dinv, &mut tmp, &u, &mut au, &ctl.active);
    lane_copy(&mut v, &au, lanes, &ctl.active);

    let mut rho = rho0.to_vec();
    let mut tau: Vec<f64> = rho0.iter().map(|r| r.sqrt()).collect();
    let mut theta = vec![0.0; lanes];
    let mut eta = vec![0.0; lanes];
    let mut alpha = vec![0.0; lanes];
    let mut neg_alpha = vec![0.0; lanes];
    let mut sigma = vec![0.0; lanes];
    let mut wnorm2 = vec![0.0; lanes];
    let mut coef = vec![0.0; lanes];
    let mut rho_new = vec![0.0; lanes];
    let mut beta = vec![0.0; lanes];

    let mut m = 0usize;
    while ctl.any_active() && m < cfg.max_it {
        let even = m % 2 == 0;
        if even {
            lane_dot(r0, &v, &mut sigma, lanes, &ctl.active);
            for l in 0..lanes {
                if ctl.active[l] {
                    if sigma[l].abs() < BREAKDOWN_EPS {
                        ctl.break_lane(l, m, "sigma", sigma[l]);
                    } else {
                        alpha[l] = rho[l] / sigma[l];
                        neg_alpha[l] = -alpha[l];
                    }
                }
            }
            lane_copy(&mut unext, &u, lanes, &ctl.active);
            lane_axpy(&mut unext, &neg_alpha, &v, lanes, &ctl.active);
        }
        lane_axpy(&mut w, &neg_alpha, &au, lanes, &ctl.active);
        for l in 0..lanes {
            if ctl.active[l] {
                coef[l] = if alpha[l] == 0.0 {
                    0.0
                } else {
                    theta[l] * theta[l] * eta[l] / alpha[l]
                };
            }
        }
        lane_aypx(&mut d, &coef, &u, lanes, &ctl.active);
        lane_dot(&w, &w, &mut wnorm2, lanes, &ctl.active);
        for l in 0..lanes {
            if ctl.active[l] {
                theta[l] = if tau[l] == 0.0 { 0.0 } else { wnorm2[l].sqrt() / tau[l] };
                let c = 1.0 / (1.0 + theta[l] * theta[l]).sqrt();
                tau[l] = tau[l] * theta[l] * c;
                eta[l] = c * c * alpha[l];
            }
        }
        lane_axpy(xi, &eta, &d, lanes, &ctl.active);
        m += 1;
        for l in 0..lanes {
            if ctl.active[l] && tau[l] * ((m + 1) as f64).sqrt() <= cfg.rtol * denom[l] {
                ctl.freeze(l, m);
            }
        }
        if !ctl.any_active() || m == cfg.max_it {
            break;
        }
        if even {
            std::mem::swap(&mut u, &mut unext);
            apply_op(sys, dinv, &mut tmp, &u, &mut au, &ctl.active);
        } else {
            lane_dot(r0, &w, &mut rho_new, lanes, &ctl.active);
            for l in 0..lanes {
                if ctl.active[l] {
                    if rho_new[l].abs() < BREAKDOWN_EPS {
                        ctl.break_lane(l, m, "rho", rho_new[l]);
                    } else {
                        beta[l] = rho_new[l] / rho[l];
                        rho[l] = rho_new[l];
                    }
                }
            }
            lane_aypx(&mut u, &beta, &w, lanes, &ctl.active);
            lane_aypx(&mut v, &beta, &au, lanes, &ctl.active);
            apply_op(sys, dinv, &mut tmp, &u, &mut au2, &ctl.active);
            lane_aypx(&mut v, &beta, &au2, lanes, &ctl.active);
            std::mem::swap(&mut au, &mut au2);
        }
    }
    for l in 0..lanes {
        if ctl.active[l] {
            ctl.freeze(l, m);
        }
    }
}

/// Biconjugate gradients across lanes on the correction system, with the
/// transposed operator applied by scattering over rows.
fn bicg_lanes(
    sys: &BatchedSystem,
    dinv: Option<&[f64]>,
    r0: &[f64],
    denom: &[f64],
    cfg: &SolverConfig,
    ctl: &mut LaneCtl,
    xi: &mut [f64],
) {
    let lanes = sys.lanes;
    let nl = sys.n * lanes;
    let mut r = r0.to_vec();
    let mut rs = r0.to_vec();
    let mut p = r0.to_vec();
    let mut ps = r0.to_vec();
    let mut q = vec![0.0; nl];
    let mut qs = vec![0.0; nl];
    let mut tmp = vec![0.0; nl];

    let mut rho = vec![0.0; lanes];
    lane_dot(&rs, &r, &mut rho, lanes, &ctl.active);
    let mut sigma = vec![0.0; lanes];
    let mut alpha = vec![0.0; lanes];
    let mut neg_alpha = vec![0.0; lanes];
    let mut rho_new = vec![0.0; lanes];
    let mut beta = vec![0.0; lanes];
    let mut rnorm2 = vec![0.0; lanes];

    let mut m = 0usize;
    while ctl.any_active() && m < cfg.max_it {
        apply_op(sys, dinv, &mut tmp, &p, &mut q, &ctl.active);
        apply_op_t(sys, dinv, &ps, &mut qs, &ctl.active);
        lane_dot(&ps, &q, &mut sigma, lanes, &ctl.active);
        for l in 0..lanes {
            if ctl.active[l] {
                if sigma[l].abs() < BREAKDOWN_EPS {
                    ctl.break_lane(l, m, "sigma", sigma[l]);
                } else {
                    alpha[l] = rho[l] / sigma[l];
                    neg_alpha[l] = -alpha[l];
                }
            }
        }
        lane_axpy(xi, &alpha, &p, lanes, &ctl.active);
        lane_axpy(&mut r, &neg_alpha, &q, lanes, &ctl.active);
        lane_axpy(&mut rs, &neg_alpha, &qs, lanes, &ctl.active);
        m += 1;
        lane_dot(&r, &r, &mut rnorm2, lanes, &ctl.active);
        for l in 0..lanes {
            if ctl.active[l] && rnorm2[l].sqrt() <= cfg.rtol * denom[l] {
                ctl.freeze(l, m);
            }
        }
        if !ctl.any_active() || m == cfg.max_it {
            break;
        }
        lane_dot(&rs, &r, &mut rho_new, lanes, &ctl.active);
        for l in 0..lanes {
            if ctl.active[l] {
                if rho_new[l].abs() < BREAKDOWN_EPS {
                    ctl.break_lane(l, m, "rho", rho_new[l]);
                } else {
                    beta[l] = rho_new[l] / rho[l];
                    rho[l] = rho_new[l];
                }
            }
        }
        lane_aypx(&mut p, &beta, &r, lanes, &ctl.active);
        lane_aypx(&mut ps, &beta, &rs, lanes, &ctl.active);
    }
    for l in 0..lanes {
        if ctl.active[l] {
            ctl.freeze(l, m);
        }
    }
}

/// Stacks the lanes block-diagonally into one big single-lane system and
/// solves it with the same method: the ensemble strategy whose convergence
/// is governed by the worst lane. Solutions land back in `sys.x`.
pub fn solve_ensemble(
    sys: &mut BatchedSystem,
    method: BatchedMethod,
    cfg: &SolverConfig,
) -> Result<LaneReport> {
    let lanes = sys.lanes;
    let n = sys.n;
    let nnz = sys.nnz();
    let mut rowptr = Vec::with_capacity(n * lanes + 1);
    rowptr.push(0);
    let mut cols = Vec::with_capacity(nnz * lanes);
    let mut vals = Vec::with_capacity(nnz * lanes);
    let mut rhs = Vec::with_capacity(n * lanes);
    for l in 0..lanes {
        for i in 0..n {
            for p in sys.rowptr[i]..sys.rowptr[i + 1] {
                cols.push(l * n + sys.cols[p]);
                vals.push(sys.vals[p * lanes + l]);
            }
            rowptr.push(cols.len());
            rhs.push(sys.rhs[i * lanes + l]);
        }
    }
    let mut stacked = BatchedSystem::new(n * lanes, 1, rowptr, cols, vals, rhs)?;
    for l in 0..lanes {
        for i in 0..n {
            stacked.x[l * n + i] = sys.x[i * lanes + l];
        }
    }
    let mut reports = solve_batched(&mut stacked, method, cfg)?;
    for l in 0..lanes {
        for i in 0..n {
            sys.x[i * lanes + l] = stacked.x[l * n + i];
        }
    }
    Ok(reports.pop().expect("stacked batch has one lane"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::{Method, Preconditioner};

    fn dense_system(dense: &[&[f64]], rhs: Vec<f64>) -> BatchedSystem {
        let n = dense.len();
        let mut rowptr = vec![0usize];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in dense {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            rowptr.push(cols.len());
        }
        BatchedSystem::new(n, 1, rowptr, cols, vals, rhs).unwrap()
    }

    fn cfg(rtol: f64) -> SolverConfig {
        SolverConfig { rtol, max_it: 200, ..SolverConfig::new(Method::TfqmrBatched) }
    }

    #[test]
    fn single_lane_tfqmr_solves_the_nonsymmetric_example() {
        let mut sys = dense_system(&[&[2.0, 1.0], &[0.0, 3.0]], vec![3.0, 3.0]);
        let reports = solve_batched(&mut sys, BatchedMethod::Tfqmr, &cfg(1e-12)).unwrap();
        assert!(reports[0].converged, "{reports:?}");
        assert!((sys.x[0] - 1.0).abs() < 1e-10);
        assert!((sys.x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn single_lane_bicg_solves_the_nonsymmetric_example() {
        let mut sys = dense_system(&[&[2.0, 1.0], &[0.0, 3.0]], vec![3.0, 3.0]);
        let reports = solve_batched(&mut sys, BatchedMethod::Bicg, &cfg(1e-12)).unwrap();
        assert!(reports[0].converged, "{reports:?}");
        assert!((sys.x[0] - 1.0).abs() < 1e-10);
        assert!((sys.x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_lanes_share_sparsity_but_not_values() {
        // lane 0: diag(2, 4) with rhs [2, 4]; lane 1: diag(5, 10), rhs [10, 30]
        let rowptr = vec![0, 1, 2];
        let cols = vec![0, 1];
        let vals = vec![2.0, 5.0, 4.0, 10.0];
        let rhs = vec![2.0, 10.0, 4.0, 30.0];
        let mut sys = BatchedSystem::new(2, 2, rowptr, cols, vals, rhs).unwrap();
        for method in [BatchedMethod::Tfqmr, BatchedMethod::Bicg] {
            sys.x.fill(0.0);
            let reports = solve_batched(&mut sys, method, &cfg(1e-12)).unwrap();
            assert!(reports.iter().all(|r| r.converged), "{method:?}: {reports:?}");
            let want = [1.0, 2.0, 1.0, 3.0];
            for (got, want) in sys.x.iter().zip(want) {
                assert!((got - want).abs() < 1e-10, "{method:?}: {:?}", sys.x);
            }
        }
    }

    #[test]
    fn zero_diagonal_names_row_and_lane() {
        let rowptr = vec![0, 1, 2];
        let cols = vec![0, 1];
        let vals = vec![2.0, 5.0, 4.0, 0.0];
        let rhs = vec![1.0, 1.0, 1.0, 1.0];
        let mut sys = BatchedSystem::new(2, 2, rowptr, cols, vals, rhs).unwrap();
        let mut c = cfg(1e-10);
        c.pc = Preconditioner::Jacobi;
        match solve_batched(&mut sys, BatchedMethod::Tfqmr, &c) {
            Err(Error::ZeroDiagonal { row: 1, lane: Some(1) }) => {}
            other => panic!("expected lane-naming zero-diagonal error, got {other:?}"),
        }
    }

    #[test]
    fn broken_lane_freezes_while_the_other_converges() {
        // lane 1 has a singular matrix (rank 1): TFQMR must break down or
        // stall on it without disturbing lane 0
        let rowptr = vec![0, 2, 4];
        let cols = vec![0, 1, 0, 1];
        // lane 0: [[3,1],[1,2]] (SPD); lane 1: [[1,1],[1,1]] (singular)
        let vals = vec![3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0];
        let rhs = vec![4.0, 1.0, 3.0, 0.0];
        let mut sys = BatchedSystem::new(2, 2, rowptr, cols, vals, rhs).unwrap();
        let reports = solve_batched(&mut sys, BatchedMethod::Bicg, &cfg(1e-12)).unwrap();
        assert!(reports[0].converged, "{reports:?}");
        assert!((sys.x[0] - 1.0).abs() < 1e-10, "{:?}", sys.x);
        assert!((sys.x[2] - 1.0).abs() < 1e-10);
        assert!(!reports[1].converged);
    }

    #[test]
    fn frozen_lanes_keep_their_solutions() {
        // lane 0 is the identity (freezes after one step); lane 1 is a
        // slower SPD system; after the batch the identity lane's solution
        // must equal the exact one it froze at
        let rowptr = vec![0, 2, 4];
        let cols = vec![0, 1, 0, 1];
        let vals = vec![1.0, 4.0, 0.0, 1.0, 0.0, 1.0, 1.0, 3.0];
        let rhs = vec![5.0, 1.0, -2.0, 2.0];
        let mut sys = BatchedSystem::new(2, 2, rowptr, cols, vals, rhs).unwrap();
        let reports = solve_batched(&mut sys, BatchedMethod::Tfqmr, &cfg(1e-12)).unwrap();
        assert!(reports.iter().all(|r| r.converged), "{reports:?}");
        assert!(reports[0].iterations < reports[1].iterations, "{reports:?}");
        assert_eq!(sys.x[0], 5.0);
        assert_eq!(sys.x[2], -2.0);
        assert!((sys.x[1] - 1.0 / 11.0).abs() < 1e-10);
        assert!((sys.x[3] - 7.0 / 11.0).abs() < 1e-10);
    }

    #[test]
    fn ensemble_matches_batched_solutions_but_not_speed() {
        // two lanes with very different conditioning
        let rowptr = vec![0, 1, 2];
        let cols = vec![0, 1];
        let vals = vec![1.0, 1.0, 2.0, 2000.0];
        let rhs = vec![1.0, 1.0, 2.0, 2000.0];
        let mut batched = BatchedSystem::new(2, 2, rowptr, cols, vals, rhs).unwrap();
        let mut ensemble = batched.clone();
        let reports = solve_batched(&mut batched, BatchedMethod::Tfqmr, &cfg(1e-12)).unwrap();
        let ens = solve_ensemble(&mut ensemble, BatchedMethod::Tfqmr, &cfg(1e-12)).unwrap();
        assert!(ens.converged);
        for (a, b) in batched.x.iter().zip(&ensemble.x) {
            assert!((a - b).abs() < 1e-8, "{:?} vs {:?}", batched.x, ensemble.x);
        }
        let worst = reports.iter().map(|r| r.iterations).max().unwrap();
        assert!(ens.iterations >= worst, "ensemble {} vs worst lane {}", ens.iterations, worst);
    }

    #[test]
    fn constructor_validates_shapes() {
        assert!(matches!(
            BatchedSystem::new(2, 0, vec![0, 1, 2], vec![0, 1], vec![], vec![]),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            BatchedSystem::new(2, 1, vec![0, 1], vec![0, 1], vec![1.0, 1.0], vec![1.0, 1.0]),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            BatchedSystem::new(2, 1, vec![0, 1, 2], vec![0, 5], vec![1.0, 1.0], vec![1.0, 1.0]),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            BatchedSystem::new(2, 1, vec![0, 1, 2], vec![0, 1], vec![1.0], vec![1.0, 1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
