//! Limited-memory BFGS inverse-Hessian application in three interchangeable
//! formulations.
//!
//! The recursive two-loop algorithm is work optimal but pays one global
//! reduction per stored pair per loop: 2k synchronizations for k pairs. The
//! compact dense formulation folds everything into one fused reduction (the
//! tall-skinny transpose product), and the intermediate dense formulation
//! into two, while keeping the base operator a per-iteration callback so
//! variable-metric methods pay no extra base applications.
//!
//! History is a ring of (s, y) pairs ordered oldest to newest, with the
//! small cross-product matrix maintained incrementally: one new row and
//! column per accepted update, first row and column dropped on eviction.
//! All m-dimensional work is replicated on every rank; the only collectives
//! are the fused tall-skinny dot products.

use crate::error::{Error, Result};
use crate::vector::DistVector;

/// Relative curvature threshold: a pair is stored only when
/// s.y > CURVATURE_EPS * |s| * |y|.
pub const CURVATURE_EPS: f64 = 1e-12;

/// Base inverse-Hessian callback. Implementations must be SPD for the
/// update to remain a descent mapping, and may change between iterations
/// (install a new one with [`LbfgsState::set_base_operator`]).
pub trait BaseOperator {
    fn apply(&self, x: &DistVector, y: &mut DistVector) -> Result<()>;
}

impl<F> BaseOperator for F
where
    F: Fn(&DistVector, &mut DistVector) -> Result<()>,
{
    fn apply(&self, x: &DistVector, y: &mut DistVector) -> Result<()> {
        self(x, y)
    }
}

/// H0 = c I, the everyday base operator.
pub struct ScaledIdentity(pub f64);

impl BaseOperator for ScaledIdentity {
    fn apply(&self, x: &DistVector, y: &mut DistVector) -> Result<()> {
        y.copy_from(x)?;
        y.scale(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// Two-loop recursion: 2k reductions per apply.
    Recursive,
    /// Rank-2m update around the base application: 1 fused reduction.
    CompactDense,
    /// Five-factor product form: 2 fused reductions, exactly one base
    /// application even when the base operator varies.
    IntermediateDense,
}

/// Cached base-operator images of the y columns, used only by the compact
/// dense formulation. Each column remembers the operator epoch it was
/// computed under so a changed base invalidates it.
struct CompactCache {
    cols: Vec<(DistVector, u64)>,
    /// w_i . y_j cross products, kept only while every column is current.
    wty: Option<Vec<f64>>,
}

pub struct LbfgsState {
    m: usize,
    h0: Box<dyn BaseOperator>,
    h0_epoch: u64,
    h0_calls: u64,
    /// Steps, oldest to newest.
    s_cols: Vec<DistVector>,
    /// Gradient differences, aligned with `s_cols`.
    y_cols: Vec<DistVector>,
    /// k x k cross products sty[i*k + j] = s_i . y_j.
    sty: Vec<f64>,
    /// Curvatures d_j = s_j . y_j (the diagonal of `sty`).
    d: Vec<f64>,
    compact: Option<CompactCache>,
}

/// Local partial of a global dot, accumulated exactly like the vector dot
/// so fused reductions reproduce its bits.
fn partial(a: &DistVector, b: &DistVector) -> Result<f64> {
    Ok(a.local()?.iter().zip(b.local()?).map(|(x, y)| x * y).sum())
}

impl LbfgsState {
    pub fn new(m: usize, h0: impl BaseOperator + 'static) -> Result<LbfgsState> {
        if m == 0 {
            return Err(Error::BadConfig("history capacity must be at least 1".into()));
        }
        Ok(LbfgsState {
            m,
            h0: Box::new(h0),
            h0_epoch: 0,
            h0_calls: 0,
            s_cols: Vec::new(),
            y_cols: Vec::new(),
            sty: Vec::new(),
            d: Vec::new(),
            compact: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.m
    }

    pub fn k_used(&self) -> usize {
        self.s_cols.len()
    }

    /// Total base-operator applications so far.
    pub fn h0_calls(&self) -> u64 {
        self.h0_calls
    }

    /// The stored cross products s_i . y_j, row major, k_used x k_used.
    pub fn cross_products(&self) -> &[f64] {
        &self.sty
    }

    pub fn curvatures(&self) -> &[f64] {
        &self.d
    }

    /// Installs a new base operator. Cached base images become stale, so
    /// the next compact dense apply recomputes all of them.
    pub fn set_base_operator(&mut self, h0: impl BaseOperator + 'static) {
        self.h0 = Box::new(h0);
        self.h0_epoch += 1;
        if let Some(c) = &mut self.compact {
            c.wty = None;
        }
    }

    fn apply_h0(&mut self, x: &DistVector, y: &mut DistVector) -> Result<()> {
        self.h0_calls += 1;
        self.h0.apply(x, y)
    }

    fn owned_copy(src: &DistVector) -> Result<DistVector> {
        let mut v = src.duplicate();
        v.copy_from(src)?;
        Ok(v)
    }

    /// Offers a new (step, gradient-difference) pair. Returns false and
    /// leaves the state untouched when the pair fails the curvature gate;
    /// otherwise appends it, evicting the oldest pair at capacity. Two
    /// fused reductions: the gate and the new cross-product row/column.
    pub fn update(&mut self, s: &DistVector, y: &DistVector) -> Result<bool> {
        if s.layout() != y.layout() {
            return Err(Error::LayoutMismatch(
                "step and gradient difference must share a layout".into(),
            ));
        }
        if let Some(first) = self.s_cols.first() {
            if s.layout() != first.layout() {
                return Err(Error::LayoutMismatch(
                    "pair layout differs from the stored history".into(),
                ));
            }
        }
        let comm = s.comm();
        let gate = comm.allreduce_sum(&[partial(s, y)?, partial(s, s)?, partial(y, y)?])?;
        let (sy, ss, yy) = (gate[0], gate[1], gate[2]);
        if sy <= CURVATURE_EPS * ss.sqrt() * yy.sqrt() {
            return Ok(false);
        }

        if self.k_used() == self.m {
            self.s_cols.remove(0);
            self.y_cols.remove(0);
            self.d.remove(0);
            self.sty = drop_first_row_col(&self.sty, self.m);
            if let Some(c) = &mut self.compact {
                c.cols.remove(0);
                if let Some(wty) = &c.wty {
                    c.wty = Some(drop_first_row_col(wty, self.m));
                }
            }
        }
        let k_old = self.k_used();
        let sn = Self::owned_copy(s)?;
        let yn = Self::owned_copy(y)?;

        // a compact cache in use also gets the base image of the new column
        let wn = match &self.compact {
            Some(_) => {
                let mut w = yn.duplicate();
                self.apply_h0(&yn, &mut w)?;
                Some(w)
            }
            None => None,
        };
        let extend_wty = self.compact.as_ref().is_some_and(|c| c.wty.is_some());

        // one fused reduction for every new cross product
        let mut parts = Vec::with_capacity(2 * k_old + if extend_wty { 2 * k_old + 1 } else { 0 });
        for si in &self.s_cols {
            parts.push(partial(si, &yn)?);
        }
        for yj in &self.y_cols {
            parts.push(partial(&sn, yj)?);
        }
        if extend_wty {
            let cache = self.compact.as_ref().unwrap();
            let w = wn.as_ref().unwrap();
            for (wi, _) in &cache.cols {
                parts.push(partial(wi, &yn)?);
            }
            for yj in &self.y_cols {
                parts.push(partial(w, yj)?);
            }
            parts.push(partial(w, &yn)?);
        }
        let sums = if parts.is_empty() { Vec::new() } else { comm.allreduce_sum(&parts)? };

        let k = k_old + 1;
        let mut sty = vec![0.0; k * k];
        for i in 0..k_old {
            for j in 0..k_old {
                sty[i * k + j] = self.sty[i * k_old + j];
            }
        }
        for i in 0..k_old {
            sty[i * k + k_old] = sums[i];
            sty[k_old * k + i] = sums[k_old + i];
        }
        sty[k_old * k + k_old] = sy;
        self.sty = sty;
        self.d.push(sy);
        self.s_cols.push(sn);
        self.y_cols.push(yn);
        if let Some(w) = wn {
            let epoch = self.h0_epoch;
            let cache = self.compact.as_mut().unwrap();
            if extend_wty {
                let base = 2 * k_old;
                let old = cache.wty.take().unwrap();
                let mut wty = vec![0.0; k * k];
                for i in 0..k_old {
                    for j in 0..k_old {
                        wty[i * k + j] = old[i * k_old + j];
                    }
                }
                for i in 0..k_old {
                    wty[i * k + k_old] = sums[base + i];
                    wty[k_old * k + i] = sums[base + k_old + i];
                }
                wty[k_old * k + k_old] = sums[base + 2 * k_old];
                cache.wty = Some(wty);
            }
            cache.cols.push((w, epoch));
        }
        Ok(true)
    }

    /// p = H_k g through the chosen formulation. An empty history applies
    /// the base operator alone.
    pub fn apply(&mut self, g: &DistVector, formulation: Formulation) -> Result<DistVector> {
        if self.k_used() == 0 {
            let mut p = g.duplicate();
            self.apply_h0(g, &mut p)?;
            return Ok(p);
        }
        if g.layout() != self.s_cols[0].layout() {
            return Err(Error::LayoutMismatch(
                "gradient layout differs from the stored history".into(),
            ));
        }
        match formulation {
            Formulation::Recursive => self.apply_recursive(g),
            Formulation::CompactDense => self.apply_compact(g),
            Formulation::IntermediateDense => self.apply_intermediate(g),
        }
    }

    /// Two-loop recursion: alpha_j = (s_j . g)/d_j backward, base apply,
    /// beta_j = (y_j . p)/d_j forward with p += (alpha_j - beta_j) s_j.
    fn apply_recursive(&mut self, g: &DistVector) -> Result<DistVector> {
        let k = self.k_used();
        let mut q = Self::owned_copy(g)?;
        let mut alphas = vec![0.0; k];
        for j in (0..k).rev() {
            let a = self.s_cols[j].dot(&q)? / self.curvature(j)?;
            q.axpy(-a, &self.y_cols[j])?;
            alphas[j] = a;
        }
        let mut p = g.duplicate();
        self.apply_h0(&q, &mut p)?;
        for j in 0..k {
            let b = self.y_cols[j].dot(&p)? / self.curvature(j)?;
            p.axpy(alphas[j] - b, &self.s_cols[j])?;
        }
        Ok(p)
    }

    /// Rank-2m update around the base application:
    ///   H g = H0 g + [-S R^-T | W] [D + W'Y, I; I, 0] [-R^-1 S'g; W'g]
    /// with W = H0 Y. The S'g, W'g, and (on a stale cache) W'Y products all
    /// ride a single fused reduction, so every apply has exactly one
    /// synchronization point.
    fn apply_compact(&mut self, g: &DistVector) -> Result<DistVector> {
        let k = self.k_used();
        if self.compact.is_none() {
            self.compact = Some(CompactCache { cols: Vec::new(), wty: None });
        }
        // (re)build base images for missing or stale columns
        for j in 0..k {
            let state = self
                .compact
                .as_ref()
                .unwrap()
                .cols
                .get(j)
                .map(|(_, epoch)| *epoch);
            if state != Some(self.h0_epoch) {
                let mut w = self.y_cols[j].duplicate();
                let yj = Self::owned_copy(&self.y_cols[j])?;
                self.apply_h0(&yj, &mut w)?;
                let cache = self.compact.as_mut().unwrap();
                if j < cache.cols.len() {
                    cache.cols[j] = (w, self.h0_epoch);
                } else {
                    cache.cols.push((w, self.h0_epoch));
                }
            }
        }
        let need_wty = self.compact.as_ref().unwrap().wty.is_none();

        let cache = self.compact.as_ref().unwrap();
        let mut parts = Vec::with_capacity(2 * k + if need_wty { k * k } else { 0 });
        for sj in &self.s_cols {
            parts.push(partial(sj, g)?);
        }
        for (wj, _) in &cache.cols {
            parts.push(partial(wj, g)?);
        }
        if need_wty {
            for (wi, _) in &cache.cols {
                for yj in &self.y_cols {
                    parts.push(partial(wi, yj)?);
                }
            }
        }
        let sums = g.comm().allreduce_sum(&parts)?;
        if need_wty {
            self.compact.as_mut().unwrap().wty = Some(sums[2 * k..2 * k + k * k].to_vec());
        }
        let sg = &sums[0..k];
        let wg = &sums[k..2 * k];

        // middle block applied through its structure: a = -R^-1 S'g,
        // c1 = (D + W'Y) a + W'g, then p = H0 g - S R^-T c1 + W a
        let mut a = self.solve_upper(sg)?;
        for v in &mut a {
            *v = -*v;
        }
        let cache = self.compact.as_ref().unwrap();
        let wty = cache.wty.as_ref().unwrap();
        let mut c1 = vec![0.0; k];
        for i in 0..k {
            let mut acc = self.d[i] * a[i] + wg[i];
            for j in 0..k {
                acc += wty[i * k + j] * a[j];
            }
            c1[i] = acc;
        }
        let u = self.solve_upper_transposed(&c1)?;

        let mut p = g.duplicate();
        self.apply_h0(g, &mut p)?;
        for j in 0..k {
            p.axpy(-u[j], &self.s_cols[j])?;
        }
        let cache = self.compact.as_ref().unwrap();
        for (j, (wj, _)) in cache.cols.iter().enumerate() {
            p.axpy(a[j], wj)?;
        }
        Ok(p)
    }

    /// Five-factor product form evaluated right to left:
    ///   t = S'g (reduction one), a = -R^-1 t, v = g + Y a,
    ///   h = H0 v (the only base application), z = Y'h + D a
    ///   (reduction two), p = h - S R^-T z.
    fn apply_intermediate(&mut self, g: &DistVector) -> Result<DistVector> {
        let k = self.k_used();
        let t = self.fused_dots(&self.s_cols, g)?;
        let mut a = self.solve_upper(&t)?;
        for v in &mut a {
            *v = -*v;
        }
        let mut v = Self::owned_copy(g)?;
        for j in 0..k {
            v.axpy(a[j], &self.y_cols[j])?;
        }
        let mut h = g.duplicate();
        self.apply_h0(&v, &mut h)?;
        let mut z = self.fused_dots(&self.y_cols, &h)?;
        for j in 0..k {
            z[j] += self.d[j] * a[j];
        }
        let u = self.solve_upper_transposed(&z)?;
        let mut p = h;
        for j in 0..k {
            p.axpy(-u[j], &self.s_cols[j])?;
        }
        Ok(p)
    }

    /// All column dots against one vector in a single reduction.
    fn fused_dots(&self, cols: &[DistVector], v: &DistVector) -> Result<Vec<f64>> {
        let parts: Result<Vec<f64>> = cols.iter().map(|c| partial(c, v)).collect();
        v.comm().allreduce_sum(&parts?)
    }

    fn curvature(&self, j: usize) -> Result<f64> {
        let d = self.d[j];
        if d == 0.0 {
            return Err(Error::DegenerateHistory(format!("zero curvature at pair {j}")));
        }
        Ok(d)
    }

    /// Back substitution with R = triu(S'Y): solves R u = rhs.
    fn solve_upper(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let k = self.k_used();
        let mut u = rhs.to_vec();
        for i in (0..k).rev() {
            let mut acc = u[i];
            for j in i + 1..k {
                acc -= self.sty[i * k + j] * u[j];
            }
            u[i] = acc / self.triangle_diag(i)?;
        }
        Ok(u)
    }

    /// Forward substitution: solves R^T u = rhs.
    fn solve_upper_transposed(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let k = self.k_used();
        let mut u = vec![0.0; k];
        for i in 0..k {
            let mut acc = rhs[i];
            for j in 0..i {
                acc -= self.sty[j * k + i] * u[j];
            }
            u[i] = acc / self.triangle_diag(i)?;
        }
        Ok(u)
    }

    fn triangle_diag(&self, i: usize) -> Result<f64> {
        let k = self.k_used();
        let d = self.sty[i * k + i];
        if d == 0.0 {
            return Err(Error::DegenerateHistory(format!(
                "zero diagonal at {i} in the cross-product triangle"
            )));
        }
        Ok(d)
    }
}

/// Installs `h0` as the base operator for this iterate and applies: the
/// variable-metric step. The intermediate dense formulation performs
/// exactly one base application here no matter how often the operator
/// changes; the compact dense formulation pays a full cache rebuild.
pub fn apply_varmetric(
    state: &mut LbfgsState,
    g: &DistVector,
    h0: impl BaseOperator + 'static,
    formulation: Formulation,
) -> Result<DistVector> {
    state.set_base_operator(h0);
    state.apply(g, formulation)
}

/// Shrinks a k x k row-major matrix by dropping its first row and column.
fn drop_first_row_col(m: &[f64], k: usize) -> Vec<f64> {
    let kn = k - 1;
    let mut out = vec![0.0; kn * kn];
    for i in 0..kn {
        for j in 0..kn {
            out[i * kn + j] = m[(i + 1) * k + (j + 1)];
        }
    }
    out
}

/// Effective bandwidth of an update/apply cycle: a history of m pairs
/// must move n(2m + 2) scalars through memory, so the achieved rate is
/// n(2m + 2) / (t_update + t_solve) scalar elements per second.
pub fn effective_bandwidth(n: usize, m: usize, t_update: f64, t_solve: f64) -> Result<f64> {
    if !(t_update > 0.0) {
        return Err(Error::NonpositiveTime(t_update));
    }
    if !(t_solve > 0.0) {
        return Err(Error::NonpositiveTime(t_solve));
    }
    Ok(n as f64 * (2.0 * m as f64 + 2.0) / (t_update + t_solve))
}
