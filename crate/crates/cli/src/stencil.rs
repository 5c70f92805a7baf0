//! Structured-grid test problems assembled through the coordinate path.
//!
//! Each grid node couples to a fixed neighbor set with weight -1 and to
//! itself with the full neighbor count, so interior rows sum to zero.
//! Neighbors falling outside the domain are emitted with negative column
//! indices, which assembly drops: the boundary rows keep their full center
//! weight and the matrix becomes strictly diagonally dominant there, hence
//! symmetric positive definite overall.
//!
//! The right-hand side is manufactured as b = A x with a seeded per-index
//! solution, so every problem has a known consistent answer independent of
//! the rank count.

use starkit_core::comm::Communicator;
use starkit_core::error::Result;
use starkit_core::layout::Layout;
use starkit_core::mat::DistCsrMatrix;
use starkit_core::vector::{DistVector, InsertMode};

/// Grid problem family: 2-D or 3-D, narrow or wide coupling.
///
/// Narrow coupling is the 5-point cross in 2-D and the 9-point
/// corner-coupled stencil in 3-D; wide coupling takes the full neighbor
/// box, 9 points in 2-D and 27 in 3-D.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StencilSpec {
    pub dim: usize,
    pub wide: bool,
    /// Grid points per axis; at least 2.
    pub extent: usize,
}

impl StencilSpec {
    pub fn n(&self) -> usize {
        self.extent.pow(self.dim as u32)
    }

    /// Stencil size including the center: 5/9 in 2-D, 9/27 in 3-D.
    pub fn points(&self) -> usize {
        match (self.dim, self.wide) {
            (2, false) => 5,
            (2, true) => 9,
            (3, false) => 9,
            (3, true) => 27,
            _ => unreachable!("dimension checked at construction"),
        }
    }

    /// Neighbor offsets, center excluded, in a fixed deterministic order.
    pub fn offsets(&self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        match (self.dim, self.wide) {
            (2, false) => {
                for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    out.push([di, dj, 0]);
                }
            }
            (2, true) => {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        if (di, dj) != (0, 0) {
                            out.push([di, dj, 0]);
                        }
                    }
                }
            }
            (3, false) => {
                for di in [-1, 1] {
                    for dj in [-1, 1] {
                        for dk in [-1, 1] {
                            out.push([di, dj, dk]);
                        }
                    }
                }
            }
            (3, true) => {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        for dk in -1..=1 {
                            if (di, dj, dk) != (0, 0, 0) {
                                out.push([di, dj, dk]);
                            }
                        }
                    }
                }
            }
            _ => unreachable!("dimension checked at construction"),
        }
        out
    }

    fn node(&self, c: [i64; 3]) -> i64 {
        let e = self.extent as i64;
        c[0] + e * (c[1] + e * c[2])
    }

    fn coords(&self, idx: usize) -> [i64; 3] {
        let e = self.extent as i64;
        let idx = idx as i64;
        [idx % e, (idx / e) % e, idx / (e * e)]
    }

    /// Triplet stream for the given row range, in row-major node order.
    /// Out-of-domain neighbors appear with column -1 so the assembly's
    /// negative-index drop realizes the boundary condition.
    pub fn triplets(&self, rows: std::ops::Range<usize>) -> (Vec<i64>, Vec<i64>, Vec<f64>) {
        let e = self.extent as i64;
        let offsets = self.offsets();
        let center = offsets.len() as f64;
        let mut ri = Vec::new();
        let mut ci = Vec::new();
        let mut v = Vec::new();
        for row in rows {
            let c = self.coords(row);
            ri.push(row as i64);
            ci.push(row as i64);
            v.push(center);
            for off in &offsets {
                let nb = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                let inside = nb.iter().take(self.dim).all(|&x| x >= 0 && x < e)
                    && nb.iter().skip(self.dim).all(|&x| x == 0);
                ri.push(row as i64);
                ci.push(if inside { self.node(nb) } else { -1 });
                v.push(-1.0);
            }
        }
        (ri, ci, v)
    }
}

/// An assembled grid problem: the operator and a consistent right-hand side.
pub struct StencilProblem {
    pub spec: StencilSpec,
    pub a: DistCsrMatrix,
    pub b: DistVector,
}

/// Seeded per-index value in (-1, 1), identical on every rank layout.
pub fn seeded_value(seed: u64, index: usize) -> f64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ((z >> 11) as f64) / (1u64 << 52) as f64 - 1.0
}

/// Assembles the problem over evenly split rows, each rank contributing the
/// triplets of its own range, and manufactures b = A x from the seeded
/// solution.
pub fn assemble(comm: &Communicator, spec: StencilSpec, seed: u64) -> Result<StencilProblem> {
    assert!(spec.dim == 2 || spec.dim == 3, "dimension must be 2 or 3");
    assert!(spec.extent >= 2, "extent must be at least 2");
    let layout = Layout::split_even(spec.n(), comm.size());
    let range = layout.range(comm.rank());
    let (rows, cols, vals) = spec.triplets(range.clone());
    let mut a = DistCsrMatrix::with_coo(comm, layout.clone(), layout.clone(), &rows, &cols)?;
    a.set_values_coo(&vals, InsertMode::Add)?;
    let x_true = DistVector::from_local(
        comm,
        layout.clone(),
        range.map(|i| seeded_value(seed, i)).collect(),
    )?;
    let mut b = DistVector::new(comm, layout);
    a.mult(&x_true, &mut b)?;
    Ok(StencilProblem { spec, a, b })
}
