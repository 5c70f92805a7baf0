//! Distributed sparse matrices in row-partitioned CSR form.
//!
//! Each rank owns a contiguous block of rows, split column-wise into a
//! diagonal block (columns the rank also owns) and an off-diagonal block
//! (ghost columns, compressed through a sorted column map). A star forest
//! built from the column map broadcasts the needed remote vector entries
//! into a ghost scratch buffer before each multiply.
//!
//! Structure is fixed at construction by the coordinate routing pass in
//! [`coo`]; value passes reuse the cached plan and touch only numbers, so
//! re-assembling with new values costs one exchange and no planning. Values
//! live in one shared buffer (diagonal block first, then off-diagonal) that
//! host assembly and device tasks both use directly.

pub mod coo;

use std::io::BufRead;
use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::comm::{Communicator, ReduceOp};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::object::{next_object_id, ObjectId};
use crate::sf::{LeafSpec, StarForest};
use crate::stream::StreamWorld;
use crate::vector::{DistVector, InsertMode};

pub(crate) struct CsrPattern {
    pub rowptr: Vec<usize>,
    pub cols: Vec<usize>,
}

/// Immutable local structure shared with device tasks.
pub(crate) struct MatShape {
    pub nrows: usize,
    /// Diagonal block; column indices are rank-local.
    pub diag: CsrPattern,
    /// Off-diagonal block; column indices are ghost slots.
    pub off: CsrPattern,
    pub diag_nnz: usize,
}

impl MatShape {
    /// y = A x over the local rows, given the ghost values for this rank.
    /// Accumulation order per row is fixed: diagonal block by ascending
    /// column, then off-diagonal block by ascending column.
    pub fn spmv(&self, vals: &[f64], x: &[f64], ghost: &[f64], y: &mut [f64]) {
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for p in self.diag.rowptr[i]..self.diag.rowptr[i + 1] {
                acc += vals[p] * x[self.diag.cols[p]];
            }
            for p in self.off.rowptr[i]..self.off.rowptr[i + 1] {
                acc += vals[self.diag_nnz + p] * ghost[self.off.cols[p]];
            }
            y[i] = acc;
        }
    }
}

pub struct DistCsrMatrix {
    id: ObjectId,
    row_layout: Layout,
    col_layout: Layout,
    comm: Communicator,
    shape: Arc<MatShape>,
    /// Ghost slot to global column, ascending.
    colmap: Vec<usize>,
    halo: Arc<StarForest>,
    ghost: Arc<Mutex<Vec<f64>>>,
    ghost_id: ObjectId,
    vals: Arc<Mutex<Vec<f64>>>,
    /// Pattern entry index to storage index in `vals`.
    perm: Vec<usize>,
    plan: coo::CooPlan,
    plan_builds: u64,
    world: Option<Arc<StreamWorld>>,
}

impl DistCsrMatrix {
    /// Structural pass (collective): routes and deduplicates the coordinate
    /// pattern, builds the CSR blocks and the halo forest, and caches the
    /// value-pass plan. All values start at zero.
    pub fn with_coo(
        comm: &Communicator,
        row_layout: Layout,
        col_layout: Layout,
        rows: &[i64],
        cols: &[i64],
    ) -> Result<DistCsrMatrix> {
        let rank = comm.rank();
        let assembled = coo::build_plan(comm, &row_layout, &col_layout, rows, cols)?;
        let nrows = row_layout.local_size(rank);
        let owned = col_layout.range(rank);

        let mut colmap: Vec<usize> = assembled
            .entries
            .iter()
            .filter(|&&(_, c)| !owned.contains(&c))
            .map(|&(_, c)| c)
            .collect();
        colmap.sort_unstable();
        colmap.dedup();

        let diag_nnz = assembled.entries.iter().filter(|&&(_, c)| owned.contains(&c)).count();
        let mut diag = CsrPattern { rowptr: vec![0; nrows + 1], cols: Vec::with_capacity(diag_nnz) };
        let mut off = CsrPattern {
            rowptr: vec![0; nrows + 1],
            cols: Vec::with_capacity(assembled.entries.len() - diag_nnz),
        };
        let mut perm = Vec::with_capacity(assembled.entries.len());
        for &(lrow, gcol) in &assembled.entries {
            if owned.contains(&gcol) {
                perm.push(diag.cols.len());
                diag.cols.push(gcol - owned.start);
                diag.rowptr[lrow + 1] += 1;
            } else {
                let slot = colmap.binary_search(&gcol).expect("ghost column mapped");
                perm.push(diag_nnz + off.cols.len());
                off.cols.push(slot);
                off.rowptr[lrow + 1] += 1;
            }
        }
        for i in 0..nrows {
            diag.rowptr[i + 1] += diag.rowptr[i];
            off.rowptr[i + 1] += off.rowptr[i];
        }

        let leaves: Result<Vec<LeafSpec>> = colmap
            .iter()
            .enumerate()
            .map(|(slot, &gcol)| {
                let owner = col_layout.owner_of(gcol)?;
                Ok(LeafSpec {
                    leaf: slot,
                    root_rank: owner,
                    root_offset: col_layout.to_local(owner, gcol),
                })
            })
            .collect();
        let halo = StarForest::setup(comm, col_layout.local_size(rank), &leaves?)?;

        let nnz = assembled.entries.len();
        Ok(DistCsrMatrix {
            id: next_object_id(),
            row_layout,
            col_layout,
            comm: comm.clone(),
            shape: Arc::new(MatShape { nrows, diag, off, diag_nnz }),
            ghost: Arc::new(Mutex::new(vec![0.0; colmap.len()])),
            ghost_id: next_object_id(),
            colmap,
            halo,
            vals: Arc::new(Mutex::new(vec![0.0; nnz])),
            perm,
            plan: assembled.plan,
            plan_builds: 1,
            world: None,
        })
    }

    /// Value pass (collective): exchanges numbers along the cached plan and
    /// accumulates them in the plan's deterministic order. `Insert` resets
    /// every stored nonzero to the sum of this call's contributions to it.
    pub fn set_values_coo(&mut self, values: &[f64], mode: InsertMode) -> Result<()> {
        if let Some(world) = &self.world {
            world.wait_object_rw(self.id)?;
        }
        let mut vals = self.vals.lock().unwrap();
        coo::apply_values(&self.comm, &self.plan, &self.perm, values, mode, &mut vals)
    }

    pub fn id(&self) -> ObjectId {
        self.id
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn row_layout(&self) -> &Layout {
        &self.row_layout
    }

    pub fn col_layout(&self) -> &Layout {
        &self.col_layout
    }

    pub fn local_rows(&self) -> usize {
        self.shape.nrows
    }

    pub fn local_nnz(&self) -> usize {
        self.perm.len()
    }

    /// Number of structural passes this matrix has run (stays at one no
    /// matter how many value passes follow).
    pub fn plan_builds(&self) -> u64 {
        self.plan_builds
    }

    pub fn world(&self) -> Option<&Arc<StreamWorld>> {
        self.world.as_ref()
    }

    /// Binds the matrix to a stream world so asynchronous multiplies can
    /// order themselves against host-side value updates.
    pub fn register_with(&mut self, world: &Arc<StreamWorld>) -> Result<()> {
        if let Some(w) = &self.world {
            if !w.same_world(world) {
                return Err(Error::WorldMismatch);
            }
            return Ok(());
        }
        self.world = Some(Arc::clone(world));
        Ok(())
    }

    pub(crate) fn shape(&self) -> &Arc<MatShape> {
        &self.shape
    }

    pub(crate) fn vals_handle(&self) -> &Arc<Mutex<Vec<f64>>> {
        &self.vals
    }

    pub(crate) fn ghost_handle(&self) -> &Arc<Mutex<Vec<f64>>> {
        &self.ghost
    }

    pub(crate) fn ghost_id(&self) -> ObjectId {
        self.ghost_id
    }

    pub(crate) fn halo(&self) -> &Arc<StarForest> {
        &self.halo
    }

    fn check_mult_shapes(&self, x: &DistVector, y: &DistVector) -> Result<()> {
        if x.layout() != &self.col_layout {
            return Err(Error::LayoutMismatch(format!(
                "input vector has {} entries, matrix has {} columns",
                x.layout().global_size(),
                self.col_layout.global_size()
            )));
        }
        if y.layout() != &self.row_layout {
            return Err(Error::LayoutMismatch(format!(
                "output vector has {} entries, matrix has {} rows",
                y.layout().global_size(),
                self.row_layout.global_size()
            )));
        }
        Ok(())
    }

    /// y = A x (collective). Broadcasts the needed remote entries of `x`
    /// into the ghost buffer, then multiplies the local blocks.
    pub fn mult(&self, x: &DistVector, y: &mut DistVector) -> Result<()> {
        self.check_mult_shapes(x, y)?;
        let mut ghost = self.ghost.lock().unwrap();
        self.halo.bcast(x.local()?, &mut ghost, ReduceOp::Replace)?;
        let vals = self.vals.lock().unwrap();
        self.shape.spmv(&vals, x.local()?, &ghost, y.local_mut()?);
        Ok(())
    }

    /// The diagonal entries as a vector (square layouts only); absent
    /// diagonal entries read as zero.
    pub fn diagonal(&self) -> Result<DistVector> {
        if self.row_layout != self.col_layout {
            return Err(Error::LayoutMismatch(
                "diagonal requires matching row and column layouts".into(),
            ));
        }
        let mut d = DistVector::new(&self.comm, self.row_layout.clone());
        let vals = self.vals.lock().unwrap();
        let out = d.local_mut()?;
        for i in 0..self.shape.nrows {
            for p in self.shape.diag.rowptr[i]..self.shape.diag.rowptr[i + 1] {
                if self.shape.diag.cols[p] == i {
                    out[i] = vals[p];
                }
            }
        }
        drop(vals);
        Ok(d)
    }

    /// Stored local entries as (global row, global col, value), sorted.
    pub fn local_entries(&self) -> Result<Vec<(usize, usize, f64)>> {
        let vals = self.vals.lock().unwrap();
        let row0 = self.row_layout.start(self.comm.rank());
        let col0 = self.col_layout.start(self.comm.rank());
        let mut out = Vec::with_capacity(self.perm.len());
        for i in 0..self.shape.nrows {
            for p in self.shape.diag.rowptr[i]..self.shape.diag.rowptr[i + 1] {
                out.push((row0 + i, col0 + self.shape.diag.cols[p], vals[p]));
            }
            for p in self.shape.off.rowptr[i]..self.shape.off.rowptr[i + 1] {
                out.push((row0 + i, self.colmap[self.shape.off.cols[p]], vals[self.shape.diag_nnz + p]));
            }
        }
        out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok(out)
    }
}

/// Triplets read from a plain-text file.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFile {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<i64>,
    pub cols: Vec<i64>,
    pub vals: Vec<f64>,
}

/// Reads a triplet file: a header line `nrows ncols nnz`, then `nnz` lines
/// of `row col value` with zero-based indices. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_triplets<P: AsRef<Path>>(path: P) -> Result<TripletFile> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut header: Option<(usize, usize, usize)> = None;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                detail: format!("cannot parse {what} from {s:?}"),
            })
        };
        match header {
            None => {
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        detail: format!("header needs `nrows ncols nnz`, got {} fields", fields.len()),
                    });
                }
                let h: Vec<usize> = fields
                    .iter()
                    .map(|f| {
                        f.parse::<usize>().map_err(|_| Error::Parse {
                            line: lineno + 1,
                            detail: format!("cannot parse header field {f:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                header = Some((h[0], h[1], h[2]));
            }
            Some(_) => {
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        detail: format!("entry needs `row col value`, got {} fields", fields.len()),
                    });
                }
                rows.push(parse(fields[0], "row index")? as i64);
                cols.push(parse(fields[1], "column index")? as i64);
                vals.push(parse(fields[2], "value")?);
            }
        }
    }
    let (nrows, ncols, nnz) =
        header.ok_or(Error::Parse { line: 0, detail: "empty triplet file".into() })?;
    if rows.len() != nnz {
        return Err(Error::Parse {
            line: 0,
            detail: format!("header promises {nnz} entries, file has {}", rows.len()),
        });
    }
    Ok(TripletFile { nrows, ncols, rows, cols, vals })
}

/// Builds a matrix from a triplet file (collective). Every rank reads the
/// file and feeds a strided share of the entries, exercising the routing
/// path; layouts are split evenly.
pub fn from_triplet_file<P: AsRef<Path>>(comm: &Communicator, path: P) -> Result<DistCsrMatrix> {
    let t = read_triplets(path)?;
    let stride = comm.size();
    let mine = |k: usize| k % stride == comm.rank();
    let rows: Vec<i64> = t.rows.iter().enumerate().filter(|&(k, _)| mine(k)).map(|(_, &r)| r).collect();
    let cols: Vec<i64> = t.cols.iter().enumerate().filter(|&(k, _)| mine(k)).map(|(_, &c)| c).collect();
    let vals: Vec<f64> = t.vals.iter().enumerate().filter(|&(k, _)| mine(k)).map(|(_, &v)| v).collect();
    let rl = Layout::split_even(t.nrows, comm.size());
    let cl = Layout::split_even(t.ncols, comm.size());
    let mut a = DistCsrMatrix::with_coo(comm, rl, cl, &rows, &cols)?;
    a.set_values_coo(&vals, InsertMode::Add)?;
    Ok(a)
}
