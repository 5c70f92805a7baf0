//! Random matrix-assembly instances and random linear systems.

use rand::Rng;

/// One distributed COO assembly instance: per-rank triplet streams against a
/// shared global shape. Rows and columns may repeat (duplicates accumulate)
/// and may be negative (those triplets are dropped by assembly).
#[derive(Debug, Clone)]
pub struct CooInstance {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<Vec<i64>>,
    pub cols: Vec<Vec<i64>>,
    pub vals: Vec<Vec<f64>>,
}

/// Draws an instance with roughly `dup_frac` duplicate entries and
/// `neg_frac` negative (ignored) indices per rank.
pub fn random_coo<R: Rng>(
    rng: &mut R,
    size: usize,
    max_dim: usize,
    max_nnz: usize,
    dup_frac: f64,
    neg_frac: f64,
) -> CooInstance {
    let nrows = rng.gen_range(1..=max_dim);
    let ncols = rng.gen_range(1..=max_dim);
    let mut rows = Vec::with_capacity(size);
    let mut cols = Vec::with_capacity(size);
    let mut vals = Vec::with_capacity(size);
    for _ in 0..size {
        let nnz = rng.gen_range(0..=max_nnz);
        let mut r = Vec::with_capacity(nnz);
        let mut c = Vec::with_capacity(nnz);
        let mut v = Vec::with_capacity(nnz);
        for k in 0..nnz {
            if k > 0 && rng.gen_bool(dup_frac) {
                let j = rng.gen_range(0..k);
                r.push(r[j]);
                c.push(c[j]);
            } else if rng.gen_bool(neg_frac) {
                // negative on one or both sides: must be skipped
                if rng.gen_bool(0.5) {
                    r.push(-(rng.gen_range(1..=4) as i64));
                    c.push(rng.gen_range(0..ncols) as i64);
                } else {
                    r.push(rng.gen_range(0..nrows) as i64);
                    c.push(-(rng.gen_range(1..=4) as i64));
                }
            } else {
                r.push(rng.gen_range(0..nrows) as i64);
                c.push(rng.gen_range(0..ncols) as i64);
            }
            v.push(rng.gen_range(-2.0..2.0));
        }
        rows.push(r);
        cols.push(c);
        vals.push(v);
    }
    CooInstance { nrows, ncols, rows, cols, vals }
}

/// Dense triplet accumulation: the ground truth a distributed assembly must
/// reproduce. Negative indices are skipped, duplicates add.
pub fn accumulate_dense(inst: &CooInstance) -> Vec<f64> {
    let mut a = vec![0.0; inst.nrows * inst.ncols];
    for rank in 0..inst.rows.len() {
        for k in 0..inst.rows[rank].len() {
            let (i, j) = (inst.rows[rank][k], inst.cols[rank][k]);
            if i < 0 || j < 0 {
                continue;
            }
            a[i as usize * inst.ncols + j as usize] += inst.vals[rank][k];
        }
    }
    a
}

/// Random symmetric positive definite matrix as global triplets: strict
/// diagonal dominance with symmetric off-diagonal fill.
pub fn random_spd_triplets<R: Rng>(
    rng: &mut R,
    n: usize,
    fill: f64,
) -> (Vec<i64>, Vec<i64>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut rowsum = vec![0.0f64; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(fill) {
                let v: f64 = rng.gen_range(-1.0..1.0);
                rows.push(i as i64);
                cols.push(j as i64);
                vals.push(v);
                rows.push(j as i64);
                cols.push(i as i64);
                vals.push(v);
                rowsum[i] += v.abs();
                rowsum[j] += v.abs();
            }
        }
    }
    for i in 0..n {
        rows.push(i as i64);
        cols.push(i as i64);
        vals.push(rowsum[i] + rng.gen_range(0.5..2.0));
    }
    (rows, cols, vals)
}

/// Random diagonally dominant, generally nonsymmetric matrix as triplets.
/// Suitable for transpose-free and biorthogonal methods.
pub fn random_dd_triplets<R: Rng>(
    rng: &mut R,
    n: usize,
    fill: f64,
) -> (Vec<i64>, Vec<i64>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut rowsum = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(fill) {
                let v: f64 = rng.gen_range(-1.0..1.0);
                rows.push(i as i64);
                cols.push(j as i64);
                vals.push(v);
                rowsum[i] += v.abs();
            }
        }
    }
    for i in 0..n {
        rows.push(i as i64);
        cols.push(i as i64);
        vals.push(rowsum[i] + rng.gen_range(0.5..2.0));
    }
    (rows, cols, vals)
}

/// Splits global triplets across `size` ranks round-robin, the way a reader
/// striding a shared file would.
pub fn stripe_triplets(
    rows: &[i64],
    cols: &[i64],
    vals: &[f64],
    size: usize,
) -> (Vec<Vec<i64>>, Vec<Vec<i64>>, Vec<Vec<f64>>) {
    let mut r = vec![Vec::new(); size];
    let mut c = vec![Vec::new(); size];
    let mut v = vec![Vec::new(); size];
    for k in 0..rows.len() {
        r[k % size].push(rows[k]);
        c[k % size].push(cols[k]);
        v[k % size].push(vals[k]);
    }
    (r, c, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseMat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spd_instances_are_solvable_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.gen_range(2..20);
            let (rows, cols, vals) = random_spd_triplets(&mut rng, n, 0.3);
            let a = DenseMat::from_signed_triplets(n, &rows, &cols, &vals);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(a.get(i, j), a.get(j, i));
                }
            }
            let b = vec![1.0; n];
            assert!(a.solve(&b).is_some());
        }
    }

    #[test]
    fn accumulation_skips_negatives_and_adds_duplicates() {
        let inst = CooInstance {
            nrows: 2,
            ncols: 2,
            rows: vec![vec![0, 0, -1], vec![0]],
            cols: vec![vec![1, 1, 0], vec![1]],
            vals: vec![vec![2.0, 3.0, 99.0], vec![5.0]],
        };
        assert_eq!(accumulate_dense(&inst), vec![0.0, 10.0, 0.0, 0.0]);
    }
}
