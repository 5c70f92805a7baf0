//! Dense reference linear algebra: the oracle side of every sparse test.

/// Row-major dense square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMat {
    n: usize,
    a: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(n: usize) -> DenseMat {
        DenseMat { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> DenseMat {
        let mut m = DenseMat::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    /// Accumulates triplets the way sparse assembly does: duplicates add.
    pub fn from_triplets<I>(n: usize, triplets: I) -> DenseMat
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut m = DenseMat::zeros(n);
        for (i, j, v) in triplets {
            m.a[i * n + j] += v;
        }
        m
    }

    /// Same accumulation from parallel signed index slices; negative indices
    /// are skipped, matching the distributed assembly convention.
    pub fn from_signed_triplets(n: usize, rows: &[i64], cols: &[i64], vals: &[f64]) -> DenseMat {
        let mut m = DenseMat::zeros(n);
        for k in 0..rows.len() {
            if rows[k] >= 0 && cols[k] >= 0 {
                m.a[rows[k] as usize * n + cols[k] as usize] += vals[k];
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.a[i * self.n..(i + 1) * self.n];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    pub fn transpose(&self) -> DenseMat {
        let mut t = DenseMat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.a[j * self.n + i] = self.a[i * self.n + j];
            }
        }
        t
    }

    /// Solves A x = b by partially pivoted LU. Returns None when the matrix
    /// is numerically singular.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut lu = self.a.clone();
        let mut x = b.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    lu[i * n + col].abs().partial_cmp(&lu[j * n + col].abs()).unwrap()
                })
                .unwrap();
            if lu[pivot * n + col].abs() < 1e-300 {
                return None;
            }
            if pivot != col {
                for k in 0..n {
                    lu.swap(col * n + k, pivot * n + k);
                }
                perm.swap(col, pivot);
                x.swap(col, pivot);
            }
            let d = lu[col * n + col];
            for row in col + 1..n {
                let f = lu[row * n + col] / d;
                lu[row * n + col] = f;
                for k in col + 1..n {
                    lu[row * n + k] -= f * lu[col * n + k];
                }
                x[row] -= f * x[col];
            }
        }
        for row in (0..n).rev() {
            for k in row + 1..n {
                x[row] -= lu[row * n + k] * x[k];
            }
            x[row] /= lu[row * n + row];
        }
        Some(x)
    }

    /// A⁻¹ column by column; None when singular.
    pub fn inverse(&self) -> Option<DenseMat> {
        let n = self.n;
        let mut inv = DenseMat::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                inv.a[i * n + j] = col[i];
            }
        }
        Some(inv)
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = norm2(want).max(1e-300);
    diff / scale
}
