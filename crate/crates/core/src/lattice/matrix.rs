use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::C64;

use super::basis::Basis;

/// Dimension below which operators are stored densely.
pub const DENSE_THRESHOLD: usize = 1024;

/// Tolerance on `max |M - M†|` for matrices flagged Hermitian.
pub const HERMITIAN_TOLERANCE: f64 = 1e-12;

/// Compressed sparse row matrix with complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and exact
    /// zeros dropped.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside dimension {dim}");
            if let (Some(&lr), Some(&lc)) = (rows.last(), col_idx.last()) {
                if lr == r && lc == c {
                    *values.last_mut().unwrap() += v;
                    continue;
                }
            }
            rows.push(r);
            col_idx.push(c);
            values.push(v);
        }
        let mut keep_rows = Vec::with_capacity(rows.len());
        let mut keep_cols = Vec::with_capacity(rows.len());
        let mut keep_vals = Vec::with_capacity(rows.len());
        for ((r, c), v) in rows.into_iter().zip(col_idx).zip(values) {
            if v != C64::new(0.0, 0.0) {
                keep_rows.push(r);
                keep_cols.push(c);
                keep_vals.push(v);
            }
        }
        for &r in &keep_rows {
            row_ptr[r + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            dim,
            row_ptr,
            col_idx: keep_cols,
            values: keep_vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `r` as `(column, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[C64], y: &mut [C64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Dense(DMatrix<C64>),
    Sparse(CsrMatrix),
}

/// A square operator on a lattice Hilbert space, tagged with its basis.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    basis: Basis,
    storage: Storage,
    hermitian: bool,
}

impl OperatorMatrix {
    /// Builds an operator from triplets, storing it densely below
    /// [`DENSE_THRESHOLD`]. When `hermitian` is set the flag is verified.
    pub fn from_triplets(
        basis: Basis,
        triplets: Vec<(usize, usize, C64)>,
        hermitian: bool,
    ) -> Result<Self> {
        let dim = basis.dimension();
        let storage = if dim < DENSE_THRESHOLD {
            let mut m = DMatrix::zeros(dim, dim);
            for (r, c, v) in triplets {
                if r >= dim || c >= dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: r.max(c) + 1,
                    });
                }
                m[(r, c)] += v;
            }
            Storage::Dense(m)
        } else {
            if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= dim || c >= dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.max(c) + 1,
                });
            }
            Storage::Sparse(CsrMatrix::from_triplets(dim, triplets))
        };
        let op = OperatorMatrix {
            basis,
            storage,
            hermitian,
        };
        if hermitian && op.hermiticity_defect() >= HERMITIAN_TOLERANCE {
            return Err(Error::NotHermitian);
        }
        Ok(op)
    }

    /// Wraps a dense matrix.
    pub fn from_dense(basis: Basis, m: DMatrix<C64>, hermitian: bool) -> Result<Self> {
        let dim = basis.dimension();
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: m.nrows(),
            });
        }
        let mut triplets = Vec::new();
        for c in 0..dim {
            for r in 0..dim {
                let v = m[(r, c)];
                if v != C64::new(0.0, 0.0) {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(basis, triplets, hermitian)
    }

    /// Diagonal operator.
    pub fn diagonal(basis: Basis, diag: &[C64]) -> Result<Self> {
        if diag.len() != basis.dimension() {
            return Err(Error::DimensionMismatch {
                expected: basis.dimension(),
                found: diag.len(),
            });
        }
        let hermitian = diag.iter().all(|v| v.im == 0.0);
        let triplets = diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(basis, triplets, hermitian)
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn dimension(&self) -> usize {
        self.basis.dimension()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse(_))
    }

    /// Calls `f(row, col, value)` for every stored nonzero.
    pub fn for_each_nonzero(&self, mut f: impl FnMut(usize, usize, C64)) {
        match &self.storage {
            Storage::Dense(m) => {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        let v = m[(r, c)];
                        if v != C64::new(0.0, 0.0) {
                            f(r, c, v);
                        }
                    }
                }
            }
            Storage::Sparse(s) => {
                for r in 0..s.dim() {
                    for (c, v) in s.row(r) {
                        f(r, c, v);
                    }
                }
            }
        }
    }

    /// Entry `(r, c)`.
    pub fn get(&self, r: usize, c: usize) -> C64 {
        match &self.storage {
            Storage::Dense(m) => m[(r, c)],
            Storage::Sparse(s) => s
                .row(r)
                .find(|&(cc, _)| cc == c)
                .map(|(_, v)| v)
                .unwrap_or_default(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(_) => {
                let n = self.dimension();
                let mut m = DMatrix::zeros(n, n);
                self.for_each_nonzero(|r, c, v| m[(r, c)] = v);
                m
            }
        }
    }

    /// `y = M x`.
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        match &self.storage {
            Storage::Dense(m) => {
                let n = m.nrows();
                for (r, yr) in y.iter_mut().enumerate().take(n) {
                    let mut acc = C64::new(0.0, 0.0);
                    for (c, xc) in x.iter().enumerate() {
                        acc += m[(r, c)] * xc;
                    }
                    *yr = acc;
                }
            }
            Storage::Sparse(s) => s.mul_vec(x, y),
        }
    }

    /// Returns `M x` as a new vector.
    pub fn apply_vec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.dimension()];
        self.apply(x, &mut y);
        y
    }

    /// `max |M - M†|` over all entries.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        self.for_each_nonzero(|r, c, v| {
            let d = (v - self.get(c, r).conj()).norm();
            worst = worst.max(d);
        });
        worst
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        let mut worst: f64 = 0.0;
        self.for_each_nonzero(|_, _, v| worst = worst.max(v.norm()));
        worst
    }

    /// True when every stored nonzero sits on the diagonal.
    pub fn is_diagonal(&self) -> bool {
        let mut diag = true;
        self.for_each_nonzero(|r, c, _| diag &= r == c);
        diag
    }

    /// Diagonal entries.
    pub fn diagonal_entries(&self) -> Vec<C64> {
        (0..self.dimension()).map(|i| self.get(i, i)).collect()
    }

    fn combine(&self, other: &Self, fr: impl Fn(C64, C64) -> C64, hermitian: bool) -> Result<Self> {
        if self.basis != other.basis {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                found: other.dimension(),
            });
        }
        let mut triplets = Vec::new();
        self.for_each_nonzero(|r, c, v| triplets.push((r, c, fr(v, C64::new(0.0, 0.0)))));
        other.for_each_nonzero(|r, c, v| triplets.push((r, c, fr(C64::new(0.0, 0.0), v))));
        Self::from_triplets(self.basis, triplets, hermitian)
    }

    /// `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a + b, self.hermitian && other.hermitian)
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a - b, self.hermitian && other.hermitian)
    }

    /// `c · self`.
    pub fn scale(&self, c: C64) -> Self {
        let mut triplets = Vec::new();
        self.for_each_nonzero(|r, col, v| triplets.push((r, col, c * v)));
        let hermitian = self.hermitian && c.im == 0.0;
        Self::from_triplets(self.basis, triplets, hermitian).expect("scaling preserves shape")
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut triplets = Vec::new();
        self.for_each_nonzero(|r, c, v| triplets.push((c, r, v.conj())));
        Self::from_triplets(self.basis, triplets, self.hermitian).expect("adjoint preserves shape")
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.basis != other.basis {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                found: other.dimension(),
            });
        }
        let n = self.dimension();
        let mut rows_b: Vec<Vec<(usize, C64)>> = vec![Vec::new(); n];
        other.for_each_nonzero(|r, c, v| rows_b[r].push((c, v)));
        let mut triplets = Vec::new();
        self.for_each_nonzero(|r, k, a| {
            for &(c, b) in &rows_b[k] {
                triplets.push((r, c, a * b));
            }
        });
        Self::from_triplets(self.basis, triplets, false)
    }

    /// Adds `shift[i]` to each diagonal entry; the Hermitian flag is kept only
    /// when every shift is real.
    pub fn with_diagonal_shift(&self, shift: &[C64]) -> Result<Self> {
        if shift.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                found: shift.len(),
            });
        }
        let mut triplets = Vec::new();
        self.for_each_nonzero(|r, c, v| triplets.push((r, c, v)));
        triplets.extend(shift.iter().enumerate().map(|(i, &s)| (i, i, s)));
        let hermitian = self.hermitian && shift.iter().all(|s| s.im == 0.0);
        Self::from_triplets(self.basis, triplets, hermitian)
    }

    /// Partitions the basis into the connected components of the sparsity
    /// graph. The operator is block diagonal on these index sets.
    pub fn connected_blocks(&self) -> Vec<Vec<usize>> {
        let n = self.dimension();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        self.for_each_nonzero(|r, c, _| {
            let (a, b) = (find(&mut parent, r), find(&mut parent, c));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        });
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; n];
        for i in 0..n {
            let root = find(&mut parent, i);
            if slot[root] == usize::MAX {
                slot[root] = blocks.len();
                blocks.push(Vec::new());
            }
            blocks[slot[root]].push(i);
        }
        blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn csr_sums_duplicates_and_drops_zeros() {
        let m = CsrMatrix::from_triplets(
            3,
            vec![(0, 1, c(1.0)), (0, 1, c(2.0)), (2, 2, c(1.0)), (2, 2, c(-1.0))],
        );
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.row(0).collect::<Vec<_>>(), vec![(1, c(3.0))]);
    }

    #[test]
    fn sparse_and_dense_products_agree() {
        let basis = Basis::LeakageParticle { sites: 4 };
        let trip = vec![(0, 1, c(1.0)), (1, 0, c(1.0)), (3, 3, c(2.0)), (2, 1, C64::new(0.0, 1.0))];
        let op = OperatorMatrix::from_triplets(basis, trip.clone(), false).unwrap();
        let csr = CsrMatrix::from_triplets(4, trip);
        let x = vec![c(1.0), c(2.0), c(3.0), c(4.0)];
        let mut y = vec![c(0.0); 4];
        csr.mul_vec(&x, &mut y);
        assert_eq!(op.apply_vec(&x), y);
    }

    #[test]
    fn hermitian_flag_is_verified() {
        let basis = Basis::LeakageParticle { sites: 2 };
        let bad = OperatorMatrix::from_triplets(basis, vec![(0, 1, c(1.0))], true);
        assert!(matches!(bad, Err(Error::NotHermitian)));
    }

    #[test]
    fn blocks_follow_sparsity() {
        let basis = Basis::LeakageParticle { sites: 5 };
        let op = OperatorMatrix::from_triplets(
            basis,
            vec![(0, 3, c(1.0)), (3, 0, c(1.0)), (1, 1, c(1.0)), (2, 4, c(1.0)), (4, 2, c(1.0))],
            true,
        )
        .unwrap();
        assert_eq!(op.connected_blocks(), vec![vec![0, 3], vec![1], vec![2, 4]]);
    }
}
