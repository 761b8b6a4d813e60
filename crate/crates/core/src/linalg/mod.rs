//! Sparse matrices and solvers sized for desk-scale finite element systems.

mod cg;
mod ldl;
mod lu;
mod market;
pub mod ordering;

use thiserror::Error;

use crate::scalar::Real;

pub use cg::{cg, CgOutcome};
pub use market::write_matrix_market;
pub use ordering::Ordering;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({nrows}x{ncols})")]
    NotSquare { nrows: usize, ncols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("non-positive pivot {value:e} at step {step}: matrix is not positive definite")]
    NotPositiveDefinite { step: usize, value: f64 },
    #[error("matrix is numerically singular (step {step})")]
    Singular { step: usize },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid sparse structure: {0}")]
    InvalidStructure(String),
    #[error("entry ({0}, {1}) is not in the sparsity pattern")]
    NotInPattern(usize, usize),
}

/// Compressed sparse row matrix with strictly increasing column indices in
/// every row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMatrix<T> {
    /// Builds a matrix from raw CSR arrays, validating the structure.
    pub fn try_from_csr(
        nrows: usize,
        ncols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self, LinalgError> {
        let bad = |m: &str| Err(LinalgError::InvalidStructure(m.to_string()));
        if row_offsets.len() != nrows + 1 || row_offsets[0] != 0 {
            return bad("row offsets length");
        }
        if col_indices.len() != values.len() || *row_offsets.last().unwrap() != col_indices.len() {
            return bad("array lengths");
        }
        for i in 0..nrows {
            let cols = &col_indices[row_offsets[i]..row_offsets[i + 1]];
            if row_offsets[i] > row_offsets[i + 1] {
                return bad("row offsets not monotone");
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= ncols) {
                return bad("column indices not strictly increasing or out of range");
            }
        }
        Ok(Self { nrows, ncols, row_offsets, col_indices, values })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, row_offsets: vec![0; nrows + 1], col_indices: vec![], values: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    pub fn from_diagonal(d: &[T]) -> Self {
        let mut m = Self::identity(d.len());
        m.values.copy_from_slice(d);
        m
    }

    /// Dense row-major input; exact zeros are dropped.
    pub fn from_dense(rows: &[Vec<T>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut b = TripletBuilder::new(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), ncols, "ragged dense input");
            for (j, &v) in r.iter().enumerate() {
                if v != T::zero() {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
    }

    /// Zero-valued matrix with the given per-row column sets.
    pub fn from_pattern(ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        let nrows = rows.len();
        let mut row_offsets = Vec::with_capacity(nrows + 1);
        row_offsets.push(0);
        let total: usize = rows.iter().map(|r| r.len()).sum();
        let mut col_indices = Vec::with_capacity(total);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_indices.extend_from_slice(r);
            row_offsets.push(col_indices.len());
        }
        let nnz = col_indices.len();
        Self { nrows, ncols, row_offsets, col_indices, values: vec![T::zero(); nnz] }
    }

    /// Square pattern coupling every pair of dofs that share an element.
    pub fn pattern_from_elements<'a, I>(n: usize, elements: I) -> Self
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for dofs in elements {
            for &i in dofs {
                rows[i].extend_from_slice(dofs);
            }
        }
        Self::from_pattern(n, rows)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[r.clone()], &self.values[r])
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_offsets[i];
        let cols = &self.col_indices[start..self.row_offsets[i + 1]];
        cols.binary_search(&j).ok().map(|p| start + p)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.position(i, j).map_or(T::zero(), |p| self.values[p])
    }

    /// Adds `v` to an entry that already exists in the pattern.
    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: T) -> Result<(), LinalgError> {
        let p = self.position(i, j).ok_or(LinalgError::NotInPattern(i, j))?;
        self.values[p] += v;
        Ok(())
    }

    /// Scatters a dense local block `local[r][c]` into rows `rdofs` and
    /// columns `cdofs`.
    pub fn add_block<const R: usize, const C: usize>(
        &mut self,
        rdofs: &[usize; R],
        cdofs: &[usize; C],
        local: &[[T; C]; R],
    ) -> Result<(), LinalgError> {
        for (r, &i) in rdofs.iter().enumerate() {
            for (c, &j) in cdofs.iter().enumerate() {
                self.add_to(i, j, local[r][c])?;
            }
        }
        Ok(())
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `y = A x`.
    pub fn spmv(&self, x: &[T]) -> Result<Vec<T>, LinalgError> {
        if x.len() != self.ncols {
            return Err(LinalgError::DimensionMismatch { expected: self.ncols, got: x.len() });
        }
        let mut y = vec![T::zero(); self.nrows];
        self.spmv_into(x, &mut y);
        Ok(y)
    }

    /// `y = A x` without dimension checks. Each row is accumulated in column
    /// order so results are bit-reproducible.
    pub fn spmv_into(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            let mut s = T::zero();
            for p in self.row_offsets[i]..self.row_offsets[i + 1] {
                s += self.values[p] * x[self.col_indices[p]];
            }
            *yi = s;
        }
    }

    /// `y += alpha A x`.
    pub fn spmv_add(&self, alpha: T, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            let mut s = T::zero();
            for p in self.row_offsets[i]..self.row_offsets[i + 1] {
                s += self.values[p] * x[self.col_indices[p]];
            }
            *yi += alpha * s;
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[T], y: &[T]) -> T {
        let mut s = T::zero();
        for (i, &xi) in x.iter().enumerate().take(self.nrows) {
            let (cols, vals) = self.row(i);
            let mut r = T::zero();
            for (&j, &v) in cols.iter().zip(vals) {
                r += v * y[j];
            }
            s += xi * r;
        }
        s
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for k in 0..self.ncols {
            counts[k + 1] += counts[k];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for i in 0..self.nrows {
            for p in self.row_offsets[i]..self.row_offsets[i + 1] {
                let c = self.col_indices[p];
                col_indices[next[c]] = i;
                values[next[c]] = self.values[p];
                next[c] += 1;
            }
        }
        Self { nrows: self.ncols, ncols: self.nrows, row_offsets, col_indices, values }
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> T {
        if self.nrows != self.ncols {
            return T::infinity();
        }
        let scale = self.max_abs();
        if scale == T::zero() {
            return T::zero();
        }
        let mut worst = T::zero();
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn is_symmetric(&self, rel_tol: T) -> bool {
        self.asymmetry() <= rel_tol
    }

    /// `Σ_k c_k A_k` over matrices of equal shape; the result pattern is the
    /// union of the input patterns.
    pub fn linear_combination(terms: &[(T, &SparseMatrix<T>)]) -> Result<Self, LinalgError> {
        let (nrows, ncols) = match terms.first() {
            Some((_, m)) => (m.nrows, m.ncols),
            None => return Err(LinalgError::InvalidStructure("empty combination".into())),
        };
        for (_, m) in terms {
            if m.nrows != nrows || m.ncols != ncols {
                return Err(LinalgError::DimensionMismatch { expected: nrows, got: m.nrows });
            }
        }
        let mut row_offsets = Vec::with_capacity(nrows + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![T::zero(); ncols];
        let mut used = vec![false; ncols];
        let mut pattern = Vec::new();
        for i in 0..nrows {
            pattern.clear();
            for (c, m) in terms {
                let (cols, vals) = m.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    if !used[j] {
                        used[j] = true;
                        pattern.push(j);
                    }
                    acc[j] += *c * v;
                }
            }
            pattern.sort_unstable();
            for &j in &pattern {
                col_indices.push(j);
                values.push(acc[j]);
                acc[j] = T::zero();
                used[j] = false;
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self { nrows, ncols, row_offsets, col_indices, values })
    }

    /// Copy without explicitly stored zeros.
    pub fn pruned(&self) -> Self {
        let mut row_offsets = Vec::with_capacity(self.nrows + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if v != T::zero() {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self { nrows: self.nrows, ncols: self.ncols, row_offsets, col_indices, values }
    }

    /// Submatrix with the given rows and columns (both in the given order).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            map[c] = k;
        }
        let mut b = TripletBuilder::new(rows.len(), cols.len());
        for (ri, &i) in rows.iter().enumerate() {
            let (cs, vs) = self.row(i);
            for (&j, &v) in cs.iter().zip(vs) {
                if map[j] != usize::MAX {
                    b.push(ri, map[j], v);
                }
            }
        }
        b.build()
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        d
    }
}

/// Coordinate-triplet accumulator. Duplicates are summed in insertion order
/// when the matrix is built, so the result does not depend on anything but
/// the push sequence.
#[derive(Clone, Debug)]
pub struct TripletBuilder<T> {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> TripletBuilder<T> {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    pub fn push(&mut self, i: usize, j: usize, v: T) {
        assert!(i < self.nrows && j < self.ncols, "triplet ({i}, {j}) out of bounds");
        self.entries.push((i, j, v));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn build(mut self) -> SparseMatrix<T> {
        // stable sort keeps insertion order among duplicates
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_offsets = vec![0usize; self.nrows + 1];
        let mut col_indices: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<T> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(j);
                values.push(v);
                row_offsets[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for k in 0..self.nrows {
            row_offsets[k + 1] += row_offsets[k];
        }
        SparseMatrix { nrows: self.nrows, ncols: self.ncols, row_offsets, col_indices, values }
    }
}

enum Inner<T> {
    Ldl(ldl::LdlFactor<T>),
    Lu(lu::LuFactor<T>),
}

/// Reusable factorization. Solves take `&self`, so a handle can be shared
/// across threads.
pub struct FactorHandle<T> {
    n: usize,
    inner: Inner<T>,
    /// Original matrix for iterative refinement when the factored matrix
    /// was regularized.
    refine: Option<SparseMatrix<T>>,
}

impl<T: Real> FactorHandle<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn factor_nnz(&self) -> usize {
        match &self.inner {
            Inner::Ldl(f) => f.nnz(),
            Inner::Lu(f) => f.nnz(),
        }
    }

    fn solve_raw(&self, b: &[T], x: &mut [T]) {
        match &self.inner {
            Inner::Ldl(f) => f.solve_into(b, x),
            Inner::Lu(f) => f.solve_into(b, x),
        }
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>, LinalgError> {
        let mut x = vec![T::zero(); self.n];
        self.solve_into(b, &mut x)?;
        Ok(x)
    }

    pub fn solve_into(&self, b: &[T], x: &mut [T]) -> Result<(), LinalgError> {
        if b.len() != self.n || x.len() != self.n {
            return Err(LinalgError::DimensionMismatch { expected: self.n, got: b.len().min(x.len()) });
        }
        self.solve_raw(b, x);
        if let Some(a) = &self.refine {
            let bnorm = crate::scalar::norm2(b);
            if bnorm == T::zero() {
                return Ok(());
            }
            let target = T::epsilon() * T::lit(64.0) * bnorm;
            let mut r = vec![T::zero(); self.n];
            let mut dx = vec![T::zero(); self.n];
            let mut prev = T::infinity();
            for _ in 0..20 {
                a.spmv_into(x, &mut r);
                for (ri, &bi) in r.iter_mut().zip(b) {
                    *ri = bi - *ri;
                }
                let rn = crate::scalar::norm2(&r);
                if rn <= target || rn >= prev * T::lit(0.5) {
                    break;
                }
                prev = rn;
                self.solve_raw(&r, &mut dx);
                for (xi, &d) in x.iter_mut().zip(&dx) {
                    *xi += d;
                }
            }
        }
        Ok(())
    }
}

fn check_square<T: Real>(a: &SparseMatrix<T>) -> Result<(), LinalgError> {
    if a.nrows != a.ncols {
        return Err(LinalgError::NotSquare { nrows: a.nrows, ncols: a.ncols });
    }
    Ok(())
}

/// Sparse `LDLᵀ` of a symmetric positive definite matrix with a nested
/// dissection fill-reducing ordering.
pub fn factor_spd<T: Real>(a: &SparseMatrix<T>) -> Result<FactorHandle<T>, LinalgError> {
    factor_spd_with(a, Ordering::NestedDissection)
}

pub fn factor_spd_with<T: Real>(a: &SparseMatrix<T>, order: Ordering) -> Result<FactorHandle<T>, LinalgError> {
    check_square(a)?;
    let asym = a.asymmetry();
    if asym > T::lit(1e-12).max(T::epsilon() * T::lit(16.0)) {
        return Err(LinalgError::NotSymmetric(asym.as_f64()));
    }
    let perm = ordering::compute(a, order);
    let f = ldl::LdlFactor::factor(a, &perm, None, ldl::PivotPolicy::Positive)?;
    Ok(FactorHandle { n: a.nrows, inner: Inner::Ldl(f), refine: None })
}

/// Symmetric quasi-definite factorization for saddle-point systems
/// `[A Bᵀ; B -C]` with `A` positive definite and `C` positive semidefinite.
///
/// Rows flagged in `dual` receive a tiny negative diagonal shift before an
/// `LDLᵀ` factorization in the supplied elimination order; solves apply
/// iterative refinement against the unshifted matrix. A dual pivot that
/// collapses to the size of the shift means the saddle system is singular.
pub fn factor_symmetric_indefinite<T: Real>(
    a: &SparseMatrix<T>,
    perm: Option<&[usize]>,
    dual: &[bool],
) -> Result<FactorHandle<T>, LinalgError> {
    check_square(a)?;
    if dual.len() != a.nrows {
        return Err(LinalgError::DimensionMismatch { expected: a.nrows, got: dual.len() });
    }
    let asym = a.asymmetry();
    if asym > T::lit(1e-12).max(T::epsilon() * T::lit(16.0)) {
        return Err(LinalgError::NotSymmetric(asym.as_f64()));
    }
    let perm = match perm {
        Some(p) => p.to_vec(),
        None => ordering::compute(a, Ordering::NestedDissection),
    };
    let delta = a.max_abs() * T::lit(1e-12).max(T::epsilon() * T::lit(8.0));
    let shift: Vec<T> = dual.iter().map(|&d| if d { -delta } else { T::zero() }).collect();
    let f = ldl::LdlFactor::factor(a, &perm, Some(&shift), ldl::PivotPolicy::QuasiDefinite { delta })?;
    Ok(FactorHandle { n: a.nrows, inner: Inner::Ldl(f), refine: Some(a.clone()) })
}

/// Sparse LU with threshold partial pivoting.
pub fn factor_general<T: Real>(a: &SparseMatrix<T>) -> Result<FactorHandle<T>, LinalgError> {
    check_square(a)?;
    let sym = ordering::symmetrized_pattern(a);
    let q = ordering::compute(&sym, Ordering::NestedDissection);
    let f = lu::LuFactor::factor(a, &q)?;
    Ok(FactorHandle { n: a.nrows, inner: Inner::Lu(f), refine: None })
}
