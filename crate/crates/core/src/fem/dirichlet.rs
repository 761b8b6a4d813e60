use super::FemError;
use crate::linalg::SparseMatrix;
use crate::scalar::Real;

/// Column coupling removed by symmetric Dirichlet elimination. Keeps the
/// constrained set so new boundary values can be applied to fresh
/// right-hand sides without touching the (already factored) matrix.
#[derive(Clone, Debug)]
pub struct DirichletLift<T> {
    nodes: Vec<usize>,
    constrained: Vec<bool>,
    /// Entries `A[i, j]` with `i` free and `j` constrained.
    coupling: SparseMatrix<T>,
}

impl<T: Real> DirichletLift<T> {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn is_constrained(&self, i: usize) -> bool {
        self.constrained[i]
    }

    /// Moves the known columns to the right-hand side and writes the values
    /// into the constrained rows. `values` is aligned with [`Self::nodes`].
    pub fn apply_rhs(&self, rhs: &mut [T], values: &[T]) -> Result<(), FemError> {
        let n = self.constrained.len();
        if rhs.len() != n {
            return Err(FemError::LengthMismatch { expected: n, got: rhs.len() });
        }
        if values.len() != self.nodes.len() {
            return Err(FemError::LengthMismatch { expected: self.nodes.len(), got: values.len() });
        }
        let mut full = vec![T::zero(); n];
        for (&i, &v) in self.nodes.iter().zip(values) {
            full[i] = v;
        }
        self.coupling.spmv_add(-T::one(), &full, rhs);
        for (&i, &v) in self.nodes.iter().zip(values) {
            rhs[i] = v;
        }
        Ok(())
    }
}

/// Symmetric Dirichlet elimination: constrained rows and columns are
/// cleared and given a unit diagonal, and `rhs` is corrected by the removed
/// columns. Duplicated nodes must carry identical values.
pub fn apply_dirichlet<T: Real>(
    a: &SparseMatrix<T>,
    rhs: &mut [T],
    nodes: &[usize],
    values: &[T],
) -> Result<(SparseMatrix<T>, DirichletLift<T>), FemError> {
    let n = a.nrows();
    if values.len() != nodes.len() {
        return Err(FemError::LengthMismatch { expected: nodes.len(), got: values.len() });
    }
    let mut pairs: Vec<(usize, T)> = nodes.iter().copied().zip(values.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    let mut uniq: Vec<(usize, T)> = Vec::with_capacity(pairs.len());
    for (i, v) in pairs {
        if i >= n {
            return Err(FemError::DofOutOfRange { node: i });
        }
        match uniq.last() {
            Some(&(j, w)) if j == i => {
                if w != v {
                    return Err(FemError::ConflictingDirichlet { node: i });
                }
            }
            _ => uniq.push((i, v)),
        }
    }
    let mut constrained = vec![false; n];
    for &(i, _) in &uniq {
        constrained[i] = true;
    }
    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut cols = Vec::with_capacity(a.nnz());
    let mut vals = Vec::with_capacity(a.nnz());
    let mut crow = vec![Vec::new(); n];
    let mut cvals = Vec::new();
    for i in 0..n {
        let (ci, vi) = a.row(i);
        if constrained[i] {
            cols.push(i);
            vals.push(T::one());
        } else {
            for (&j, &v) in ci.iter().zip(vi) {
                if constrained[j] {
                    crow[i].push(j);
                    cvals.push(v);
                } else {
                    cols.push(j);
                    vals.push(v);
                }
            }
        }
        row_offsets.push(cols.len());
    }
    let reduced = SparseMatrix::try_from_csr(n, a.ncols(), row_offsets, cols, vals)?;
    let mut coupling = SparseMatrix::from_pattern(n, crow);
    coupling.values_mut().copy_from_slice(&cvals);
    let lift = DirichletLift { nodes: uniq.iter().map(|p| p.0).collect(), constrained, coupling };
    let vals: Vec<T> = uniq.iter().map(|p| p.1).collect();
    lift.apply_rhs(rhs, &vals)?;
    Ok((reduced, lift))
}
