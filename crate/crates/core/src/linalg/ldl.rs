//! Up-looking sparse `LDLᵀ` (elimination tree symbolic phase followed by a
//! row-by-row numeric phase).

use super::{LinalgError, SparseMatrix};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) enum PivotPolicy<T> {
    /// Every pivot must be clearly positive.
    Positive,
    /// Pivots of any sign; a pivot within a few multiples of the
    /// regularization shift signals a singular unshifted matrix.
    QuasiDefinite { delta: T },
}

pub(crate) struct LdlFactor<T> {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<u32>,
    lx: Vec<T>,
    d: Vec<T>,
}

impl<T: Real> LdlFactor<T> {
    /// Factors `P (A + diag(shift)) Pᵀ` where `perm[k]` is the original
    /// index eliminated at step `k`. Only the entries `A[perm[k], perm[j]]`
    /// with `j <= k` are read, taken from row `perm[k]` of `A`.
    pub(crate) fn factor(
        a: &SparseMatrix<T>,
        perm: &[usize],
        shift: Option<&[T]>,
        policy: PivotPolicy<T>,
    ) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if perm.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: perm.len() });
        }
        if n >= u32::MAX as usize {
            return Err(LinalgError::InvalidStructure("matrix too large for 32-bit row indices".into()));
        }
        let mut pinv = vec![usize::MAX; n];
        for (k, &i) in perm.iter().enumerate() {
            if i >= n || pinv[i] != usize::MAX {
                return Err(LinalgError::InvalidStructure("ordering is not a permutation".into()));
            }
            pinv[i] = k;
        }

        // symbolic: elimination tree and column counts
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for &col in a.row(perm[k]).0 {
                let mut i = pinv[col];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == usize::MAX {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let total = lp[n];
        log::debug!("ldl: n = {n}, nnz(A) = {}, nnz(L) = {total}", a.nnz());

        // numeric
        let mut li = vec![0u32; total];
        let mut lx = vec![T::zero(); total];
        let mut d = vec![T::zero(); n];
        let mut y = vec![T::zero(); n];
        let mut pattern = vec![0usize; n];
        let mut next = lp.clone();
        let scale = a.max_abs();
        let tiny = T::lit(1e-12).max(T::epsilon() * T::lit(100.0));
        for k in 0..n {
            y[k] = T::zero();
            let mut top = n;
            flag[k] = k;
            let orig = perm[k];
            let (cols, vals) = a.row(orig);
            let mut akk = T::zero();
            for (&col, &v) in cols.iter().zip(vals) {
                let mut i = pinv[col];
                if i > k {
                    continue;
                }
                if i == k {
                    akk = v.abs();
                }
                y[i] += v;
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            if let Some(s) = shift {
                y[k] += s[orig];
            }
            d[k] = y[k];
            y[k] = T::zero();
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = T::zero();
                let end = next[i];
                for p in lp[i]..end {
                    y[li[p] as usize] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[end] = k as u32;
                lx[end] = l_ki;
                next[i] += 1;
            }
            let dk = d[k];
            if !dk.is_finite() {
                return Err(LinalgError::Singular { step: k });
            }
            match policy {
                PivotPolicy::Positive => {
                    if dk <= T::zero() || dk <= tiny * akk.max(T::min_positive_value()) {
                        return Err(LinalgError::NotPositiveDefinite { step: k, value: dk.as_f64() });
                    }
                }
                PivotPolicy::QuasiDefinite { delta } => {
                    let shifted = shift.is_some_and(|s| s[orig] != T::zero());
                    let floor = if shifted { delta * T::lit(10.0) } else { tiny * scale };
                    if dk.abs() <= floor {
                        return Err(LinalgError::Singular { step: k });
                    }
                }
            }
        }
        Ok(Self { n, perm: perm.to_vec(), lp, li, lx, d })
    }

    pub(crate) fn nnz(&self) -> usize {
        self.lx.len() + self.n
    }

    pub(crate) fn solve_into(&self, b: &[T], x: &mut [T]) {
        let n = self.n;
        let mut w: Vec<T> = self.perm.iter().map(|&i| b[i]).collect();
        // L is stored by columns: column j holds rows > j
        for j in 0..n {
            let wj = w[j];
            if wj != T::zero() {
                for p in self.lp[j]..self.lp[j + 1] {
                    w[self.li[p] as usize] -= self.lx[p] * wj;
                }
            }
        }
        for j in 0..n {
            w[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut s = w[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= self.lx[p] * w[self.li[p] as usize];
            }
            w[j] = s;
        }
        for (k, &i) in self.perm.iter().enumerate() {
            x[i] = w[k];
        }
    }
}
