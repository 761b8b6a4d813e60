//! Left-looking sparse LU (Gilbert-Peierls) with threshold partial pivoting.

use super::{LinalgError, SparseMatrix};
use crate::scalar::Real;

/// Relative threshold favouring the diagonal when it is within this factor
/// of the largest candidate.
const PIVOT_TOL: f64 = 0.1;

pub(crate) struct LuFactor<T> {
    n: usize,
    /// Row eliminated at step k.
    prow: Vec<usize>,
    /// Column eliminated at step k.
    q: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<T>,
    up: Vec<usize>,
    ui: Vec<usize>,
    ux: Vec<T>,
}

impl<T: Real> LuFactor<T> {
    pub(crate) fn factor(a: &SparseMatrix<T>, q: &[usize]) -> Result<Self, LinalgError> {
        let n = a.nrows();
        // column access
        let at = a.transpose();
        let col = |j: usize| at.row(j);
        let scale = a.max_abs();
        let tiny = scale * T::lit(1e-14).max(T::epsilon() * T::lit(16.0));
        let tol = T::lit(PIVOT_TOL);

        let mut pinv = vec![usize::MAX; n];
        let mut lp = Vec::with_capacity(n + 1);
        let mut up = Vec::with_capacity(n + 1);
        let mut li: Vec<usize> = Vec::with_capacity(4 * a.nnz() + n);
        let mut lx: Vec<T> = Vec::with_capacity(4 * a.nnz() + n);
        let mut ui: Vec<usize> = Vec::with_capacity(4 * a.nnz() + n);
        let mut ux: Vec<T> = Vec::with_capacity(4 * a.nnz() + n);
        let mut x = vec![T::zero(); n];
        let mut marked = vec![false; n];
        let mut reach: Vec<usize> = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::with_capacity(n);

        for k in 0..n {
            lp.push(li.len());
            up.push(ui.len());
            let c = q[k];
            let (rows, vals) = col(c);

            // nonzero pattern of L \ A(:, c) in topological order
            reach.clear();
            for &r in rows {
                if marked[r] {
                    continue;
                }
                marked[r] = true;
                stack.push((r, 0));
                while let Some(top) = stack.len().checked_sub(1) {
                    let (j, pos) = stack[top];
                    let jcol = pinv[j];
                    let mut next = None;
                    if jcol != usize::MAX {
                        let begin = lp[jcol] + 1;
                        let end = lp[jcol + 1];
                        let mut p = begin + pos;
                        while p < end {
                            let i = li[p];
                            p += 1;
                            if !marked[i] {
                                next = Some(i);
                                break;
                            }
                        }
                        stack[top].1 = p - begin;
                    }
                    match next {
                        Some(i) => {
                            marked[i] = true;
                            stack.push((i, 0));
                        }
                        None => {
                            stack.pop();
                            reach.push(j);
                        }
                    }
                }
            }
            reach.reverse();
            for &i in &reach {
                marked[i] = false;
                x[i] = T::zero();
            }
            for (&r, &v) in rows.iter().zip(vals) {
                x[r] = v;
            }
            // sparse triangular solve
            for &j in &reach {
                let jcol = pinv[j];
                if jcol == usize::MAX {
                    continue;
                }
                let xj = x[j];
                let end = lp[jcol + 1];
                for p in lp[jcol] + 1..end {
                    x[li[p]] -= lx[p] * xj;
                }
            }
            // pivot choice
            let mut ipiv = usize::MAX;
            let mut amax = -T::one();
            for &i in &reach {
                if pinv[i] == usize::MAX {
                    if x[i].abs() > amax {
                        amax = x[i].abs();
                        ipiv = i;
                    }
                } else {
                    ui.push(pinv[i]);
                    ux.push(x[i]);
                }
            }
            if ipiv == usize::MAX || amax <= tiny || !amax.is_finite() {
                return Err(LinalgError::Singular { step: k });
            }
            if pinv[c] == usize::MAX && x[c].abs() >= amax * tol {
                ipiv = c;
            }
            let pivot = x[ipiv];
            ui.push(k);
            ux.push(pivot);
            pinv[ipiv] = k;
            li.push(ipiv);
            lx.push(T::one());
            for &i in &reach {
                if pinv[i] == usize::MAX {
                    li.push(i);
                    lx.push(x[i] / pivot);
                }
                x[i] = T::zero();
            }
        }
        lp.push(li.len());
        up.push(ui.len());
        for r in li.iter_mut() {
            *r = pinv[*r];
        }
        let mut prow = vec![0; n];
        for (i, &k) in pinv.iter().enumerate() {
            prow[k] = i;
        }
        Ok(Self { n, prow, q: q.to_vec(), lp, li, lx, up, ui, ux })
    }

    pub(crate) fn nnz(&self) -> usize {
        self.lx.len() + self.ux.len()
    }

    pub(crate) fn solve_into(&self, b: &[T], out: &mut [T]) {
        let mut x: Vec<T> = self.prow.iter().map(|&i| b[i]).collect();
        for j in 0..self.n {
            let xj = x[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in (0..self.n).rev() {
            let last = self.up[j + 1] - 1;
            x[j] /= self.ux[last];
            let xj = x[j];
            for p in self.up[j]..last {
                x[self.ui[p]] -= self.ux[p] * xj;
            }
        }
        for (k, &c) in self.q.iter().enumerate() {
            out[c] = x[k];
        }
    }
}
