use super::{LinalgError, SparseMatrix};
use crate::scalar::{dot, norm2, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome<T> {
    pub solution: Vec<T>,
    pub iterations: usize,
    pub relative_residual: T,
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive definite
/// systems, stopping once `‖b - A x‖ <= tol ‖b‖`.
pub fn cg<T: Real>(
    a: &SparseMatrix<T>,
    b: &[T],
    x0: Option<&[T]>,
    tol: T,
    max_iter: usize,
) -> Result<CgOutcome<T>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare { nrows: n, ncols: a.ncols() });
    }
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
    }
    let mut x = match x0 {
        Some(v) if v.len() == n => v.to_vec(),
        Some(v) => return Err(LinalgError::DimensionMismatch { expected: n, got: v.len() }),
        None => vec![T::zero(); n],
    };
    let bnorm = norm2(b);
    if bnorm == T::zero() {
        return Ok(CgOutcome { solution: vec![T::zero(); n], iterations: 0, relative_residual: T::zero() });
    }
    let inv_diag: Vec<T> =
        a.diagonal().into_iter().map(|d| if d > T::zero() { T::one() / d } else { T::one() }).collect();
    let mut r = a.spmv(&x)?;
    for (ri, &bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(&ri, &d)| ri * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    let mut rel = norm2(&r) / bnorm;
    let mut it = 0;
    while rel > tol {
        if it == max_iter {
            return Err(LinalgError::NoConvergence { iterations: it, residual: rel.as_f64() });
        }
        a.spmv_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= T::zero() {
            return Err(LinalgError::NotPositiveDefinite { step: it, value: pap.as_f64() });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        rel = norm2(&r) / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgOutcome { solution: x, iterations: it, relative_residual: rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::TripletBuilder;

    #[test]
    fn identity_converges_in_one_step() {
        let a = SparseMatrix::<f64>::identity(5);
        let out = cg(&a, &[1.0, 2.0, 3.0, 4.0, 5.0], None, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.relative_residual < 1e-15);
    }

    #[test]
    fn reports_non_convergence() {
        let n = 50;
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.push(i, i, 2.0);
            if i + 1 < n {
                b.push(i, i + 1, -1.0);
                b.push(i + 1, i, -1.0);
            }
        }
        let a = b.build();
        let rhs = vec![1.0; n];
        assert!(matches!(cg(&a, &rhs, None, 1e-12, 1), Err(LinalgError::NoConvergence { iterations: 1, .. })));
        let ok = cg(&a, &rhs, None, 1e-10, 200).unwrap();
        assert!(ok.relative_residual <= 1e-10);
    }
}
