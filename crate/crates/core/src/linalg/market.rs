use std::io::{self, Write};

use super::SparseMatrix;
use crate::scalar::Real;

/// Writes the matrix in MatrixMarket coordinate format (1-based indices).
pub fn write_matrix_market<T: Real, W: Write>(a: &SparseMatrix<T>, mut out: W) -> io::Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", a.nrows(), a.ncols(), a.nnz())?;
    for i in 0..a.nrows() {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            writeln!(out, "{} {} {:e}", i + 1, j + 1, v.as_f64())?;
        }
    }
    Ok(())
}
