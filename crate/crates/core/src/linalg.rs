//! Small dense complex solvers used by the least-squares subband fits.

use crate::num_complex::Complex64;
use crate::{Error, Result};

/// Solves `a x = b` for a square `n x n` row-major matrix by Gaussian
/// elimination with partial pivoting. `a` and `b` are consumed as scratch.
pub fn solve(mut a: Vec<Complex64>, mut b: Vec<Complex64>, n: usize) -> Result<Vec<Complex64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::Shape(format!(
            "solve: matrix {} / rhs {} for n={n}",
            a.len(),
            b.len()
        )));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].norm().total_cmp(&a[j * n + col].norm()))
            .unwrap_or(col);
        if a[pivot * n + col].norm() == 0.0 {
            return Err(Error::Degenerate(format!("singular system at column {col}")));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let inv = a[col * n + col].inv();
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            if factor.norm_sqr() == 0.0 {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= factor * v;
            }
            let v = b[col];
            b[row] -= factor * v;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Least-squares solution of an overdetermined system given by its columns,
/// via the normal equations `A^H A x = A^H y`.
///
/// A relative ridge of `1e-12 * trace / n` keeps rank-deficient columns
/// (e.g. all-zero early frames) solvable without visibly biasing the fit.
pub fn lstsq_columns(columns: &[Vec<Complex64>], y: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = columns.len();
    if n == 0 {
        return Err(Error::Shape("lstsq: no columns".into()));
    }
    if columns.iter().any(|c| c.len() != y.len()) {
        return Err(Error::Shape("lstsq: column length differs from target".into()));
    }
    let mut gram = vec![Complex64::new(0.0, 0.0); n * n];
    let mut rhs = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        for j in i..n {
            let dot: Complex64 = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(a, b)| a.conj() * b)
                .sum();
            gram[i * n + j] = dot;
            gram[j * n + i] = dot.conj();
        }
        rhs[i] = columns[i].iter().zip(y).map(|(a, b)| a.conj() * b).sum();
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i].re).sum();
    if trace == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); n]);
    }
    let ridge = 1e-12 * trace / n as f64;
    for i in 0..n {
        gram[i * n + i] += ridge;
    }
    solve(gram, rhs, n)
}
