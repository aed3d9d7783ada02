//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter levels tried, relative to the mean diagonal, before giving up.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factorization with diagonal jitter escalation from 1e-10 to 1e-6
/// (relative to the mean diagonal). Returns the factor and the jitter used.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Err(Error::Conditioning("empty matrix".into()));
    }
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                a[(i, i)] += jitter;
            }
        }
        if let Some(ch) = a.cholesky() {
            return Ok((ch, jitter));
        }
    }
    Err(Error::Conditioning(format!(
        "{n}x{n} matrix not positive definite after jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1] * scale
    )))
}

/// `log det` from a Cholesky factor.
pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// `sum_ij a_ij b_ij`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Scale row `i` of `m` by `w[i]`.
pub fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

/// Scale column `j` of `m` by `w[j]`.
pub fn scale_cols(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= w[j];
    }
    out
}
