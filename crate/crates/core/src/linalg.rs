//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor, retrying with growing diagonal jitter for PSD matrices
/// that are singular to working precision.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let scale = m.diagonal().abs().max().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * scale;
    while jitter <= 1e-4 * scale {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric("Cholesky factorization failed after jitter".into()))
}

/// `log |A|` from a Cholesky factor of `A`.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
