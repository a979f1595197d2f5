use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// `G_ij = exp(-γ (t_i - t_j)^2)`.
pub fn time_decay_kernel(times: &[f64], gamma: f64) -> Result<DenseMatrix> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "time-decay factor must be positive, got {gamma}"
        )));
    }
    let n = times.len();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        let d = times[i] - times[j];
        (-gamma * d * d).exp()
    }))
}

/// `D^{-1/2} M D^{-1/2}` with `D = diag(M)`; the diagonal is set to exactly 1.
pub fn normalize_to_correlation(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {:?}",
            m.shape()
        )));
    }
    let d = m.diagonal();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "diagonal entry {i} is not positive ({})",
            d[i]
        )));
    }
    let s: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
    let n = m.rows();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] / (s[i] * s[j])
        }
    }))
}
