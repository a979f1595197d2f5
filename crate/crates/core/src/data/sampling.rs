//! Dependent Gaussian latent samplers.

use crate::covariance::normalize_to_correlation;
use crate::error::{Error, Result};
use crate::numerics::{cholesky, gemm, DenseMatrix, RngState};

/// Pareto-II block sizes, rounded and clipped to `cap`, drawn until they
/// cover `n_total`; the last block is truncated so the sum is exact.
pub fn sample_block_structure(
    n_total: usize,
    alpha: f64,
    cap: usize,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    if n_total == 0 {
        return Err(Error::InvalidParameter("n_total must be positive".into()));
    }
    if cap == 0 {
        return Err(Error::InvalidParameter(
            "block-size cap must be positive".into(),
        ));
    }
    let mut sizes = Vec::new();
    let mut total = 0usize;
    while total < n_total {
        let draw = rng.pareto2(alpha)?.round().min(cap as f64).max(1.0) as usize;
        let size = draw.min(n_total - total);
        sizes.push(size);
        total += size;
    }
    Ok(sizes)
}

/// Block ids `0, 0, ..., 1, 1, ...` for contiguous blocks of the given sizes.
pub fn block_ids_from_sizes(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &m)| std::iter::repeat(b).take(m))
        .collect()
}

/// Rows of block `i` are `√ρ_i z_shared + √(1-ρ_i) z_own`, column by column.
pub fn sample_equicorrelated_gaussian(
    sizes: &[usize],
    rho: &[f64],
    p: usize,
    rng: &mut RngState,
) -> Result<DenseMatrix> {
    if sizes.len() != rho.len() {
        return Err(Error::Shape(format!(
            "{} blocks, {} correlation values",
            sizes.len(),
            rho.len()
        )));
    }
    if let Some(bad) = rho.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::InvalidParameter(format!(
            "equicorrelation must lie in [0, 1), got {bad}"
        )));
    }
    let n: usize = sizes.iter().sum();
    let mut u = DenseMatrix::zeros(n, p);
    let mut start = 0;
    for (&m, &r) in sizes.iter().zip(rho) {
        let (a, b) = (r.sqrt(), (1.0 - r).sqrt());
        for j in 0..p {
            let shared = rng.standard_normal();
            for i in start..start + m {
                u[(i, j)] = a * shared + b * rng.standard_normal();
            }
        }
        start += m;
    }
    Ok(u)
}

/// `norm(L L^T)` for unit-diagonal lower-triangular `L` with sub-diagonal
/// entries uniform on `[0.5, 0.99)`.
pub fn sample_triangular_relationship(n: usize, rng: &mut RngState) -> DenseMatrix {
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            l[(i, j)] = rng.uniform_range(0.5, 0.99);
        }
        l[(i, i)] = 1.0;
    }
    let mut m = DenseMatrix::zeros(n, n);
    gemm(&mut m, false, &l, true, &l, 1.0, false);
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    normalize_to_correlation(&m).expect("unit-diagonal factor gives a positive diagonal")
}

/// `λ I + (1-λ) G`.
pub fn mixture_covariance(g: &DenseMatrix, lambda: f64) -> DenseMatrix {
    let n = g.rows();
    DenseMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { lambda } else { 0.0 };
        id + (1.0 - lambda) * g[(i, j)]
    })
}

/// Draws a relationship matrix `G` and latents whose columns are
/// `N(0, λ I + (1-λ) G)` through the Cholesky factor of that covariance.
pub fn sample_fixed_cov_gaussian(
    n: usize,
    lambda: f64,
    p: usize,
    rng: &mut RngState,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let g = sample_triangular_relationship(n, rng);
    let u = sample_mixture_latents(&g, lambda, p, rng)?;
    Ok((g, u))
}

/// Columns of the result are independent `N(0, λ I + (1-λ) G)` draws.
pub fn sample_mixture_latents(
    g: &DenseMatrix,
    lambda: f64,
    p: usize,
    rng: &mut RngState,
) -> Result<DenseMatrix> {
    let n = g.rows();
    let z = rng.standard_normal_matrix(n, p);
    if lambda == 1.0 {
        return Ok(z);
    }
    let chol = cholesky(&mixture_covariance(g, lambda))?;
    chol.matmul(&z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sizes_sum_exactly() {
        let mut rng = RngState::new(0);
        assert_eq!(
            sample_block_structure(1, 0.5, 1000, &mut rng).unwrap(),
            vec![1]
        );
        for seed in 0..20 {
            let mut rng = RngState::new(seed);
            let s = sample_block_structure(997, 0.5, 100, &mut rng).unwrap();
            assert_eq!(s.iter().sum::<usize>(), 997);
            assert!(s.iter().all(|&m| (1..=100).contains(&m)));
        }
    }

    #[test]
    fn independence_limit_is_standard_normal() {
        let mut rng = RngState::new(1);
        let u = sample_equicorrelated_gaussian(&[5000, 5000], &[0.0, 0.0], 1, &mut rng).unwrap();
        let mean = u.sum() / 10_000.0;
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn perfect_correlation_limit() {
        let mut rng = RngState::new(2);
        let u = sample_equicorrelated_gaussian(&[3], &[1.0 - 1e-12], 2, &mut rng).unwrap();
        for j in 0..2 {
            for i in 1..3 {
                assert!((u[(i, j)] - u[(0, j)]).abs() <= 1e-5);
            }
        }
        assert!(sample_equicorrelated_gaussian(&[3], &[1.0], 2, &mut rng).is_err());
    }

    #[test]
    fn relationship_has_unit_diagonal() {
        let mut rng = RngState::new(3);
        let (g, u) = sample_fixed_cov_gaussian(30, 0.4, 2, &mut rng).unwrap();
        assert!(g.diagonal().iter().all(|&d| d == 1.0));
        assert!(g.check_symmetric(0.0).is_ok());
        assert_eq!(u.shape(), (30, 2));
    }

    #[test]
    fn unit_lambda_skips_the_factorization() {
        let g = DenseMatrix::filled(3, 3, 1.0);
        let a = sample_mixture_latents(&g, 1.0, 2, &mut RngState::new(4)).unwrap();
        let b = RngState::new(4).standard_normal_matrix(3, 2);
        assert_eq!(a, b);
    }
}
