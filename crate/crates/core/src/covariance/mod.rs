//! Structured models of the `n x n` cross-observation covariance `C`.
//!
//! Every structure exposes the same three quantities the likelihood needs:
//! `log det C`, entries of `A = C^{-1}`, and the quadratic trace form
//! `tr(U^T A U)`. None of them builds a dense `C` unless asked to.

mod io;
mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{gemm, logit, sigmoid, sym_eig, DenseMatrix, SYMMETRY_TOL};

pub use io::{read_block_ids, read_relationship_matrix, write_matrix_binary, write_matrix_csv};
pub use kernels::{normalize_to_correlation, time_decay_kernel};

/// Upper bound on equicorrelation parameters under the raw parametrization.
pub const RHO_MAX: f64 = 0.995;

/// Absolute slack below zero tolerated on relationship-matrix eigenvalues,
/// scaled by the spectral radius when that exceeds one.
pub const PSD_TOL: f64 = 1e-8;

/// Largest size accepted by [`FullCholesky`].
pub const FULL_CHOLESKY_MAX_N: usize = 500;

/// `C = I_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityCov {
    pub n: usize,
}

/// Spectral pair `G = Q diag(Λ) Q^T` with eigenvalues clipped at zero.
#[derive(Debug)]
pub struct SpectralPair {
    pub q: DenseMatrix,
    pub eigenvalues: Vec<f64>,
}

/// `C = λ I + (1 - λ) G` for a fixed relationship matrix `G`.
///
/// The spectral pair is computed once and shared by every copy, so
/// changing λ never triggers another decomposition.
#[derive(Clone, Debug)]
pub struct FixedMixture {
    spectral: Arc<SpectralPair>,
    lambda: f64,
}

/// Builds `G = Σ_r G_r` and its spectral pair.
pub fn build_fixed_mixture(parts: &[DenseMatrix], lambda_raw: f64) -> Result<FixedMixture> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidParameter("no relationship matrices given".into()))?;
    let mut g = first.clone();
    for p in &parts[1..] {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "relationship parts of shapes {:?} and {:?}",
                g.shape(),
                p.shape()
            )));
        }
        g.axpy(1.0, p);
    }
    FixedMixture::from_relationship(&g, sigmoid(lambda_raw))
}

impl FixedMixture {
    pub fn from_relationship(g: &DenseMatrix, lambda: f64) -> Result<Self> {
        g.check_symmetric(SYMMETRY_TOL)?;
        let eig = sym_eig(g)?;
        let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let min = eig.values.first().copied().unwrap_or(0.0);
        if min < -PSD_TOL * scale {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
            });
        }
        let eigenvalues = eig.values.into_iter().map(|v| v.max(0.0)).collect();
        Self::from_spectral(
            Arc::new(SpectralPair {
                q: eig.vectors,
                eigenvalues,
            }),
            lambda,
        )
    }

    pub fn from_spectral(spectral: Arc<SpectralPair>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { spectral, lambda })
    }

    /// Same `G`, new λ; shares the cached decomposition.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::from_spectral(self.spectral.clone(), lambda)
    }

    pub fn with_lambda_raw(&self, lambda_raw: f64) -> Result<Self> {
        self.with_lambda(sigmoid(lambda_raw))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lambda_raw(&self) -> f64 {
        logit(self.lambda)
    }

    pub fn spectral(&self) -> &Arc<SpectralPair> {
        &self.spectral
    }

    pub fn size(&self) -> usize {
        self.spectral.eigenvalues.len()
    }

    fn is_identity(&self) -> bool {
        self.lambda == 1.0
    }

    /// Eigenvalues of `C`: `λ + (1 - λ) Λ_i`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let l = self.lambda;
        self.spectral
            .eigenvalues
            .iter()
            .map(|&e| l + (1.0 - l) * e)
            .collect()
    }

    fn checked_eigenvalues(&self) -> Result<Vec<f64>> {
        let d = self.eigenvalues();
        if let Some(bad) = d.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "covariance eigenvalue {bad} is not positive (lambda = {})",
                self.lambda
            )));
        }
        Ok(d)
    }

    /// `Q^T U`.
    pub fn rotate(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        check_rows(u, self.size())?;
        self.spectral.q.t_matmul(u)
    }

    /// `Q V`, undoing [`FixedMixture::rotate`].
    pub fn unrotate(&self, v: &DenseMatrix) -> Result<DenseMatrix> {
        check_rows(v, self.size())?;
        self.spectral.q.matmul(v)
    }

    /// Dense `A = Q diag(1/d) Q^T`; O(n^3).
    pub fn dense_inverse(&self) -> Result<DenseMatrix> {
        let n = self.size();
        if self.is_identity() {
            return Ok(DenseMatrix::identity(n));
        }
        let d = self.checked_eigenvalues()?;
        let q = &self.spectral.q;
        let mut scaled = q.clone();
        for i in 0..n {
            for (v, di) in scaled.row_mut(i).iter_mut().zip(&d) {
                *v /= di;
            }
        }
        let mut a = DenseMatrix::zeros(n, n);
        gemm(&mut a, false, &scaled, true, q, 1.0, false);
        Ok(a)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

fn check_rows(u: &DenseMatrix, n: usize) -> Result<()> {
    if u.rows() != n {
        return Err(Error::Shape(format!(
            "latent matrix has {} rows, covariance is {n}x{n}",
            u.rows()
        )));
    }
    Ok(())
}

/// Block-diagonal `C` with equicorrelated blocks: unit diagonal and
/// constant off-diagonal `ρ_i` inside block `i`, zero across blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EquiBlocks {
    block_of: Vec<usize>,
    sizes: Vec<usize>,
    rho: Vec<f64>,
}

/// `(1 + (m-2)ρ) / ((1-ρ)(1+(m-1)ρ))`
pub fn equi_inverse_diagonal(m: usize, rho: f64) -> f64 {
    let m = m as f64;
    (1.0 + (m - 2.0) * rho) / ((1.0 - rho) * (1.0 + (m - 1.0) * rho))
}

/// `-ρ / ((1-ρ)(1+(m-1)ρ))`
pub fn equi_inverse_offdiagonal(m: usize, rho: f64) -> f64 {
    let m = m as f64;
    -rho / ((1.0 - rho) * (1.0 + (m - 1.0) * rho))
}

/// `log((1 + (m-1)ρ)(1-ρ)^(m-1))`
pub fn equi_log_det(m: usize, rho: f64) -> f64 {
    let m = m as f64;
    (1.0 + (m - 1.0) * rho).ln() + (m - 1.0) * (1.0 - rho).ln()
}

/// Derivatives in ρ of the closed forms above: `(d diag, d offdiag, d logdet)`.
pub fn equi_derivatives(m: usize, rho: f64) -> (f64, f64, f64) {
    let mf = m as f64;
    let den = (1.0 - rho) * (1.0 + (mf - 1.0) * rho);
    let dden = (mf - 2.0) - 2.0 * (mf - 1.0) * rho;
    let num_diag = 1.0 + (mf - 2.0) * rho;
    let d_diag = ((mf - 2.0) * den - num_diag * dden) / (den * den);
    let d_off = (-den + rho * dden) / (den * den);
    let d_logdet = (mf - 1.0) / (1.0 + (mf - 1.0) * rho) - (mf - 1.0) / (1.0 - rho);
    (d_diag, d_off, d_logdet)
}

impl EquiBlocks {
    /// `block_ids[i]` is the block of observation `i`; ids must cover
    /// `0..N` with every block non-empty.
    pub fn new(block_ids: &[usize], rho: Vec<f64>) -> Result<Self> {
        let nblocks = block_ids.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; nblocks];
        for &b in block_ids {
            sizes[b] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidParameter(format!(
                "block ids must be contiguous; block {empty} is empty"
            )));
        }
        if rho.len() != nblocks {
            return Err(Error::Shape(format!(
                "{} correlation parameters for {nblocks} blocks",
                rho.len()
            )));
        }
        if let Some(bad) = rho.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidParameter(format!(
                "equicorrelation must lie in [0, 1), got {bad}"
            )));
        }
        Ok(Self {
            block_of: block_ids.to_vec(),
            sizes,
            rho,
        })
    }

    /// Shares one ρ across all blocks.
    pub fn uniform(block_ids: &[usize], rho: f64) -> Result<Self> {
        let nblocks = block_ids.iter().max().map_or(0, |m| m + 1);
        Self::new(block_ids, vec![rho; nblocks])
    }

    /// `ρ_i = RHO_MAX * sigmoid(raw_i)`.
    pub fn from_raw(block_ids: &[usize], raw: &[f64]) -> Result<Self> {
        Self::new(block_ids, raw.iter().map(|&r| rho_from_raw(r)).collect())
    }

    pub fn set_raw(&mut self, raw: &[f64]) {
        debug_assert_eq!(raw.len(), self.rho.len());
        for (r, &w) in self.rho.iter_mut().zip(raw) {
            *r = rho_from_raw(w);
        }
    }

    pub fn raw(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| rho_to_raw(r)).collect()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self) -> usize {
        self.block_of.len()
    }

    pub fn log_det(&self) -> f64 {
        self.sizes
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| equi_log_det(m, r))
            .sum()
    }

    /// `A[B, B]` from the closed forms; indices must be in range.
    pub fn inverse_block(&self, indices: &[usize]) -> DenseMatrix {
        let b = indices.len();
        DenseMatrix::from_fn(b, b, |x, y| {
            self.inverse_entry_unchecked(indices[x], indices[y])
        })
    }

    pub fn inverse_entry_unchecked(&self, i: usize, j: usize) -> f64 {
        let b = self.block_of[i];
        if i == j {
            equi_inverse_diagonal(self.sizes[b], self.rho[b])
        } else if b == self.block_of[j] {
            equi_inverse_offdiagonal(self.sizes[b], self.rho[b])
        } else {
            0.0
        }
    }
}

pub fn rho_from_raw(raw: f64) -> f64 {
    RHO_MAX * sigmoid(raw)
}

pub fn rho_to_raw(rho: f64) -> f64 {
    logit(rho / RHO_MAX)
}

/// `dρ/draw` under `ρ = RHO_MAX * sigmoid(raw)`.
pub fn rho_raw_derivative(rho: f64) -> f64 {
    rho * (1.0 - rho / RHO_MAX)
}

/// `C = L^{-1} L^{-T}` parametrized by the lower-triangular `L` with
/// positive diagonal, so that `A = C^{-1} = L^T L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullCholesky {
    l: DenseMatrix,
}

impl FullCholesky {
    pub fn new(l: DenseMatrix) -> Result<Self> {
        let n = l.rows();
        if !l.is_square() {
            return Err(Error::Shape("Cholesky parameter must be square".into()));
        }
        if n > FULL_CHOLESKY_MAX_N {
            return Err(Error::InvalidParameter(format!(
                "full Cholesky covariance supports n <= {FULL_CHOLESKY_MAX_N}, got {n}"
            )));
        }
        for i in 0..n {
            if !(l[(i, i)] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "Cholesky diagonal entry {i} is not positive"
                )));
            }
            if l.row(i)[i + 1..].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidParameter(
                    "Cholesky parameter must be lower triangular".into(),
                ));
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn size(&self) -> usize {
        self.l.rows()
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    fn inverse_entry_unchecked(&self, i: usize, j: usize) -> f64 {
        let n = self.size();
        (i.max(j)..n).map(|k| self.l[(k, i)] * self.l[(k, j)]).sum()
    }
}

#[derive(Clone, Debug)]
pub enum CovarianceModel {
    Identity(IdentityCov),
    FixedMixture(FixedMixture),
    EquiBlocks(EquiBlocks),
    FullCholesky(FullCholesky),
}

impl From<IdentityCov> for CovarianceModel {
    fn from(c: IdentityCov) -> Self {
        Self::Identity(c)
    }
}

impl From<FixedMixture> for CovarianceModel {
    fn from(c: FixedMixture) -> Self {
        Self::FixedMixture(c)
    }
}

impl From<EquiBlocks> for CovarianceModel {
    fn from(c: EquiBlocks) -> Self {
        Self::EquiBlocks(c)
    }
}

impl From<FullCholesky> for CovarianceModel {
    fn from(c: FullCholesky) -> Self {
        Self::FullCholesky(c)
    }
}

impl CovarianceModel {
    pub fn identity(n: usize) -> Self {
        Self::Identity(IdentityCov { n })
    }

    pub fn size(&self) -> usize {
        match self {
            Self::Identity(c) => c.n,
            Self::FixedMixture(c) => c.size(),
            Self::EquiBlocks(c) => c.size(),
            Self::FullCholesky(c) => c.size(),
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        match self {
            Self::Identity(_) => Ok(0.0),
            Self::FixedMixture(c) => Ok(c.checked_eigenvalues()?.iter().map(|d| d.ln()).sum()),
            Self::EquiBlocks(c) => Ok(c.log_det()),
            Self::FullCholesky(c) => Ok(c.log_det()),
        }
    }

    /// `(C^{-1})_{ij}`.
    pub fn inverse_entry(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.size();
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange { i, j, n });
        }
        Ok(match self {
            Self::Identity(_) => delta(i, j),
            Self::FixedMixture(c) => {
                if c.is_identity() {
                    delta(i, j)
                } else {
                    let d = c.checked_eigenvalues()?;
                    let q = &c.spectral.q;
                    let (qi, qj) = (q.row(i), q.row(j));
                    (0..n).map(|k| qi[k] * qj[k] / d[k]).sum()
                }
            }
            Self::EquiBlocks(c) => c.inverse_entry_unchecked(i, j),
            Self::FullCholesky(c) => c.inverse_entry_unchecked(i, j),
        })
    }

    /// The principal submatrix `A[B, B]` for batch members `B`.
    pub fn inverse_block(&self, indices: &[usize]) -> Result<DenseMatrix> {
        let n = self.size();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { i: bad, j: bad, n });
        }
        let b = indices.len();
        Ok(match self {
            Self::Identity(_) => DenseMatrix::identity(b),
            Self::FixedMixture(c) if c.is_identity() => DenseMatrix::identity(b),
            Self::FixedMixture(c) => {
                let d = c.checked_eigenvalues()?;
                let qb = c.spectral.q.select_rows(indices);
                let mut scaled = qb.clone();
                for i in 0..b {
                    for (v, di) in scaled.row_mut(i).iter_mut().zip(&d) {
                        *v /= di;
                    }
                }
                let mut a = DenseMatrix::zeros(b, b);
                gemm(&mut a, false, &scaled, true, &qb, 1.0, false);
                a
            }
            Self::EquiBlocks(c) => c.inverse_block(indices),
            Self::FullCholesky(c) => DenseMatrix::from_fn(b, b, |x, y| {
                c.inverse_entry_unchecked(indices[x], indices[y])
            }),
        })
    }

    /// Exact `tr(U^T C^{-1} U)`.
    pub fn trace_term(&self, u: &DenseMatrix) -> Result<f64> {
        check_rows(u, self.size())?;
        let sq = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>();
        match self {
            Self::Identity(_) => Ok(u.as_slice().iter().map(|v| v * v).sum()),
            Self::FixedMixture(c) if c.is_identity() => {
                Ok(u.as_slice().iter().map(|v| v * v).sum())
            }
            Self::FixedMixture(c) => {
                let d = c.checked_eigenvalues()?;
                let rotated = c.rotate(u)?;
                Ok((0..rotated.rows()).map(|i| sq(rotated.row(i)) / d[i]).sum())
            }
            Self::EquiBlocks(c) => {
                let p = u.cols();
                let nb = c.num_blocks();
                let mut sums = vec![0.0; nb * p];
                let mut sq_norms = vec![0.0; nb];
                for i in 0..u.rows() {
                    let b = c.block_of[i];
                    let row = u.row(i);
                    for (s, v) in sums[b * p..(b + 1) * p].iter_mut().zip(row) {
                        *s += v;
                    }
                    sq_norms[b] += sq(row);
                }
                let mut total = 0.0;
                for b in 0..nb {
                    let m = c.sizes[b];
                    let diag = equi_inverse_diagonal(m, c.rho[b]);
                    let off = equi_inverse_offdiagonal(m, c.rho[b]);
                    let sum_sq = sq(&sums[b * p..(b + 1) * p]);
                    total += diag * sq_norms[b] + off * (sum_sq - sq_norms[b]);
                }
                Ok(total)
            }
            Self::FullCholesky(c) => {
                let lu = c.l.matmul(u)?;
                Ok(lu.as_slice().iter().map(|v| v * v).sum())
            }
        }
    }

    /// Dense `C`, for small problems and test oracles.
    pub fn dense_covariance(&self) -> Result<DenseMatrix> {
        let n = self.size();
        Ok(match self {
            Self::Identity(_) => DenseMatrix::identity(n),
            Self::FixedMixture(c) => {
                let d = c.eigenvalues();
                let q = &c.spectral.q;
                let mut scaled = q.clone();
                for i in 0..n {
                    for (v, di) in scaled.row_mut(i).iter_mut().zip(&d) {
                        *v *= di;
                    }
                }
                scaled.matmul_t(q)?
            }
            Self::EquiBlocks(c) => DenseMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else if c.block_of[i] == c.block_of[j] {
                    c.rho[c.block_of[i]]
                } else {
                    0.0
                }
            }),
            Self::FullCholesky(c) => {
                let linv = lower_triangular_inverse(&c.l);
                linv.matmul_t(&linv)?
            }
        })
    }
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

fn lower_triangular_inverse(l: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = 1.0 / l[(j, j)];
        for i in (j + 1)..n {
            let s: f64 = (j..i).map(|k| l[(i, k)] * inv[(k, j)]).sum();
            inv[(i, j)] = -s / l[(i, i)];
        }
    }
    inv
}
