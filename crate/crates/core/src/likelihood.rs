//! Joint log-likelihood of dependent observations and its mini-batch surrogate.
//!
//! Rows of the latent matrix `U = t^{-1}(X)` are modelled jointly as a
//! matrix normal with row covariance `C` and column covariance `I_p`. The
//! trace term `tr(U^T C^{-1} U)` couples all rows; on a batch `B` it is
//! replaced by the unbiased estimator
//!
//! ```text
//! (n/b) Σ_{i∈B} A_ii |u_i|^2 + 2 n(n-1)/(b(b-1)) Σ_{i<j∈B} A_ij u_i·u_j
//! ```
//!
//! which we evaluate as `Σ_ij W_ij u_i·u_j` with `W = A[B,B]` reweighted.

use std::f64::consts::PI;

use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{DenseMatrix, RngState, Tape, Var};

/// `U` with rows `u_i = t^{-1}(x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    u: DenseMatrix,
}

impl LatentMatrix {
    pub fn new(u: DenseMatrix) -> Self {
        Self { u }
    }

    /// Inverts the flow on every row, returning the inverse-pass log-dets too.
    pub fn from_flow(flow: &FlowModel, x: &DenseMatrix) -> Result<(Self, Vec<f64>)> {
        let (u, ld) = flow.inverse(x)?;
        Ok((Self { u }, ld))
    }

    pub fn n(&self) -> usize {
        self.u.rows()
    }

    pub fn p(&self) -> usize {
        self.u.cols()
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.u
    }
}

/// Distinct batch members drawn from `0..n`, at least two of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSelection {
    indices: Vec<usize>,
    n: usize,
}

impl BatchSelection {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::BatchTooSmall(indices.len()));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { i, j: i, n });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidParameter(format!(
                    "batch index {i} appears twice"
                )));
            }
        }
        Ok(Self { indices, n })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn population(&self) -> usize {
        self.n
    }

    /// The inclusion indicator `ξ ∈ {0,1}^n`.
    pub fn indicator(&self) -> Vec<bool> {
        let mut xi = vec![false; self.n];
        for &i in &self.indices {
            xi[i] = true;
        }
        xi
    }
}

/// Shuffles `0..n` and cuts it into chunks of `batch_size`; a trailing
/// chunk with fewer than two members is dropped.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<BatchSelection>> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| BatchSelection::new(c.to_vec(), n))
        .collect()
}

fn half_log_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Log-likelihood of `X` with rows coupled through `C`.
pub fn joint_log_likelihood(
    flow: &FlowModel,
    cov: &CovarianceModel,
    x: &DenseMatrix,
) -> Result<f64> {
    if cov.size() != x.rows() {
        return Err(Error::Shape(format!(
            "{} observations, covariance of size {}",
            x.rows(),
            cov.size()
        )));
    }
    let (u, ld_inv) = LatentMatrix::from_flow(flow, x)?;
    let (n, p) = (u.n() as f64, u.p() as f64);
    let log_det = cov.log_det()?;
    let trace = cov.trace_term(u.as_matrix())?;
    Ok(ld_inv.iter().sum::<f64>() - n * p * half_log_2pi() - 0.5 * p * log_det - 0.5 * trace)
}

/// Reweights `A[B,B]` into the estimator matrix `W`: diagonal by `n/b`,
/// off-diagonal by `n(n-1)/(b(b-1))`.
pub fn estimator_weights(a_block: &DenseMatrix, n: usize) -> Result<DenseMatrix> {
    let b = a_block.rows();
    if !a_block.is_square() {
        return Err(Error::Shape("batch inverse block must be square".into()));
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if b > n {
        return Err(Error::InvalidParameter(format!(
            "batch of {b} from {n} observations"
        )));
    }
    let (nf, bf) = (n as f64, b as f64);
    let diag = nf / bf;
    let off = nf * (nf - 1.0) / (bf * (bf - 1.0));
    Ok(DenseMatrix::from_fn(b, b, |i, j| {
        a_block[(i, j)] * if i == j { diag } else { off }
    }))
}

/// Unbiased estimate of `tr(U^T A U)` from the batch rows `u_batch` and
/// the matching block `A[B,B]`.
pub fn trace_estimate(u_batch: &DenseMatrix, a_block: &DenseMatrix, n: usize) -> Result<f64> {
    if a_block.rows() != u_batch.rows() {
        return Err(Error::Shape(format!(
            "{} batch rows, inverse block of size {}",
            u_batch.rows(),
            a_block.rows()
        )));
    }
    let w = estimator_weights(a_block, n)?;
    let wu = w.matmul(u_batch)?;
    Ok(u_batch
        .as_slice()
        .iter()
        .zip(wu.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Per-batch constant `(p/2) log 2π + (p/(2n)) log det C`.
pub fn loss_offset(p: usize, n: usize, log_det: f64) -> f64 {
    p as f64 * half_log_2pi() + 0.5 * p as f64 * log_det / n as f64
}

/// Nodes of a mini-batch loss recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss: Var,
    pub latent: Var,
    pub weights: Var,
}

/// Records the mini-batch loss
/// `(1/n)[(n/b) Σ_B log|det J_t(u_i)| + (np/2) log 2π + (p/2) log det C + ½ Σ W_ij u_i·u_j]`.
///
/// `weights` is `W` from [`estimator_weights`]; it becomes a
/// gradient-receiving leaf when `weights_require_grad` is set.
pub fn minibatch_loss_on_tape(
    tape: &mut Tape,
    flow: &FlowModel,
    params: &[Var],
    x_batch: &DenseMatrix,
    weights: DenseMatrix,
    weights_require_grad: bool,
    n: usize,
    log_det: f64,
) -> LossNodes {
    let b = x_batch.rows();
    let x = tape.constant(x_batch.clone());
    let (u, ld_inv) = flow.inverse_on_tape(tape, params, x);
    let w = if weights_require_grad {
        tape.param("estimator_weights", weights)
    } else {
        tape.constant(weights)
    };
    let ld_sum = tape.sum(ld_inv);
    let jac = tape.scale(ld_sum, -1.0 / b as f64);
    let wu = tape.matmul(w, u);
    let quad = tape.mul(u, wu);
    let quad = tape.sum(quad);
    let quad = tape.scale(quad, 0.5 / n as f64);
    let total = tape.add(jac, quad);
    let loss = tape.affine(total, 1.0, loss_offset(flow.dim, n, log_det));
    LossNodes {
        loss,
        latent: u,
        weights: w,
    }
}

/// Value of the mini-batch loss for a fixed flow and covariance.
pub fn minibatch_loss(
    flow: &FlowModel,
    cov: &CovarianceModel,
    batch: &BatchSelection,
    x: &DenseMatrix,
) -> Result<f64> {
    let n = x.rows();
    if cov.size() != n || batch.population() != n {
        return Err(Error::Shape(format!(
            "{n} observations, covariance of size {}, batch over {}",
            cov.size(),
            batch.population()
        )));
    }
    let a = cov.inverse_block(batch.indices())?;
    let w = estimator_weights(&a, n)?;
    let log_det = cov.log_det()?;
    let mut tape = Tape::new();
    let params = flow.register_frozen(&mut tape);
    let nodes = minibatch_loss_on_tape(
        &mut tape,
        flow,
        &params,
        &x.select_rows(batch.indices()),
        w,
        false,
        n,
        log_det,
    );
    Ok(tape.value(nodes.loss).item().expect("scalar loss"))
}

/// Mean negative i.i.d. log-density over the rows of `x`.
pub fn iid_nll(flow: &FlowModel, x: &DenseMatrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidParameter("empty evaluation set".into()));
    }
    let lp = flow.log_prob_iid(x)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}
