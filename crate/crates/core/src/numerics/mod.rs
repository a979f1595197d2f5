//! Dense linear algebra, seeded sampling and reverse-mode differentiation.

mod matrix;
mod rng;
mod tape;

pub(crate) use matrix::gemm;
pub use matrix::{cholesky, eigendecomposition_count, sym_eig, DenseMatrix, SymEig, SYMMETRY_TOL};
pub use rng::{pareto2_from_uniform, streams, RngState};
pub use tape::{sigmoid, Gradients, Tape, Var};

/// `log(p / (1 - p))`, the inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
