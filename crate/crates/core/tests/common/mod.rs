//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

use depflow_core::{DenseMatrix, RngState};
use nalgebra::DMatrix;

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `B B^T / n + shift I` for a Gaussian `B`.
pub fn random_spd(n: usize, shift: f64, rng: &mut RngState) -> DenseMatrix {
    let b = to_na(&rng.standard_normal_matrix(n, n));
    let m = &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * shift;
    from_na(&m)
}

pub fn oracle_inverse(m: &DenseMatrix) -> DenseMatrix {
    from_na(&to_na(m).try_inverse().expect("invertible"))
}

pub fn oracle_log_det(m: &DenseMatrix) -> f64 {
    to_na(m).lu().determinant().ln()
}

/// `tr(U^T A U)` by explicit products.
pub fn oracle_trace(u: &DenseMatrix, a: &DenseMatrix) -> f64 {
    let u = to_na(u);
    (u.transpose() * to_na(a) * &u).trace()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Relative error with an absolute floor for values near zero.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// A flow whose parameters are all `scale * N(0, 1)`, so no layer is the identity.
pub fn random_flow(dim: usize, seed: u64, scale: f64) -> depflow_core::FlowModel {
    let arch = depflow_core::FlowArch {
        layers: 4,
        hidden: vec![8, 8],
        s_max: 5.0,
    };
    let mut rng = RngState::new(seed);
    let mut flow = depflow_core::FlowModel::new(dim, &arch, &mut rng).unwrap();
    for p in flow.params_mut() {
        for v in p.as_mut_slice() {
            *v = scale * rng.standard_normal();
        }
    }
    flow
}
