//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`RngState`], a ChaCha8
//! generator keyed by a 64-bit seed and a stream id. The same `(seed,
//! stream, call sequence)` always reproduces the same bits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Stream ids used to decorrelate the purposes a single seed is used for.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const PARAMS: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn algorithm(&self) -> &'static str {
        "chacha8"
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn standard_normal_matrix(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::new(rows, cols, self.standard_normal_vec(rows * cols))
            .expect("length matches shape")
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    /// Uniform on `[lo, hi)`; returns `lo` when the interval is degenerate.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * self.uniform()
        }
    }

    /// One draw of `1 + Lomax(alpha)`, i.e. Pareto II with minimum 1.
    pub fn pareto2(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Pareto shape must be positive, got {alpha}"
            )));
        }
        Ok(pareto2_from_uniform(self.uniform_open(), alpha))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// Inverse CDF of Pareto II with minimum 1: `1 + (u^(-1/alpha) - 1)`.
pub fn pareto2_from_uniform(u: f64, alpha: f64) -> f64 {
    1.0 + (u.powf(-1.0 / alpha) - 1.0)
}
