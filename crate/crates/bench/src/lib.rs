//! Seeded fixtures shared by the benchmarks.

use depflow_core::covariance::{normalize_to_correlation, EquiBlocks, FixedMixture};
use depflow_core::data::{block_ids_from_sizes, sample_block_structure};
use depflow_core::{DenseMatrix, FlowArch, FlowModel, RngState};

/// A random correlation matrix of size `n`.
pub fn correlation(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = RngState::new(seed);
    let b = rng.standard_normal_matrix(n, n);
    let m = b.matmul_t(&b).expect("square");
    let sym = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    normalize_to_correlation(&sym).expect("positive diagonal")
}

pub fn mixture(n: usize, lambda: f64, seed: u64) -> FixedMixture {
    FixedMixture::from_relationship(&correlation(n, seed), lambda).expect("psd")
}

/// Pareto-sized equicorrelated blocks over `n` rows with ρ = 0.5.
pub fn equi_blocks(n: usize, seed: u64) -> EquiBlocks {
    let mut rng = RngState::new(seed);
    let sizes = sample_block_structure(n, 0.5, 1000, &mut rng).expect("valid");
    EquiBlocks::uniform(&block_ids_from_sizes(&sizes), 0.5).expect("valid")
}

pub fn latents(n: usize, p: usize, seed: u64) -> DenseMatrix {
    RngState::new(seed).standard_normal_matrix(n, p)
}

pub fn flow(layers: usize, width: usize, seed: u64) -> FlowModel {
    let arch = FlowArch {
        layers,
        hidden: vec![width, width],
        s_max: 5.0,
    };
    let mut rng = RngState::new(seed);
    let mut f = FlowModel::new(2, &arch, &mut rng).expect("valid arch");
    for p in f.params_mut() {
        for v in p.as_mut_slice() {
            *v = 0.1 * rng.standard_normal();
        }
    }
    f
}
