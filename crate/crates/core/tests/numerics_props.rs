mod common;

use common::{random_spd, to_na};
use depflow_core::numerics::{cholesky, sym_eig};
use depflow_core::{DenseMatrix, RngState};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cholesky_multiplies_back(n in 1usize..=50, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let m = random_spd(n, 0.1, &mut rng);
        let l = cholesky(&m).unwrap();
        let back = l.matmul_t(&l).unwrap();
        let err = back.sub(&m).unwrap().max_abs();
        prop_assert!(err <= 1e-10 * m.max_abs());
        for i in 0..n {
            for j in i + 1..n {
                prop_assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn eigendecomposition_reconstructs(n in 1usize..=200, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let b = rng.standard_normal_matrix(n, n);
        let m = b.add(&b.transpose()).unwrap().scale(0.5);
        let eig = sym_eig(&m).unwrap();
        let q = to_na(&eig.vectors);
        let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.values.clone()));
        let scale = m.max_abs().max(1.0);
        let recon = (&q * d * q.transpose() - to_na(&m)).amax();
        prop_assert!(recon <= 1e-8 * scale, "reconstruction {recon}");
        let orth = (q.transpose() * &q - nalgebra::DMatrix::identity(n, n)).amax();
        prop_assert!(orth <= 1e-8, "orthogonality {orth}");
        prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), stream in 0u64..8) {
        let draw = || {
            let mut r = RngState::with_stream(seed, stream);
            let a = r.standard_normal_vec(5);
            let b = r.uniform();
            let c = r.pareto2(0.5).unwrap();
            let mut idx: Vec<usize> = (0..20).collect();
            r.shuffle(&mut idx);
            (a, b, c, idx)
        };
        let (a1, b1, c1, i1) = draw();
        let (a2, b2, c2, i2) = draw();
        prop_assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(b1.to_bits(), b2.to_bits());
        prop_assert_eq!(c1.to_bits(), c2.to_bits());
        prop_assert_eq!(i1, i2);
    }
}

#[test]
fn distinct_streams_differ() {
    let a = RngState::with_stream(3, 1).standard_normal_vec(4);
    let b = RngState::with_stream(3, 2).standard_normal_vec(4);
    assert_ne!(a, b);
}

#[test]
fn products_agree_with_oracle() {
    let mut rng = RngState::new(5);
    let a = rng.standard_normal_matrix(7, 4);
    let b = rng.standard_normal_matrix(4, 9);
    let got = to_na(&a.matmul(&b).unwrap());
    let want = to_na(&a) * to_na(&b);
    assert!((got - want).amax() < 1e-13);
    assert!(DenseMatrix::identity(3).matmul(&a).is_err());
}
