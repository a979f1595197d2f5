mod common;

use common::random_flow;
use depflow_core::data::{make_synthetic, DependencyKind};
use depflow_core::harness::{density_on_grid, DensityGrid};
use depflow_core::likelihood::{estimator_weights, iid_nll, minibatch_loss_on_tape};
use depflow_core::numerics::Tape;
use depflow_core::training::{train_baseline, TrainData};
use depflow_core::{DenseMatrix, FlowArch, RngState, ShapeName, SyntheticSpec, TrainConfig};
use proptest::prelude::*;

fn arch() -> FlowArch {
    FlowArch {
        layers: 4,
        hidden: vec![8, 8],
        s_max: 5.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn inverse_undoes_forward(seed in any::<u64>(), dim in 2usize..=5) {
        let flow = random_flow(dim, seed, 0.4);
        let u = RngState::new(seed ^ 1).standard_normal_matrix(1000, dim);
        let (x, ld_f) = flow.forward(&u).unwrap();
        let (back, ld_i) = flow.inverse(&x).unwrap();
        prop_assert!(back.sub(&u).unwrap().max_abs() <= 1e-6);
        for (a, b) in ld_f.iter().zip(&ld_i) {
            prop_assert!((a + b).abs() <= 1e-8);
        }
    }

    #[test]
    fn log_det_matches_finite_difference_jacobian(seed in any::<u64>()) {
        let flow = random_flow(2, seed, 0.4);
        let u = RngState::new(seed ^ 7).standard_normal_matrix(100, 2);
        let (_, ld) = flow.forward(&u).unwrap();
        let h = 1e-6;
        for i in 0..u.rows() {
            let mut jac = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut up = DenseMatrix::from_rows(&[u.row(i)]).unwrap();
                let mut dn = up.clone();
                up[(0, c)] += h;
                dn[(0, c)] -= h;
                let xu = flow.forward(&up).unwrap().0;
                let xd = flow.forward(&dn).unwrap().0;
                for r in 0..2 {
                    jac[r][c] = (xu[(0, r)] - xd[(0, r)]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            prop_assert!((ld[i] - det.abs().ln()).abs() <= 1e-4, "row {}: {} vs {}", i, ld[i], det.abs().ln());
        }
    }
}

#[test]
fn nll_gradient_matches_finite_differences_for_every_parameter() {
    let flow = random_flow(2, 3, 0.3);
    let x = RngState::new(4).standard_normal_matrix(12, 2);
    let n = x.rows();
    let mut tape = Tape::new();
    let params = flow.register(&mut tape);
    let w = estimator_weights(&DenseMatrix::identity(n), n).unwrap();
    let nodes = minibatch_loss_on_tape(&mut tape, &flow, &params, &x, w, false, n, 0.0);
    let value = tape.value(nodes.loss).item().unwrap();
    assert!((value - iid_nll(&flow, &x).unwrap()).abs() < 1e-12);
    let grads = tape.backward(nodes.loss).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (k, &var) in params.iter().enumerate() {
        let g = grads.get(var);
        for e in 0..g.as_slice().len() {
            let bump = |d: f64| {
                let mut f = flow.clone();
                f.params_mut()[k].as_mut_slice()[e] += d;
                iid_nll(&f, &x).unwrap()
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = g.as_slice()[e];
            assert!(
                (an - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {k} entry {e}: {an} vs {fd}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, flow.num_scalars());
}

#[test]
fn trained_density_integrates_to_one() {
    let mut spec = SyntheticSpec::new(ShapeName::Crescent, 2000, DependencyKind::Equiblocks, 0);
    spec.n_val = 500;
    spec.n_test = 500;
    let d = make_synthetic(&spec).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.arch = arch();
    cfg.epochs = 5;
    cfg.lr = 0.003;
    let r = train_baseline(&cfg, TrainData::new(&d.train, &d.val, &d.test)).unwrap();
    let grid = DensityGrid {
        resolution: 400,
        lo: -12.0,
        hi: 12.0,
    };
    let dens = density_on_grid(r.flow.as_ref().unwrap(), &grid).unwrap();
    let mass = dens.sum() * grid.cell() * grid.cell();
    assert!((0.98..=1.02).contains(&mass), "mass {mass}");
}
