use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use depflow_bench::{equi_blocks, flow, latents, mixture};
use depflow_core::likelihood::{estimator_weights, minibatch_loss_on_tape, trace_estimate};
use depflow_core::numerics::Tape;
use depflow_core::training::lambda_objective;
use depflow_core::{CovarianceModel, RngState};

fn trace_terms(c: &mut Criterion) {
    let mut g = c.benchmark_group("trace_term");
    let equi: CovarianceModel = equi_blocks(10_000, 1).into();
    let u = latents(10_000, 2, 2);
    g.bench_function("equiblocks_n10000", |b| {
        b.iter(|| equi.trace_term(black_box(&u)).unwrap())
    });
    for n in [200, 800] {
        let m: CovarianceModel = mixture(n, 0.4, 3).into();
        let u = latents(n, 2, 4);
        g.bench_with_input(BenchmarkId::new("mixture", n), &n, |b, _| {
            b.iter(|| m.trace_term(black_box(&u)).unwrap())
        });
    }
    g.finish();
}

fn batch_estimator(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_estimator");
    let n = 800;
    let m: CovarianceModel = mixture(n, 0.4, 5).into();
    let equi: CovarianceModel = equi_blocks(n, 6).into();
    let u = latents(n, 2, 7);
    for bsize in [64, 256] {
        let mut idx: Vec<usize> = (0..n).collect();
        RngState::new(8).shuffle(&mut idx);
        idx.truncate(bsize);
        let ub = u.select_rows(&idx);
        for (name, cov) in [("mixture", &m), ("equiblocks", &equi)] {
            g.bench_with_input(BenchmarkId::new(name, bsize), &bsize, |b, _| {
                b.iter(|| {
                    let a = cov.inverse_block(black_box(&idx)).unwrap();
                    trace_estimate(&ub, &a, n).unwrap()
                })
            });
        }
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_gradient");
    let f = flow(4, 32, 9);
    let equi: CovarianceModel = equi_blocks(10_000, 10).into();
    let x = latents(10_000, 2, 11);
    for bsize in [256, 1024] {
        let idx: Vec<usize> = (0..bsize).collect();
        let xb = x.select_rows(&idx);
        let a = equi.inverse_block(&idx).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(bsize), &bsize, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = f.register(&mut tape);
                let w = estimator_weights(&a, 10_000).unwrap();
                let nodes =
                    minibatch_loss_on_tape(&mut tape, &f, &params, &xb, w, false, 10_000, 0.0);
                tape.backward(nodes.loss).unwrap()
            })
        });
    }
    g.finish();
}

fn lambda_stage_objective(c: &mut Criterion) {
    let n = 5000;
    let mut rng = RngState::new(12);
    let eig: Vec<f64> = (0..n).map(|_| 5.0 * rng.uniform()).collect();
    let row_sq: Vec<f64> = (0..n).map(|_| 2.0 * rng.uniform()).collect();
    c.bench_function("lambda_objective_n5000", |b| {
        b.iter(|| lambda_objective(black_box(0.4), &eig, &row_sq, 2))
    });
}

criterion_group!(
    benches,
    trace_terms,
    batch_estimator,
    training_step,
    lambda_stage_objective
);
criterion_main!(benches);
