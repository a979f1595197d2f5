use std::path::{Path, PathBuf};

use depflow_core::data::{
    ingest_stock_csv, make_synthetic, read_price_csv, sample_block_structure,
    sample_equicorrelated_gaussian, sample_mixture_latents, sample_triangular_relationship,
    shape_transform, DependencyKind, StockPair, TrueParams,
};
use depflow_core::{DenseMatrix, RngState, ShapeName, SyntheticSpec};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

/// Kolmogorov-Smirnov distance to the standard normal.
fn ks_statistic(values: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic two-sided 1% critical value.
fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Every `stride`-th entry, for 10^4 draws out of a larger pool.
fn subsample(m: &DenseMatrix, count: usize) -> Vec<f64> {
    let s = m.as_slice();
    let stride = (s.len() / count).max(1);
    s.iter().step_by(stride).take(count).copied().collect()
}

#[test]
fn equicorrelated_marginals_are_standard_normal() {
    for rho in [0.0, 0.3, 0.9] {
        let mut rng = RngState::new(17);
        let sizes = vec![5; 4000];
        let u = sample_equicorrelated_gaussian(&sizes, &vec![rho; 4000], 2, &mut rng).unwrap();
        // One entry per block keeps the subsample independent.
        let first: Vec<f64> = (0..4000).flat_map(|b| u.row(5 * b).to_vec()).collect();
        let d = ks_statistic(&first[..8000]);
        assert!(d <= ks_critical_1pct(8000), "rho {rho}: {d}");
    }
    let mut rng = RngState::new(18);
    let iid = sample_equicorrelated_gaussian(&[10_000], &[0.0], 1, &mut rng).unwrap();
    assert!(ks_statistic(iid.as_slice()) <= 0.02);
}

#[test]
fn mixture_marginals_are_standard_normal() {
    let mut rng = RngState::new(4);
    let g = sample_triangular_relationship(200, &mut rng);
    let first: Vec<f64> = (0..3000)
        .map(|_| sample_mixture_latents(&g, 0.3, 1, &mut rng).unwrap()[(0, 0)])
        .collect();
    assert!(ks_statistic(&first) <= ks_critical_1pct(3000));
    let u = sample_mixture_latents(&g, 1.0, 50, &mut rng).unwrap();
    let d = ks_statistic(&subsample(&u, 10_000));
    assert!(d <= ks_critical_1pct(10_000), "{d}");
}

#[test]
fn within_block_correlation_matches_rho() {
    let mut rng = RngState::new(5);
    let rho = [0.1, 0.5, 0.85];
    let sizes = [100, 150, 120];
    let p = 2000;
    let u = sample_equicorrelated_gaussian(&sizes, &rho, p, &mut rng).unwrap();
    let mut start = 0;
    for (&m, &r) in sizes.iter().zip(&rho) {
        let mut acc = 0.0;
        let mut count = 0.0;
        for j in 0..p {
            let col: Vec<f64> = (start..start + m).map(|i| u[(i, j)]).collect();
            let s: f64 = col.iter().sum();
            let sq: f64 = col.iter().map(|v| v * v).sum();
            acc += (s * s - sq) / (m * (m - 1)) as f64;
            count += 1.0;
        }
        let est = acc / count;
        assert!((est - r).abs() <= 0.05, "rho {r}: estimate {est}");
        start += m;
    }
}

#[test]
fn pareto_blocks_are_heavy_tailed() {
    let mut total = 0usize;
    for seed in 0..100 {
        let sizes = sample_block_structure(10_000, 0.5, 1000, &mut RngState::new(seed)).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 10_000);
        total += sizes.iter().max().unwrap();
    }
    assert!(total / 100 >= 100);
    assert_eq!(
        sample_block_structure(1, 0.5, 1000, &mut RngState::new(0)).unwrap(),
        vec![1]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_transform_is_deterministic(seed in any::<u64>(), k in 0usize..5) {
        let name = ShapeName::ALL[k];
        let u = RngState::new(seed).standard_normal_matrix(50, 2);
        let a = shape_transform(name, &u).unwrap();
        let b = shape_transform(name, &u).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..50 {
            prop_assert_eq!(a[(i, 0)], u[(i, 0)]);
            let want = name.mean(u[(i, 0)]) + name.scale() * u[(i, 1)];
            prop_assert!((a[(i, 1)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_synthetic_data(seed in 0u64..1000, fixed in any::<bool>()) {
        let dep = if fixed { DependencyKind::Fixedcov } else { DependencyKind::Equiblocks };
        let mut spec = SyntheticSpec::new(ShapeName::Abs, 80, dep, seed);
        spec.n_val = 20;
        spec.n_test = 20;
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        spec.seed += 1;
        prop_assert_ne!(a.train.x, make_synthetic(&spec).unwrap().train.x);
    }
}

#[test]
fn shape_anchor_points() {
    let x = shape_transform(ShapeName::Abs, &DenseMatrix::zeros(1, 2)).unwrap();
    assert_eq!(x.row(0), &[0.0, -1.0]);
    let x = shape_transform(
        ShapeName::Crescent,
        &DenseMatrix::from_rows(&[[2.0, 0.0]]).unwrap(),
    )
    .unwrap();
    assert_eq!(x.row(0), &[2.0, 1.0]);
    let x = shape_transform(
        ShapeName::Sign,
        &DenseMatrix::from_rows(&[[1.0, 1.0]]).unwrap(),
    )
    .unwrap();
    assert!((x[(0, 1)] - (2.0 + (-1.5f64).exp())).abs() < 1e-15);
}

#[test]
fn zero_interval_gives_independent_training_rows() {
    let mut spec = SyntheticSpec::new(ShapeName::Crescent, 3000, DependencyKind::Equiblocks, 2);
    spec.rho_interval = [0.0, 0.0];
    spec.n_val = 10;
    spec.n_test = 10;
    let d = make_synthetic(&spec).unwrap();
    match d.train.true_params {
        Some(TrueParams::Rho { values }) => assert!(values.iter().all(|&r| r == 0.0)),
        other => panic!("unexpected {other:?}"),
    }
    let first = d.train.x.column(0);
    assert!(ks_statistic(&first) <= ks_critical_1pct(first.len()));
}

fn write_prices(dir: &Path, ticker: &str, start: u32, closes: &[f64]) -> PathBuf {
    let base = chrono::NaiveDate::from_ymd_opt(2012, 1, 2).unwrap();
    let mut s = String::from("Date,Close\n");
    for (k, c) in closes.iter().enumerate() {
        let d = base + chrono::Days::new((start as usize + k) as u64);
        s.push_str(&format!("{},{c}\n", d.format("%Y-%m-%d")));
    }
    let p = dir.join(format!("{ticker}.csv"));
    std::fs::write(&p, s).unwrap();
    p
}

#[test]
fn stock_returns_are_recomputed_from_closes_without_look_ahead() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngState::new(6);
    let mut walk = |n: usize| {
        let mut v = vec![50.0];
        for _ in 1..n {
            let last = *v.last().unwrap();
            v.push(last * (0.01 * rng.standard_normal()).exp());
        }
        v
    };
    let a = write_prices(dir.path(), "AAA", 0, &walk(401));
    let b = write_prices(dir.path(), "BBB", 0, &walk(401));
    let c = write_prices(dir.path(), "CCC", 3, &walk(398));
    let d = write_prices(dir.path(), "DDD", 0, &walk(401));
    let data = ingest_stock_csv(&[
        StockPair {
            a: a.clone(),
            b: b.clone(),
        },
        StockPair { a: c, b: d },
    ])
    .unwrap();
    assert_eq!(data.skipped, 3);
    let n = data.train.n() + data.val.n() + data.test.n();
    assert_eq!(n, 400 + 397);
    for (part, want) in [(&data.train, 0.70), (&data.val, 0.15), (&data.test, 0.15)] {
        assert!((part.n() as f64 / n as f64 - want).abs() <= 0.01);
    }
    let dates = |ds: &depflow_core::Dataset| ds.dates.clone().unwrap();
    assert!(dates(&data.train).last() < dates(&data.val).first());
    assert!(dates(&data.val).last() < dates(&data.test).first());

    let pa = read_price_csv(&a).unwrap();
    let pb = read_price_csv(&b).unwrap();
    let train_dates = dates(&data.train);
    let ids = data.train.block_ids.clone().unwrap();
    let mut checked = 0;
    for (i, ds) in train_dates.iter().enumerate() {
        if ids[i] != 0 {
            continue;
        }
        let day = chrono::NaiveDate::parse_from_str(ds, "%Y-%m-%d").unwrap();
        let prev = day.pred_opt().unwrap();
        let ra = (pa.closes[&day] / pa.closes[&prev]).ln();
        let rb = (pb.closes[&day] / pb.closes[&prev]).ln();
        assert_eq!(data.train.x.row(i), &[ra, rb]);
        checked += 1;
    }
    assert!(checked > 200);
}

#[test]
fn constant_prices_give_zero_returns() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_prices(dir.path(), "A", 0, &[10.0; 60]);
    let b = write_prices(dir.path(), "B", 0, &[3.0; 60]);
    let data = ingest_stock_csv(&[StockPair { a, b }]).unwrap();
    assert!(data.train.x.as_slice().iter().all(|&v| v == 0.0));
}
