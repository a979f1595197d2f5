use std::fs;
use std::path::Path;

use depflow_core::harness::{
    paired_t_test_one_sided, run_experiment, CellRecord, ExperimentConfig, ResultTable, RunOptions,
};
use depflow_core::training::ScheduleKind;
use depflow_core::Error;
use proptest::prelude::*;

const TINY: &str = r#"{
  "schema_version": 1,
  "kind": "synthetic-equiblocks",
  "shapes": ["Crescent"],
  "synthetic": {"n_total": 160, "n_val": 80, "n_test": 80},
  "schedules": ["baseline", "grid", "joint"],
  "train": {
    "arch": {"layers": 2, "hidden": [8], "s_max": 5.0},
    "batch_size": 64,
    "epochs": 2,
    "rho_grid": [0.0, 0.5]
  },
  "seeds": [0, 1]
}"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_json(TINY).unwrap()
}

fn opts(jobs: usize) -> RunOptions {
    RunOptions {
        fast: false,
        jobs,
        force: false,
    }
}

const TABLE_FILES: [&str; 4] = ["results.csv", "summary.csv", "results.md", "failures.json"];

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

fn cell(schedule: ScheduleKind, seed: u64, nll: f64) -> CellRecord {
    CellRecord {
        dataset: "d".into(),
        schedule,
        seed,
        test_nll: Some(nll),
        best_val_nll: Some(nll),
        grid_value: None,
        lambda_hat: None,
        rho_mae: None,
        lambda_abs_err: None,
        error: None,
    }
}

proptest! {
    #[test]
    fn p_values_are_probabilities_and_shift_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 2..12),
        noise in prop::collection::vec(-1.0f64..1.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let p = paired_t_test_one_sided(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let a2: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + shift).collect();
        let p2 = paired_t_test_one_sided(&a2, &b2).unwrap();
        prop_assert!((p - p2).abs() <= 1e-6, "{} vs {}", p, p2);
    }

    #[test]
    fn summary_rows_average_the_cells(nll in prop::collection::vec(0.0f64..4.0, 3)) {
        let seeds = [0, 1, 2];
        let mut cells: Vec<CellRecord> = seeds.iter().map(|&s| cell(ScheduleKind::Baseline, s, nll[s as usize])).collect();
        cells.extend(seeds.iter().map(|&s| cell(ScheduleKind::Grid, s, nll[s as usize] - 0.1)));
        let t = ResultTable::build(&seeds, cells);
        let base = t.row("d", ScheduleKind::Baseline).unwrap();
        let mean = nll.iter().sum::<f64>() / 3.0;
        prop_assert!((base.mean_test_nll - mean).abs() < 1e-12);
        let var = nll.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
        prop_assert!((base.se_test_nll - (var / 3.0).sqrt()).abs() < 1e-12);
        let grid = t.row("d", ScheduleKind::Grid).unwrap();
        prop_assert!((grid.mean_test_nll - (mean - 0.1)).abs() < 1e-12);
        prop_assert_eq!(grid.p_vs_baseline, Some(0.0));
    }
}

#[test]
fn missing_seeds_are_reported_and_excluded() {
    let mut cells = vec![
        cell(ScheduleKind::Baseline, 0, 1.0),
        cell(ScheduleKind::Baseline, 1, 2.0),
        cell(ScheduleKind::Baseline, 2, 3.0),
    ];
    cells.push(CellRecord::failed(
        "d",
        ScheduleKind::Grid,
        0,
        "boom".into(),
    ));
    cells.push(cell(ScheduleKind::Grid, 1, 1.5));
    cells.push(cell(ScheduleKind::Grid, 2, 2.0));
    let t = ResultTable::build(&[0, 1, 2], cells);
    let g = t.row("d", ScheduleKind::Grid).unwrap();
    assert_eq!(g.n_ok, 2);
    assert_eq!(g.missing_seeds, vec![0]);
    assert!((g.mean_test_nll - 1.75).abs() < 1e-12);
    assert!(g.p_vs_baseline.is_some());
}

#[test]
fn runs_are_byte_reproducible_across_thread_counts() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_experiment(&cfg, a.path(), &opts(1)).unwrap();
    let sb = run_experiment(&cfg, b.path(), &opts(2)).unwrap();
    assert!(sa.failures.is_empty());
    assert_eq!(sa.table, sb.table);
    for f in TABLE_FILES {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("cells"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in &names {
        let p = Path::new("cells").join(n);
        assert_eq!(
            read(a.path(), p.to_str().unwrap()),
            read(b.path(), p.to_str().unwrap())
        );
    }
    assert!(a.path().join("plots/Crescent__grid.svg").exists());
    assert_eq!(sa.table.summary.len(), 3);
}

#[test]
fn a_different_run_is_refused_unless_forced_and_resume_is_identical() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path(), &opts(1)).unwrap();
    let before: Vec<Vec<u8>> = TABLE_FILES.iter().map(|f| read(dir.path(), f)).collect();

    fs::remove_file(dir.path().join("cells/Crescent__joint__seed1.json")).unwrap();
    run_experiment(&cfg, dir.path(), &opts(1)).unwrap();
    let after: Vec<Vec<u8>> = TABLE_FILES.iter().map(|f| read(dir.path(), f)).collect();
    assert_eq!(before, after);

    let mut other = cfg.clone();
    other.seeds = vec![0, 2];
    match run_experiment(&other, dir.path(), &opts(1)) {
        Err(Error::OutputExists(_)) => {}
        r => panic!("expected refusal, got {:?}", r.map(|s| s.out_dir)),
    }
    assert_eq!(read(dir.path(), "results.csv"), before[0]);
    let mut forced = opts(1);
    forced.force = true;
    let s = run_experiment(&other, dir.path(), &forced).unwrap();
    assert!(s.table.cells.iter().all(|c| c.seed != 1));
    assert!(!dir
        .path()
        .join("cells/Crescent__joint__seed1.json")
        .exists());
}

#[test]
fn invalid_configs_fail_fast() {
    let bad_key = TINY.replace("\"seeds\"", "\"seedz\"");
    assert!(ExperimentConfig::from_json(&bad_key).is_err());
    let bad_version = TINY.replace("\"schema_version\": 1", "\"schema_version\": 9");
    assert!(ExperimentConfig::from_json(&bad_version).is_err());
    let alternating = TINY.replace("\"joint\"", "\"alternating\"");
    assert!(ExperimentConfig::from_json(&alternating).is_err());
}
