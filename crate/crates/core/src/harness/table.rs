use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{mean_and_se, paired_t_test_one_sided};
use crate::training::{ScheduleKind, TrainResult};

/// One (dataset, schedule, seed) outcome. `error` is set for failed cells,
/// whose metrics are then empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub dataset: String,
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub test_nll: Option<f64>,
    pub best_val_nll: Option<f64>,
    pub grid_value: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub rho_mae: Option<f64>,
    pub lambda_abs_err: Option<f64>,
    pub error: Option<String>,
}

impl CellRecord {
    /// Metrics of a finished run; `true_rho`/`true_lambda` enable recovery
    /// errors.
    pub fn from_result(
        dataset: &str,
        r: &TrainResult,
        true_rho: Option<&[f64]>,
        true_lambda: Option<f64>,
    ) -> Self {
        Self {
            dataset: dataset.to_string(),
            schedule: r.schedule,
            seed: r.seed,
            test_nll: Some(r.test_nll),
            best_val_nll: Some(r.best_val_nll),
            grid_value: r.grid_value,
            lambda_hat: r.lambda_hat,
            rho_mae: true_rho.map(|t| r.rho_mae(t)),
            lambda_abs_err: true_lambda.map(|t| (r.lambda_hat.unwrap_or(1.0) - t).abs()),
            error: None,
        }
    }

    pub fn failed(dataset: &str, schedule: ScheduleKind, seed: u64, error: String) -> Self {
        Self {
            dataset: dataset.to_string(),
            schedule,
            seed,
            test_nll: None,
            best_val_nll: None,
            grid_value: None,
            lambda_hat: None,
            rho_mae: None,
            lambda_abs_err: None,
            error: Some(error),
        }
    }
}

/// Aggregate over the configured seeds of one (dataset, schedule).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub schedule: ScheduleKind,
    pub n_ok: usize,
    /// Configured seeds without a usable test NLL.
    pub missing_seeds: Vec<u64>,
    pub mean_test_nll: f64,
    pub se_test_nll: f64,
    pub mean_rho_mae: Option<f64>,
    pub mean_lambda_abs_err: Option<f64>,
    /// One-sided paired test that this schedule's test NLL is below the
    /// baseline's, over seeds present for both.
    pub p_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellRecord>,
    pub summary: Vec<SummaryRow>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl ResultTable {
    /// Aggregates `cells` over exactly `seeds`; datasets keep their first
    /// appearance order and schedules their declaration order.
    pub fn build(seeds: &[u64], cells: Vec<CellRecord>) -> Self {
        let mut datasets: Vec<String> = Vec::new();
        for c in &cells {
            if !datasets.contains(&c.dataset) {
                datasets.push(c.dataset.clone());
            }
        }
        let mut by_key: BTreeMap<(usize, ScheduleKind), BTreeMap<u64, &CellRecord>> =
            BTreeMap::new();
        for c in &cells {
            let d = datasets
                .iter()
                .position(|x| *x == c.dataset)
                .expect("listed");
            by_key.entry((d, c.schedule)).or_default().insert(c.seed, c);
        }
        let nll_by_seed = |d: usize, s: ScheduleKind| -> BTreeMap<u64, f64> {
            by_key
                .get(&(d, s))
                .map(|m| {
                    m.iter()
                        .filter(|(seed, _)| seeds.contains(seed))
                        .filter_map(|(&seed, c)| c.test_nll.map(|v| (seed, v)))
                        .collect()
                })
                .unwrap_or_default()
        };
        let mut summary = Vec::new();
        for (&(d, schedule), per_seed) in &by_key {
            let nll = nll_by_seed(d, schedule);
            let present: Vec<f64> = seeds.iter().filter_map(|s| nll.get(s).copied()).collect();
            let (mean, se) = mean_and_se(&present);
            let ok_cells: Vec<&CellRecord> = seeds
                .iter()
                .filter_map(|s| per_seed.get(s).copied())
                .filter(|c| c.test_nll.is_some())
                .collect();
            let p_vs_baseline = if schedule == ScheduleKind::Baseline {
                None
            } else {
                let base = nll_by_seed(d, ScheduleKind::Baseline);
                let (a, b): (Vec<f64>, Vec<f64>) = seeds
                    .iter()
                    .filter_map(|s| Some((*nll.get(s)?, *base.get(s)?)))
                    .unzip();
                paired_t_test_one_sided(&a, &b).ok()
            };
            summary.push(SummaryRow {
                dataset: datasets[d].clone(),
                schedule,
                n_ok: present.len(),
                missing_seeds: seeds
                    .iter()
                    .filter(|s| !nll.contains_key(s))
                    .copied()
                    .collect(),
                mean_test_nll: mean,
                se_test_nll: se,
                mean_rho_mae: mean_of(ok_cells.iter().filter_map(|c| c.rho_mae)),
                mean_lambda_abs_err: mean_of(ok_cells.iter().filter_map(|c| c.lambda_abs_err)),
                p_vs_baseline,
            });
        }
        Self {
            seeds: seeds.to_vec(),
            cells,
            summary,
        }
    }

    pub fn row(&self, dataset: &str, schedule: ScheduleKind) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.dataset == dataset && r.schedule == schedule)
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "dataset,schedule,seed,test_nll,best_val_nll,grid_value,lambda_hat,rho_mae,lambda_abs_err,error\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                csv_field(&c.dataset),
                c.schedule,
                c.seed,
                opt(c.test_nll),
                opt(c.best_val_nll),
                opt(c.grid_value),
                opt(c.lambda_hat),
                opt(c.rho_mae),
                opt(c.lambda_abs_err),
                csv_field(c.error.as_deref().unwrap_or(""))
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "dataset,schedule,n_ok,missing_seeds,mean_test_nll,se_test_nll,mean_rho_mae,mean_lambda_abs_err,p_vs_baseline\n",
        );
        for r in &self.summary {
            let missing: Vec<String> = r.missing_seeds.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.dataset),
                r.schedule,
                r.n_ok,
                missing.join(" "),
                r.mean_test_nll,
                r.se_test_nll,
                opt(r.mean_rho_mae),
                opt(r.mean_lambda_abs_err),
                opt(r.p_vs_baseline)
            );
        }
        s
    }

    /// Datasets as rows, schedules as columns: `mean ± se`, the paired
    /// p-value against the baseline, and a missing-seed count when any.
    pub fn markdown(&self) -> String {
        let mut schedules: Vec<ScheduleKind> = self.summary.iter().map(|r| r.schedule).collect();
        schedules.sort();
        schedules.dedup();
        let mut datasets: Vec<&str> = Vec::new();
        for r in &self.summary {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        let mut s = String::from("| dataset |");
        for k in &schedules {
            let _ = write!(s, " {k} |");
        }
        s.push_str("\n|---|");
        for _ in &schedules {
            s.push_str("---|");
        }
        s.push('\n');
        for d in datasets {
            let _ = write!(s, "| {d} |");
            for &k in &schedules {
                match self.row(d, k) {
                    Some(r) if r.n_ok > 0 => {
                        let _ = write!(s, " {:.4} ± {:.4}", r.mean_test_nll, r.se_test_nll);
                        if let Some(p) = r.p_vs_baseline {
                            let _ = write!(s, " (p={p:.3})");
                        }
                        if !r.missing_seeds.is_empty() {
                            let _ = write!(s, " [{} missing]", r.missing_seeds.len());
                        }
                        s.push_str(" |");
                    }
                    Some(r) => {
                        let _ = write!(s, " failed [{} missing] |", r.missing_seeds.len());
                    }
                    None => s.push_str(" |"),
                }
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "\nTest i.i.d. NLL, mean ± standard error over seeds {:?}; p from a one-sided paired t-test against the baseline.",
            self.seeds
        );
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
