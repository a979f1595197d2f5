//! Datasets: dependent synthetic draws, i.i.d. evaluation sets and
//! stock-pair log returns.

mod sampling;
mod shapes;
mod stock;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::covariance::{read_relationship_matrix, write_matrix_binary};
use crate::error::{Error, Result};
use crate::numerics::{streams, DenseMatrix, RngState};

pub use sampling::{
    block_ids_from_sizes, mixture_covariance, sample_block_structure,
    sample_equicorrelated_gaussian, sample_fixed_cov_gaussian, sample_mixture_latents,
    sample_triangular_relationship,
};
pub use shapes::{shape_transform, ShapeName};
pub use stock::{
    ingest_stock_csv, pair_returns, read_price_csv, PriceSeries, StockData, StockPair,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependencyKind {
    Equiblocks,
    Fixedcov,
}

/// Parameters that generated a dependent training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrueParams {
    Rho { values: Vec<f64> },
    Lambda { value: f64 },
}

fn default_rho_interval() -> [f64; 2] {
    [0.5, 0.99]
}
fn default_alpha() -> f64 {
    0.5
}
fn default_cap() -> usize {
    1000
}
fn default_n_val() -> usize {
    2000
}
fn default_n_test() -> usize {
    10_000
}

/// Recipe for one synthetic experiment.
///
/// `rho_interval = [lo, hi]` is sampled half-open, so `hi = 1` is allowed.
/// With `lambda` unset the fixed-covariance mixing weight is drawn
/// uniformly from `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: ShapeName,
    pub n_total: usize,
    pub dependency: DependencyKind,
    #[serde(default = "default_rho_interval")]
    pub rho_interval: [f64; 2],
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_alpha")]
    pub pareto_alpha: f64,
    #[serde(default = "default_cap")]
    pub block_cap: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(shape: ShapeName, n_total: usize, dependency: DependencyKind, seed: u64) -> Self {
        Self {
            shape,
            n_total,
            dependency,
            rho_interval: default_rho_interval(),
            lambda: None,
            pareto_alpha: default_alpha(),
            block_cap: default_cap(),
            n_val: default_n_val(),
            n_test: default_n_test(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.rho_interval;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "rho interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
            ));
        }
        if lo >= 1.0 {
            return bad("rho interval lower end must be below 1".into());
        }
        if !(self.pareto_alpha > 0.0) {
            return bad(format!(
                "Pareto shape must be positive, got {}",
                self.pareto_alpha
            ));
        }
        if self.n_total == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("sample sizes must be positive".into());
        }
        if self.block_cap == 0 {
            return bad("block-size cap must be positive".into());
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("lambda must lie in [0, 1], got {l}"));
            }
        }
        if self.dependency == DependencyKind::Fixedcov && self.n_total < 2 {
            return bad("fixed-covariance data needs n_total >= 2".into());
        }
        Ok(())
    }
}

/// Observations plus whatever side information describes their dependence.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub block_ids: Option<Vec<usize>>,
    pub g: Option<Arc<DenseMatrix>>,
    pub true_params: Option<TrueParams>,
    pub split: Split,
    pub dates: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g_path: Option<String>,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_params: Option<TrueParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dates: Option<Vec<String>>,
}

impl Dataset {
    pub fn iid(x: DenseMatrix, split: Split) -> Self {
        Self {
            x,
            block_ids: None,
            g: None,
            true_params: None,
            split,
            dates: None,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if let Some(ids) = &self.block_ids {
            if ids.len() != n {
                return Err(Error::Shape(format!(
                    "{} block ids for {n} rows",
                    ids.len()
                )));
            }
            let nb = ids.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![false; nb];
            for &b in ids {
                seen[b] = true;
            }
            if let Some(b) = seen.iter().position(|s| !s) {
                return Err(Error::InvalidParameter(format!(
                    "block ids must be contiguous; block {b} is empty"
                )));
            }
        }
        if let Some(g) = &self.g {
            if g.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "relationship matrix {:?} for {n} rows",
                    g.shape()
                )));
            }
            if g.diagonal().iter().any(|&d| (d - 1.0).abs() > 1e-12) {
                return Err(Error::InvalidParameter(
                    "relationship matrix must have unit diagonal".into(),
                ));
            }
        }
        if let Some(d) = &self.dates {
            if d.len() != n {
                return Err(Error::Shape(format!("{} dates for {n} rows", d.len())));
            }
        }
        Ok(())
    }

    /// The true ρ of every row's block, when known.
    pub fn row_rho(&self) -> Option<Vec<f64>> {
        match (&self.true_params, &self.block_ids) {
            (Some(TrueParams::Rho { values }), Some(ids)) => {
                Some(ids.iter().map(|&b| values[b]).collect())
            }
            _ => None,
        }
    }

    /// Writes `path` as JSON; a relationship matrix goes to a binary
    /// sidecar `<stem>.g.bin` in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let g_path = match &self.g {
            Some(g) => {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("dataset");
                let name = format!("{stem}.g.bin");
                write_matrix_binary(g, &path.with_file_name(&name))?;
                Some(name)
            }
            None => None,
        };
        let file = DatasetFile {
            x: (0..self.n()).map(|i| self.x.row(i).to_vec()).collect(),
            block_ids: self.block_ids.clone(),
            g_path,
            split: self.split,
            true_params: self.true_params.clone(),
            dates: self.dates.clone(),
        };
        let s = serde_json::to_string(&file)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&s)?;
        let p = file.x.first().map_or(0, |r| r.len());
        let x = if file.x.is_empty() {
            DenseMatrix::zeros(0, 0)
        } else {
            DenseMatrix::from_rows(&file.x)?
        };
        debug_assert_eq!(x.cols(), p);
        let g = match file.g_path {
            Some(rel) => {
                let gp: PathBuf = path.parent().unwrap_or(Path::new(".")).join(rel);
                Some(Arc::new(read_relationship_matrix(&gp)?))
            }
            None => None,
        };
        let ds = Self {
            x,
            block_ids: file.block_ids,
            g,
            true_params: file.true_params,
            split: file.split,
            dates: file.dates,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// A dependent training set with i.i.d. validation and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Draws the training set with the requested dependence and fresh i.i.d.
/// validation/test sets through the same shape transform.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = RngState::with_stream(spec.seed, streams::DATA);
    let n = spec.n_total;
    let train = match spec.dependency {
        DependencyKind::Equiblocks => {
            let sizes = sample_block_structure(n, spec.pareto_alpha, spec.block_cap, &mut rng)?;
            let [lo, hi] = spec.rho_interval;
            let rho: Vec<f64> = sizes
                .iter()
                .map(|_| rng.uniform_range(lo, hi).min(1.0 - f64::EPSILON))
                .collect();
            let u = sample_equicorrelated_gaussian(&sizes, &rho, 2, &mut rng)?;
            Dataset {
                x: shape_transform(spec.shape, &u)?,
                block_ids: Some(block_ids_from_sizes(&sizes)),
                g: None,
                true_params: Some(TrueParams::Rho { values: rho }),
                split: Split::Train,
                dates: None,
            }
        }
        DependencyKind::Fixedcov => {
            let lambda = match spec.lambda {
                Some(l) => l,
                None => rng.uniform(),
            };
            let (g, u) = sample_fixed_cov_gaussian(n, lambda, 2, &mut rng)?;
            Dataset {
                x: shape_transform(spec.shape, &u)?,
                block_ids: None,
                g: Some(Arc::new(g)),
                true_params: Some(TrueParams::Lambda { value: lambda }),
                split: Split::Train,
                dates: None,
            }
        }
    };
    let mut eval = RngState::with_stream(spec.seed, streams::EVAL);
    let val = eval.standard_normal_matrix(spec.n_val, 2);
    let test = eval.standard_normal_matrix(spec.n_test, 2);
    Ok(SyntheticData {
        train,
        val: Dataset::iid(shape_transform(spec.shape, &val)?, Split::Val),
        test: Dataset::iid(shape_transform(spec.shape, &test)?, Split::Test),
    })
}
