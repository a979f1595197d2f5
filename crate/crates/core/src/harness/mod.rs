//! Experiment runner: JSON configs, seed sweeps, result tables, paired
//! significance tests and SVG plots.
//!
//! A run directory holds `manifest.json`, one `cells/*.json` record and
//! one `checkpoints/*.json` flow per (dataset, schedule, seed),
//! `failures.json`, the aggregated `results.csv`, `summary.csv` and
//! `results.md`, and SVG plots under `plots/`.

mod plot;
mod stats;
mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::covariance::FixedMixture;
use crate::data::{
    ingest_stock_csv, make_synthetic, Dataset, DependencyKind, ShapeName, StockPair, SyntheticSpec,
    TrueParams,
};
use crate::error::{Error, Result};
use crate::flow::{save_checkpoint, FlowModel};
use crate::numerics::DenseMatrix;
use crate::training::{
    config_hash, train_schedule, ScheduleKind, TrainConfig, TrainData, TrainResult,
};

pub use plot::{
    density_on_grid, density_svg, line_chart_svg, render_density_svg, DensityGrid, Series,
};
pub use stats::{
    ln_gamma, mean_and_se, paired_t_test_one_sided, regularized_incomplete_beta,
    student_t_upper_tail,
};
pub use table::{CellRecord, ResultTable, SummaryRow};

pub const SCHEMA_VERSION: u32 = 1;
/// Grid length under `--fast`.
pub const FAST_GRID_LEN: usize = 6;
/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DEPFLOW_OUT";
/// Training rows drawn over density plots.
const SCATTER_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SyntheticEquiblocks,
    SyntheticFixedcov,
    SensitivitySweep,
    StockPairs,
}

fn default_intervals() -> Vec<[f64; 2]> {
    vec![[0.0, 0.2], [0.2, 0.4], [0.4, 0.6], [0.6, 0.8], [0.8, 1.0]]
}

/// Data-generation settings shared by every shape and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTemplate {
    pub n_total: usize,
    pub rho_interval: [f64; 2],
    pub lambda: Option<f64>,
    pub pareto_alpha: f64,
    pub block_cap: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticTemplate {
    fn default() -> Self {
        let s = SyntheticSpec::new(ShapeName::Crescent, 10_000, DependencyKind::Equiblocks, 0);
        Self {
            n_total: s.n_total,
            rho_interval: s.rho_interval,
            lambda: s.lambda,
            pareto_alpha: s.pareto_alpha,
            block_cap: s.block_cap,
            n_val: s.n_val,
            n_test: s.n_test,
        }
    }
}

impl SyntheticTemplate {
    pub fn spec(&self, shape: ShapeName, dependency: DependencyKind, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            shape,
            n_total: self.n_total,
            dependency,
            rho_interval: self.rho_interval,
            lambda: self.lambda,
            pareto_alpha: self.pareto_alpha,
            block_cap: self.block_cap,
            n_val: self.n_val,
            n_test: self.n_test,
            seed,
        }
    }
}

/// One experiment: a dataset family, schedules and seeds.
///
/// `train.seed` is replaced by each cell's seed; `schedule_train` replaces
/// `train` for the schedules it names. Relative stock paths are resolved
/// against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub shapes: Vec<ShapeName>,
    #[serde(default)]
    pub synthetic: SyntheticTemplate,
    #[serde(default = "default_intervals")]
    pub sweep_intervals: Vec<[f64; 2]>,
    #[serde(default)]
    pub stock_pairs: Vec<StockPair>,
    pub schedules: Vec<ScheduleKind>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule_train: BTreeMap<ScheduleKind, TrainConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative stock paths.
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&s)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut cfg.stock_pairs {
            for f in [&mut p.a, &mut p.b] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.schedules.is_empty() {
            return bad("schedules must not be empty".into());
        }
        if self.schedules.iter().collect::<BTreeSet<_>>().len() != self.schedules.len() {
            return bad("schedules must be distinct".into());
        }
        let fixedcov = self.kind == ExperimentKind::SyntheticFixedcov;
        if self.schedules.contains(&ScheduleKind::Alternating) && !fixedcov {
            return bad("the alternating schedule needs a fixed-covariance experiment".into());
        }
        if self.schedules.contains(&ScheduleKind::Joint) && fixedcov {
            return bad("the joint schedule needs block ids".into());
        }
        match self.kind {
            ExperimentKind::StockPairs => {
                if self.stock_pairs.is_empty() {
                    return bad("stock-pairs experiments need stock_pairs".into());
                }
            }
            _ => {
                if self.shapes.is_empty() {
                    return bad("synthetic experiments need at least one shape".into());
                }
                let dep = self.dependency();
                for &shape in &self.shapes {
                    self.synthetic
                        .spec(shape, dep, 0)
                        .validate()
                        .map_err(|e| Error::Config(e.to_string()))?;
                }
            }
        }
        if self.kind == ExperimentKind::SensitivitySweep {
            if self.sweep_intervals.is_empty() {
                return bad("sensitivity sweeps need at least one interval".into());
            }
            for &[lo, hi] in &self.sweep_intervals {
                if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                    return bad(format!("sweep interval [{lo}, {hi}] is invalid"));
                }
            }
        }
        for k in &self.schedules {
            self.train_config(*k, self.seeds[0])
                .validate()
                .map_err(|e| Error::Config(format!("{k}: {e}")))?;
        }
        if let Some(k) = self
            .schedule_train
            .keys()
            .find(|k| !self.schedules.contains(k))
        {
            return bad(format!("schedule_train names {k}, which is not scheduled"));
        }
        Ok(())
    }

    fn dependency(&self) -> DependencyKind {
        match self.kind {
            ExperimentKind::SyntheticFixedcov => DependencyKind::Fixedcov,
            _ => DependencyKind::Equiblocks,
        }
    }

    /// Effective training settings of one cell.
    pub fn train_config(&self, schedule: ScheduleKind, seed: u64) -> TrainConfig {
        let mut cfg = self
            .schedule_train
            .get(&schedule)
            .unwrap_or(&self.train)
            .clone();
        cfg.seed = seed;
        cfg
    }

    /// Dataset labels in table order.
    pub fn dataset_labels(&self) -> Vec<String> {
        self.datasets().into_iter().map(|d| d.label()).collect()
    }

    fn datasets(&self) -> Vec<DatasetSource> {
        match self.kind {
            ExperimentKind::StockPairs => vec![DatasetSource::Stock],
            ExperimentKind::SensitivitySweep => self
                .shapes
                .iter()
                .flat_map(|&s| {
                    self.sweep_intervals
                        .iter()
                        .map(move |&iv| DatasetSource::Synthetic(s, Some(iv)))
                })
                .collect(),
            _ => self
                .shapes
                .iter()
                .map(|&s| DatasetSource::Synthetic(s, None))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum DatasetSource {
    Synthetic(ShapeName, Option<[f64; 2]>),
    Stock,
}

impl DatasetSource {
    fn label(&self) -> String {
        match self {
            DatasetSource::Synthetic(s, None) => s.to_string(),
            DatasetSource::Synthetic(s, Some([lo, hi])) => format!("{s}[{lo:.1},{hi:.1}]"),
            DatasetSource::Stock => "stocks".into(),
        }
    }
}

/// Evenly spaced subset of at most [`FAST_GRID_LEN`] values, keeping both
/// ends.
pub fn fast_grid(values: &[f64]) -> Vec<f64> {
    if values.len() <= FAST_GRID_LEN {
        return values.to_vec();
    }
    let last = (values.len() - 1) as f64;
    (0..FAST_GRID_LEN)
        .map(|i| values[(i as f64 * last / (FAST_GRID_LEN - 1) as f64).round() as usize])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub fast: bool,
    pub jobs: usize,
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            fast: false,
            jobs: 1,
            force: false,
        }
    }
}

/// Identity of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub fast: bool,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellFile {
    pub config_hash: String,
    pub record: CellRecord,
    pub result: Option<TrainResult>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub table: ResultTable,
    pub failures: Vec<CellRecord>,
}

/// Hash over everything that changes results: the config without its
/// output directory, plus the fast flag.
pub fn experiment_hash(cfg: &ExperimentConfig, fast: bool) -> Result<String> {
    let mut c = cfg.clone();
    c.out_dir = None;
    config_hash(&(c, fast))
}

/// `--out`, then the config's `out_dir`, then `$DEPFLOW_OUT/<stem>`, then
/// `results/<stem>`.
pub fn resolve_out_dir(
    cfg: &ExperimentConfig,
    cli_out: Option<&Path>,
    env_root: Option<&Path>,
    config_stem: &str,
) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    env_root.unwrap_or(Path::new("results")).join(config_stem)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

const RUN_ARTIFACTS: [&str; 8] = [
    "manifest.json",
    "cells",
    "checkpoints",
    "plots",
    "failures.json",
    "results.csv",
    "summary.csv",
    "results.md",
];

fn clear_run(dir: &Path) -> Result<()> {
    for name in RUN_ARTIFACTS
        .iter()
        .chain(["sweep.csv", "sweep.svg"].iter())
    {
        let p = dir.join(name);
        let res = if p.is_dir() {
            fs::remove_dir_all(&p)
        } else if p.exists() {
            fs::remove_file(&p)
        } else {
            Ok(())
        };
        res.map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Claims `dir` for a run with `hash`. A directory holding a different
/// run is refused unless `force`, which clears it; the same run resumes and
/// keeps its finished cells.
fn prepare_dir(dir: &Path, manifest: &Manifest, force: bool) -> Result<()> {
    let mpath = dir.join("manifest.json");
    if mpath.exists() {
        let old: Option<Manifest> = fs::read_to_string(&mpath)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        let same = old.is_some_and(|m| m.config_hash == manifest.config_hash);
        if force {
            clear_run(dir)?;
        } else if !same {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    } else if dir.join("cells").exists() && !force {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    for sub in ["cells", "checkpoints", "plots"] {
        mkdir(&dir.join(sub))?;
    }
    write(&mpath, serde_json::to_string_pretty(manifest)?)
}

fn cell_stem(dataset: &str, schedule: ScheduleKind, seed: u64) -> String {
    let safe: String = dataset
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}__{schedule}__seed{seed}")
}

/// Loaded data for one (dataset, seed).
struct Prepared {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    mixture: Option<FixedMixture>,
}

impl Prepared {
    fn data(&self) -> TrainData<'_> {
        let d = TrainData::new(&self.train, &self.val, &self.test);
        match &self.mixture {
            Some(m) => d.with_mixture(m),
            None => d,
        }
    }
}

fn prepare(
    cfg: &ExperimentConfig,
    src: DatasetSource,
    seed: u64,
    needs_mixture: bool,
) -> Result<Prepared> {
    let (train, val, test) = match src {
        DatasetSource::Stock => {
            let s = ingest_stock_csv(&cfg.stock_pairs)?;
            (s.train, s.val, s.test)
        }
        DatasetSource::Synthetic(shape, iv) => {
            let mut spec = cfg.synthetic.spec(shape, cfg.dependency(), seed);
            if let Some(iv) = iv {
                spec.rho_interval = iv;
            }
            let s = make_synthetic(&spec)?;
            (s.train, s.val, s.test)
        }
    };
    let mixture = match (&train.g, needs_mixture) {
        (Some(g), true) => Some(FixedMixture::from_relationship(g, 1.0)?),
        _ => None,
    };
    Ok(Prepared {
        train,
        val,
        test,
        mixture,
    })
}

struct Job {
    dataset: usize,
    seed: u64,
    schedules: Vec<ScheduleKind>,
}

struct JobContext<'a> {
    cfg: &'a ExperimentConfig,
    sources: &'a [DatasetSource],
    dir: &'a Path,
    hash: &'a str,
    fast: bool,
}

impl JobContext<'_> {
    fn cell_config(&self, schedule: ScheduleKind, seed: u64) -> TrainConfig {
        let mut t = self.cfg.train_config(schedule, seed);
        if self.fast {
            t.rho_grid = fast_grid(&t.rho_grid);
            t.lambda_grid = fast_grid(&t.lambda_grid);
        }
        t
    }

    fn run_job(&self, job: &Job) -> Vec<CellRecord> {
        let src = self.sources[job.dataset];
        let label = src.label();
        let needs_mixture = job
            .schedules
            .iter()
            .any(|k| matches!(k, ScheduleKind::Grid | ScheduleKind::Alternating));
        let prepared = match prepare(self.cfg, src, job.seed, needs_mixture) {
            Ok(p) => p,
            Err(e) => {
                log::error!("{label} seed {}: data preparation failed: {e}", job.seed);
                return job
                    .schedules
                    .iter()
                    .map(|&k| self.save_failure(&label, k, job.seed, e.to_string()))
                    .collect();
            }
        };
        let (true_rho, true_lambda) = match &prepared.train.true_params {
            Some(TrueParams::Rho { values }) => (Some(values.as_slice()), None),
            Some(TrueParams::Lambda { value }) => (None, Some(*value)),
            None => (None, None),
        };
        let mut out = Vec::new();
        for &k in &job.schedules {
            let tc = self.cell_config(k, job.seed);
            log::info!("{label} / {k} / seed {}", job.seed);
            let rec = match train_schedule(k, &tc, prepared.data()) {
                Ok(mut r) => {
                    let rec = CellRecord::from_result(&label, &r, true_rho, true_lambda);
                    match self.save_success(&label, &mut r, &rec, &prepared) {
                        Ok(()) => rec,
                        Err(e) => self.save_failure(&label, k, job.seed, e.to_string()),
                    }
                }
                Err(e) => {
                    log::warn!("{label} / {k} / seed {} failed: {e}", job.seed);
                    self.save_failure(&label, k, job.seed, e.to_string())
                }
            };
            out.push(rec);
        }
        out
    }

    fn save_success(
        &self,
        label: &str,
        r: &mut TrainResult,
        rec: &CellRecord,
        prepared: &Prepared,
    ) -> Result<()> {
        let stem = cell_stem(label, r.schedule, r.seed);
        let flow = r.flow.take();
        if let Some(flow) = &flow {
            let rel = format!("checkpoints/{stem}.json");
            save_checkpoint(flow, &self.dir.join(&rel))?;
            r.checkpoint = Some(rel);
            if r.seed == self.cfg.seeds[0] && flow.dim == 2 {
                plot_cell(
                    flow,
                    &prepared.train.x,
                    &self.dir.join(format!(
                        "plots/{label_stem}.svg",
                        label_stem = plot_stem(label, r.schedule)
                    )),
                )?;
            }
        }
        let file = CellFile {
            config_hash: self.hash.to_string(),
            record: rec.clone(),
            result: Some(r.clone()),
        };
        r.flow = flow;
        write(
            &self.dir.join(format!("cells/{stem}.json")),
            serde_json::to_string_pretty(&file)?,
        )
    }

    fn save_failure(&self, label: &str, k: ScheduleKind, seed: u64, error: String) -> CellRecord {
        let rec = CellRecord::failed(label, k, seed, error);
        let file = CellFile {
            config_hash: self.hash.to_string(),
            record: rec.clone(),
            result: None,
        };
        let path = self
            .dir
            .join(format!("cells/{}.json", cell_stem(label, k, seed)));
        if let Err(e) = serde_json::to_string_pretty(&file)
            .map_err(Error::from)
            .and_then(|s| write(&path, s))
        {
            log::error!("could not record failure: {e}");
        }
        rec
    }
}

fn plot_stem(label: &str, schedule: ScheduleKind) -> String {
    let stem = cell_stem(label, schedule, 0);
    stem.trim_end_matches("__seed0").to_string()
}

fn plot_cell(flow: &FlowModel, x: &DenseMatrix, path: &Path) -> Result<()> {
    let k = x.rows().min(SCATTER_POINTS);
    let idx: Vec<usize> = (0..k).collect();
    render_density_svg(
        flow,
        &DensityGrid::default(),
        Some(&x.select_rows(&idx)),
        path,
    )
}

/// Finished cell records already present in `dir` for `hash`.
fn existing_cells(dir: &Path, hash: &str) -> BTreeMap<String, CellRecord> {
    let mut out = BTreeMap::new();
    let Ok(entries) = fs::read_dir(dir.join("cells")) else {
        return out;
    };
    for e in entries.flatten() {
        let path = e.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(String::from) else {
            continue;
        };
        let Ok(s) = fs::read_to_string(&path) else {
            continue;
        };
        if let Ok(f) = serde_json::from_str::<CellFile>(&s) {
            if f.config_hash == hash && f.record.error.is_none() {
                out.insert(stem, f.record);
            }
        }
    }
    out
}

/// Runs every (dataset, schedule, seed) cell of `cfg` into a run directory
/// and writes the aggregated tables.
///
/// Cells of one (dataset, seed) share their data and run in schedule order;
/// `jobs` worker threads take (dataset, seed) groups in a fixed order, so
/// results do not depend on the thread count.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = experiment_hash(cfg, opts.fast)?;
    let manifest = Manifest {
        config_hash: hash.clone(),
        fast: opts.fast,
        config: cfg.clone(),
    };
    prepare_dir(out_dir, &manifest, opts.force)?;
    let done = existing_cells(out_dir, &hash);
    let sources = cfg.datasets();
    let mut jobs = Vec::new();
    let mut records: Vec<CellRecord> = Vec::new();
    for (d, src) in sources.iter().enumerate() {
        let label = src.label();
        for &seed in &cfg.seeds {
            let mut todo = Vec::new();
            for &k in &cfg.schedules {
                match done.get(&cell_stem(&label, k, seed)) {
                    Some(rec) => records.push(rec.clone()),
                    None => todo.push(k),
                }
            }
            if !todo.is_empty() {
                jobs.push(Job {
                    dataset: d,
                    seed,
                    schedules: todo,
                });
            }
        }
    }
    let ctx = JobContext {
        cfg,
        sources: &sources,
        dir: out_dir,
        hash: &hash,
        fast: opts.fast,
    };
    let results: Mutex<Vec<(usize, Vec<CellRecord>)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = opts.jobs.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let recs = ctx.run_job(job);
                results.lock().expect("worker panicked").push((i, recs));
            });
        }
    });
    let mut results = results.into_inner().expect("worker panicked");
    results.sort_by_key(|(i, _)| *i);
    records.extend(results.into_iter().flat_map(|(_, r)| r));
    finish_run(cfg, out_dir, &hash, records)
}

fn order_records(cfg: &ExperimentConfig, mut records: Vec<CellRecord>) -> Vec<CellRecord> {
    let labels = cfg.dataset_labels();
    let key = |c: &CellRecord| {
        (
            labels
                .iter()
                .position(|l| *l == c.dataset)
                .unwrap_or(usize::MAX),
            cfg.seeds
                .iter()
                .position(|s| *s == c.seed)
                .unwrap_or(usize::MAX),
            c.schedule,
        )
    };
    records.sort_by_key(key);
    records
}

fn finish_run(
    cfg: &ExperimentConfig,
    dir: &Path,
    hash: &str,
    records: Vec<CellRecord>,
) -> Result<RunSummary> {
    let records = order_records(cfg, records);
    let failures: Vec<CellRecord> = records
        .iter()
        .filter(|c| c.error.is_some())
        .cloned()
        .collect();
    write(
        &dir.join("failures.json"),
        serde_json::to_string_pretty(&failures)?,
    )?;
    let table = ResultTable::build(&cfg.seeds, records);
    write_tables(cfg, dir, hash, &table)?;
    Ok(RunSummary {
        out_dir: dir.to_path_buf(),
        config_hash: hash.to_string(),
        table,
        failures,
    })
}

fn write_tables(cfg: &ExperimentConfig, dir: &Path, hash: &str, table: &ResultTable) -> Result<()> {
    write(&dir.join("results.csv"), table.cells_csv())?;
    write(&dir.join("summary.csv"), table.summary_csv())?;
    let mut md = format!("config hash `{hash}`\n\n");
    md.push_str(&table.markdown());
    if cfg.kind == ExperimentKind::SensitivitySweep {
        let rows = sweep_rows(cfg, table);
        write(&dir.join("sweep.csv"), sweep_csv(&rows))?;
        write(&dir.join("sweep.svg"), sweep_svg(&rows))?;
        md.push('\n');
        md.push_str(&sweep_markdown(&rows));
    }
    write(&dir.join("results.md"), md)
}

/// Rebuilds the aggregated table of a finished run directory from its cell
/// records, rewriting the CSV and markdown outputs.
pub fn load_table(dir: &Path) -> Result<(Manifest, ResultTable)> {
    let mpath = dir.join("manifest.json");
    let s = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&s)?;
    let cdir = dir.join("cells");
    let mut records = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(&cdir)
        .map_err(|e| Error::io(&cdir, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    for p in entries {
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let f: CellFile = serde_json::from_str(&s)?;
        if f.config_hash != manifest.config_hash {
            return Err(Error::Config(format!(
                "{} belongs to config {}, not {}",
                p.display(),
                f.config_hash,
                manifest.config_hash
            )));
        }
        records.push(f.record);
    }
    let cfg = &manifest.config;
    let table = ResultTable::build(&cfg.seeds, order_records(cfg, records));
    write_tables(cfg, dir, &manifest.config_hash, &table)?;
    Ok((manifest, table))
}

/// Baseline against the adjusted (grid) model for one sweep interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shape: ShapeName,
    pub interval: [f64; 2],
    pub baseline_mean: f64,
    pub baseline_se: f64,
    pub adjusted_mean: f64,
    pub adjusted_se: f64,
    /// `baseline_mean - adjusted_mean`.
    pub gap: f64,
    pub p_value: Option<f64>,
}

/// One row per (shape, interval), comparing grid search with the baseline.
pub fn sweep_rows(cfg: &ExperimentConfig, table: &ResultTable) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for src in cfg.datasets() {
        let DatasetSource::Synthetic(shape, Some(interval)) = src else {
            continue;
        };
        let label = src.label();
        let get = |k| table.row(&label, k);
        let (bm, bs) = get(ScheduleKind::Baseline)
            .map_or((f64::NAN, f64::NAN), |r| (r.mean_test_nll, r.se_test_nll));
        let adj = get(ScheduleKind::Grid);
        let (am, as_) = adj.map_or((f64::NAN, f64::NAN), |r| (r.mean_test_nll, r.se_test_nll));
        rows.push(SweepRow {
            shape,
            interval,
            baseline_mean: bm,
            baseline_se: bs,
            adjusted_mean: am,
            adjusted_se: as_,
            gap: bm - am,
            p_value: adj.and_then(|r| r.p_vs_baseline),
        });
    }
    rows
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "shape,rho_lo,rho_hi,baseline_mean,baseline_se,adjusted_mean,adjusted_se,gap,p_value\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.shape,
            r.interval[0],
            r.interval[1],
            r.baseline_mean,
            r.baseline_se,
            r.adjusted_mean,
            r.adjusted_se,
            r.gap,
            r.p_value.map(|p| p.to_string()).unwrap_or_default()
        ));
    }
    s
}

fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "| shape | ρ interval | baseline | adjusted | gap | p |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | [{:.1}, {:.1}] | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} | {} |\n",
            r.shape,
            r.interval[0],
            r.interval[1],
            r.baseline_mean,
            r.baseline_se,
            r.adjusted_mean,
            r.adjusted_se,
            r.gap,
            r.p_value
                .map(|p| format!("{p:.3}"))
                .unwrap_or_else(|| "-".into())
        ));
    }
    s
}

fn sweep_svg(rows: &[SweepRow]) -> String {
    let mut series = Vec::new();
    let shapes: BTreeSet<ShapeName> = rows.iter().map(|r| r.shape).collect();
    for shape in shapes {
        let mid = |r: &SweepRow| 0.5 * (r.interval[0] + r.interval[1]);
        let of_shape: Vec<&SweepRow> = rows.iter().filter(|r| r.shape == shape).collect();
        series.push(Series {
            label: format!("{shape} baseline"),
            points: of_shape.iter().map(|r| (mid(r), r.baseline_mean)).collect(),
        });
        series.push(Series {
            label: format!("{shape} adjusted"),
            points: of_shape.iter().map(|r| (mid(r), r.adjusted_mean)).collect(),
        });
    }
    line_chart_svg(
        "Test NLL by dependency strength",
        "interval midpoint of ρ",
        "mean test NLL",
        &series,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"schema_version": 1, "kind": "synthetic-equiblocks", "shapes": ["Abs"],
                "schedules": ["baseline"], "seeds": [0]}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let c = minimal();
        assert_eq!(c.train.batch_size, 256);
        let bad = |s: &str| ExperimentConfig::from_json(s).unwrap_err();
        assert!(matches!(
            bad(
                r#"{"schema_version": 1, "kind": "synthetic-equiblocks", "shapes": ["Abs"], "schedules": ["baseline"], "seeds": []}"#
            ),
            Error::Config(_)
        ));
        bad(
            r#"{"schema_version": 2, "kind": "synthetic-equiblocks", "shapes": ["Abs"], "schedules": ["baseline"], "seeds": [0]}"#,
        );
        bad(
            r#"{"schema_version": 1, "kind": "synthetic-equiblocks", "shapes": ["Abs"], "schedules": ["alternating"], "seeds": [0]}"#,
        );
        bad(
            r#"{"schema_version": 1, "kind": "synthetic-fixedcov", "shapes": ["Abs"], "schedules": ["joint"], "seeds": [0]}"#,
        );
        bad(
            r#"{"schema_version": 1, "kind": "synthetic-equiblocks", "shapes": ["Abs"], "schedules": ["baseline"], "seeds": [0], "sedes": [1]}"#,
        );
        bad(
            r#"{"schema_version": 1, "kind": "stock-pairs", "schedules": ["baseline"], "seeds": [0]}"#,
        );
    }

    #[test]
    fn fast_grid_keeps_ends_and_six_values() {
        let g = fast_grid(&crate::training::DEFAULT_RHO_GRID);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], 0.01);
        assert_eq!(g[5], 0.9);
        assert_eq!(fast_grid(&[0.1, 0.2]), vec![0.1, 0.2]);
    }

    #[test]
    fn sweep_labels_and_out_dir_resolution() {
        let mut c = minimal();
        c.kind = ExperimentKind::SensitivitySweep;
        let labels = c.dataset_labels();
        assert_eq!(labels.len(), 5);
        assert_eq!(labels[0], "Abs[0.0,0.2]");
        assert_eq!(
            resolve_out_dir(&c, None, Some(Path::new("/o")), "exp"),
            PathBuf::from("/o/exp")
        );
        assert_eq!(
            resolve_out_dir(&c, Some(Path::new("x")), Some(Path::new("/o")), "exp"),
            PathBuf::from("x")
        );
    }

    #[test]
    fn hash_ignores_out_dir_but_not_fast() {
        let mut c = minimal();
        let h = experiment_hash(&c, false).unwrap();
        c.out_dir = Some("elsewhere".into());
        assert_eq!(h, experiment_hash(&c, false).unwrap());
        assert_ne!(h, experiment_hash(&c, true).unwrap());
    }
}
