use std::sync::Arc;

use super::engine::{BatchCov, DepSnapshot, Trainer};
use super::{config_hash, ScheduleKind, TrainConfig, TrainData, TrainResult, DENSE_INVERSE_MAX_N};
use crate::covariance::{rho_to_raw, CovarianceModel, EquiBlocks, FixedMixture};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, DenseMatrix};

/// Minimizes the mean i.i.d. NLL, i.e. the dependent loss with `C = I`.
pub fn train_baseline(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainResult> {
    let mut cov = BatchCov::model(CovarianceModel::identity(data.train.n()))?;
    run_fixed(
        cfg,
        data,
        &mut cov,
        DepSnapshot::None,
        ScheduleKind::Baseline,
        None,
    )
}

fn run_fixed(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    cov: &mut BatchCov,
    dep: DepSnapshot,
    schedule: ScheduleKind,
    grid_value: Option<f64>,
) -> Result<TrainResult> {
    let mut t = Trainer::new(cfg, &data.train.x, &data.val.x, dep, 0)?;
    for _ in 0..cfg.epochs {
        t.run_epoch(cov)?;
        if t.should_stop() {
            break;
        }
    }
    t.finish(schedule, &data.test.x, grid_value, config_hash(cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridFamily {
    /// One shared ρ for all blocks.
    Equicorrelated,
    /// λ of `λ I + (1-λ) G`.
    Mixture,
}

impl GridFamily {
    /// Orders two grid values so the one closer to independence comes first.
    fn independence_order(self, a: f64, b: f64) -> std::cmp::Ordering {
        match self {
            GridFamily::Equicorrelated => a.total_cmp(&b),
            GridFamily::Mixture => b.total_cmp(&a),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridPoint {
    pub value: f64,
    pub outcome: std::result::Result<TrainResult, String>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub best: TrainResult,
    pub points: Vec<GridPoint>,
}

fn mixture_cov(fm: &FixedMixture) -> Result<BatchCov> {
    let model = CovarianceModel::from(fm.clone());
    if fm.size() <= DENSE_INVERSE_MAX_N {
        Ok(BatchCov::Dense {
            a: Arc::new(fm.dense_inverse()?),
            log_det: model.log_det()?,
        })
    } else {
        BatchCov::model(model)
    }
}

fn require_blocks<'a>(data: &TrainData<'a>) -> Result<&'a [usize]> {
    data.train
        .block_ids
        .as_deref()
        .ok_or_else(|| Error::Config("schedule needs block ids on the training set".into()))
}

fn require_mixture(data: &TrainData<'_>, lambda: f64) -> Result<FixedMixture> {
    if let Some(m) = data.mixture {
        if m.size() != data.train.n() {
            return Err(Error::Shape(format!(
                "shared decomposition has size {}, training set {}",
                m.size(),
                data.train.n()
            )));
        }
        return m.with_lambda(lambda);
    }
    let g = data
        .train
        .g
        .as_ref()
        .ok_or_else(|| Error::Config("schedule needs a relationship matrix".into()))?;
    FixedMixture::from_relationship(g, lambda)
}

/// One full run per grid value with the dependency parameter frozen; the
/// winner has the lowest validation NLL, ties going toward independence.
/// A failing grid value is recorded and skipped.
pub fn train_grid(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    family: GridFamily,
    values: &[f64],
) -> Result<GridOutcome> {
    if values.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let mixture = match family {
        GridFamily::Mixture => Some(require_mixture(&data, 1.0)?),
        GridFamily::Equicorrelated => None,
    };
    let blocks = match family {
        GridFamily::Equicorrelated => Some(require_blocks(&data)?),
        GridFamily::Mixture => None,
    };
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let run = || -> Result<TrainResult> {
            match family {
                GridFamily::Equicorrelated => {
                    let eq = EquiBlocks::uniform(blocks.expect("checked"), v)?;
                    let rho = vec![v; eq.num_blocks()];
                    let mut cov = BatchCov::model(eq.into())?;
                    run_fixed(
                        cfg,
                        data,
                        &mut cov,
                        DepSnapshot::Rho(rho),
                        ScheduleKind::Grid,
                        Some(v),
                    )
                }
                GridFamily::Mixture => {
                    let fm = mixture.as_ref().expect("checked").with_lambda(v)?;
                    let mut cov = mixture_cov(&fm)?;
                    run_fixed(
                        cfg,
                        data,
                        &mut cov,
                        DepSnapshot::Lambda(v),
                        ScheduleKind::Grid,
                        Some(v),
                    )
                }
            }
        };
        let outcome = run().map_err(|e| {
            log::warn!("grid value {v} failed: {e}");
            e.to_string()
        });
        points.push(GridPoint { value: v, outcome });
    }
    let best = points
        .iter()
        .filter_map(|p| p.outcome.as_ref().ok().map(|r| (p.value, r)))
        .min_by(|(va, a), (vb, b)| {
            a.best_val_nll
                .total_cmp(&b.best_val_nll)
                .then(family.independence_order(*va, *vb))
        })
        .map(|(_, r)| r.clone())
        .ok_or_else(|| Error::Config("every grid value failed".into()))?;
    Ok(GridOutcome { best, points })
}

/// `(p/2) Σ log d_i + ½ Σ r_i / d_i` with `d_i = λ + (1-λ) Λ_i`, the
/// negative log-likelihood in λ up to constants.
pub fn lambda_objective(lambda: f64, eigenvalues: &[f64], row_sq: &[f64], p: usize) -> f64 {
    let mut s = 0.0;
    for (&e, &r) in eigenvalues.iter().zip(row_sq) {
        let d = lambda + (1.0 - lambda) * e;
        s += 0.5 * p as f64 * d.ln() + 0.5 * r / d;
    }
    s
}

fn lambda_objective_grad(lambda: f64, eigenvalues: &[f64], row_sq: &[f64], p: usize) -> f64 {
    let mut g = 0.0;
    for (&e, &r) in eigenvalues.iter().zip(row_sq) {
        let d = lambda + (1.0 - lambda) * e;
        let dd = 1.0 - e;
        g += 0.5 * p as f64 * dd / d - 0.5 * r * dd / (d * d);
    }
    g
}

/// Trajectory of one λ stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaStage {
    pub raw: f64,
    /// Objective before the first step and after every step.
    pub objective: Vec<f64>,
}

/// Gradient descent on `λ_raw` against the exact objective. A trial step
/// that raises the objective is halved until it does not; if 60 halvings
/// fail the step is skipped.
pub fn lambda_stage(
    raw_init: f64,
    eigenvalues: &[f64],
    row_sq: &[f64],
    p: usize,
    steps: usize,
    lr: f64,
) -> LambdaStage {
    let mut raw = raw_init;
    let mut f = lambda_objective(sigmoid(raw), eigenvalues, row_sq, p);
    let mut objective = vec![f];
    for _ in 0..steps {
        let lam = sigmoid(raw);
        let g = lambda_objective_grad(lam, eigenvalues, row_sq, p) * lam * (1.0 - lam);
        let mut eta = lr;
        for _ in 0..60 {
            let trial = raw - eta * g;
            let ft = lambda_objective(sigmoid(trial), eigenvalues, row_sq, p);
            if ft <= f {
                raw = trial;
                f = ft;
                break;
            }
            eta *= 0.5;
        }
        objective.push(f);
    }
    LambdaStage { raw, objective }
}

/// Flow stages with λ frozen alternate with exact λ stages on the rotated
/// latents `Q^T U`. `G` is decomposed once.
pub fn train_alternating(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainResult> {
    let plan = &cfg.alternating;
    let mut lambda = plan.lambda_init;
    let base = require_mixture(&data, lambda)?;
    let p = data.train.p();
    let mut t = Trainer::new(
        cfg,
        &data.train.x,
        &data.val.x,
        DepSnapshot::Lambda(lambda),
        0,
    )?;
    t.lambda_trace.push(lambda);
    'stages: for stage in 0..plan.flow_stages {
        let fm = base.with_lambda(lambda)?;
        let mut cov = mixture_cov(&fm)?;
        for _ in 0..plan.flow_epochs {
            t.run_epoch(&mut cov)?;
            if t.should_stop() {
                break 'stages;
            }
        }
        let last = stage + 1 == plan.flow_stages;
        if last || stage >= plan.lambda_stages || cfg.freeze_dependency {
            continue;
        }
        let (u, _) = t.flow.inverse(&data.train.x)?;
        let rotated = fm.rotate(&u)?;
        let row_sq: Vec<f64> = (0..rotated.rows())
            .map(|i| rotated.row(i).iter().map(|v| v * v).sum())
            .collect();
        let eig = &fm.spectral().eigenvalues;
        let out = lambda_stage(
            fm.lambda_raw(),
            eig,
            &row_sq,
            p,
            plan.lambda_steps,
            plan.lambda_lr,
        );
        lambda = sigmoid(out.raw);
        t.dep = DepSnapshot::Lambda(lambda);
        t.lambda_trace.push(lambda);
        log::debug!("lambda stage {stage}: lambda = {lambda:.4}");
    }
    t.finish(
        ScheduleKind::Alternating,
        &data.test.x,
        None,
        config_hash(cfg)?,
    )
}

/// A single optimizer over flow parameters and every block's `ρ_raw`.
pub fn train_joint(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainResult> {
    let ids = require_blocks(&data)?;
    if cfg.freeze_dependency {
        let eq = EquiBlocks::uniform(ids, cfg.rho_init)?;
        let rho = eq.rho().to_vec();
        let mut cov = BatchCov::model(eq.into())?;
        return run_fixed(
            cfg,
            data,
            &mut cov,
            DepSnapshot::Rho(rho),
            ScheduleKind::Joint,
            None,
        );
    }
    let nb = ids.iter().max().map_or(0, |m| m + 1);
    let raw = DenseMatrix::filled(1, nb, rho_to_raw(cfg.rho_init));
    let blocks = EquiBlocks::from_raw(ids, raw.as_slice())?;
    let rho = blocks.rho().to_vec();
    let mut cov = BatchCov::Joint { blocks, raw };
    let mut t = Trainer::new(cfg, &data.train.x, &data.val.x, DepSnapshot::Rho(rho), nb)?;
    for _ in 0..cfg.epochs {
        t.run_epoch(&mut cov)?;
        if t.should_stop() {
            break;
        }
    }
    t.finish(ScheduleKind::Joint, &data.test.x, None, config_hash(cfg)?)
}

/// Runs `schedule`; grid search picks its family from the training set
/// (block ids first, then a relationship matrix).
pub fn train_schedule(
    schedule: ScheduleKind,
    cfg: &TrainConfig,
    data: TrainData<'_>,
) -> Result<TrainResult> {
    match schedule {
        ScheduleKind::Baseline => train_baseline(cfg, data),
        ScheduleKind::Grid => {
            let (family, values) = if data.train.block_ids.is_some() {
                (GridFamily::Equicorrelated, &cfg.rho_grid)
            } else if data.train.g.is_some() {
                (GridFamily::Mixture, &cfg.lambda_grid)
            } else {
                return Err(Error::Config(
                    "grid search needs block ids or a relationship matrix".into(),
                ));
            };
            Ok(train_grid(cfg, data, family, values)?.best)
        }
        ScheduleKind::Alternating => train_alternating(cfg, data),
        ScheduleKind::Joint => train_joint(cfg, data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn rotated_problem(n: usize, lambda: f64, p: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = RngState::new(seed);
        let eig: Vec<f64> = (0..n).map(|_| 3.0 * rng.uniform()).collect();
        let row_sq = eig
            .iter()
            .map(|&e| {
                let d = lambda + (1.0 - lambda) * e;
                (0..p).map(|_| d * rng.standard_normal().powi(2)).sum()
            })
            .collect();
        (eig, row_sq)
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        let (eig, r) = rotated_problem(50, 0.4, 2, 1);
        for &l in &[0.1, 0.5, 0.93] {
            let h = 1e-6;
            let fd = (lambda_objective(l + h, &eig, &r, 2) - lambda_objective(l - h, &eig, &r, 2))
                / (2.0 * h);
            let an = lambda_objective_grad(l, &eig, &r, 2);
            assert!((an - fd).abs() < 1e-6 * fd.abs().max(1.0), "{an} vs {fd}");
        }
    }

    #[test]
    fn lambda_stage_never_increases_the_objective_and_finds_the_truth() {
        let (eig, r) = rotated_problem(4000, 0.3, 2, 2);
        let out = lambda_stage(sigmoid_inverse(0.9), &eig, &r, 2, 100, 0.1);
        assert_eq!(out.objective.len(), 101);
        assert!(out.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(
            (sigmoid(out.raw) - 0.3).abs() < 0.08,
            "{}",
            sigmoid(out.raw)
        );
    }

    #[test]
    fn lambda_stage_with_huge_rate_still_descends() {
        let (eig, r) = rotated_problem(200, 0.7, 3, 3);
        let out = lambda_stage(0.0, &eig, &r, 3, 20, 1e6);
        assert!(out.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.objective.last().unwrap() < &out.objective[0]);
    }

    fn sigmoid_inverse(l: f64) -> f64 {
        (l / (1.0 - l)).ln()
    }
}
