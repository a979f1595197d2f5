//! Optimizers and training schedules.
//!
//! Every schedule runs through the same mini-batch engine; the baseline is
//! the dependent loss with `C = I`. Pinning a dependency parameter at
//! independence therefore reproduces baseline losses and updates bit for bit.

mod adamax;
mod engine;
mod schedules;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{FixedMixture, RHO_MAX};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowModel};

pub use adamax::{adamax_step, AdamaxState};
pub use schedules::{
    lambda_objective, lambda_stage, train_alternating, train_baseline, train_grid, train_joint,
    train_schedule, GridFamily, GridOutcome, GridPoint, LambdaStage,
};

pub const DEFAULT_RHO_GRID: [f64; 12] = [
    0.01, 0.025, 0.05, 0.1, 0.175, 0.25, 0.375, 0.5, 0.6, 0.67, 0.75, 0.9,
];
pub const DEFAULT_LAMBDA_GRID: [f64; 12] = [
    0.99, 0.975, 0.95, 0.9, 0.825, 0.75, 0.625, 0.5, 0.4, 0.33, 0.25, 0.1,
];

/// Above this size the fixed-mixture `A` is assembled per batch instead of
/// being materialized once per stage.
pub const DENSE_INVERSE_MAX_N: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Baseline,
    Grid,
    Alternating,
    Joint,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Baseline => "baseline",
            ScheduleKind::Grid => "grid",
            ScheduleKind::Alternating => "alternating",
            ScheduleKind::Joint => "joint",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlternatingPlan {
    pub flow_stages: usize,
    pub flow_epochs: usize,
    pub lambda_stages: usize,
    pub lambda_steps: usize,
    pub lambda_lr: f64,
    pub lambda_init: f64,
}

impl Default for AlternatingPlan {
    fn default() -> Self {
        Self {
            flow_stages: 5,
            flow_epochs: 25,
            lambda_stages: 4,
            lambda_steps: 100,
            lambda_lr: 0.1,
            lambda_init: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: FlowArch,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate after every flow epoch.
    pub lr_decay: f64,
    /// Decoupled decay on flow parameters; never on λ or ρ parameters.
    pub weight_decay: f64,
    /// Global-norm clip on flow gradients.
    pub clip_norm: f64,
    /// Stop after this many epochs without a new best validation NLL.
    pub patience: Option<usize>,
    pub rho_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub alternating: AlternatingPlan,
    /// Starting ρ for every block under joint optimization.
    pub rho_init: f64,
    /// Hold ρ (joint) or λ (alternating) at its initial value.
    pub freeze_dependency: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: FlowArch::default(),
            batch_size: 256,
            epochs: 100,
            lr: 0.01,
            lr_decay: 0.98,
            weight_decay: 0.001,
            clip_norm: 100.0,
            patience: None,
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            alternating: AlternatingPlan::default(),
            rho_init: 0.1,
            freeze_dependency: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.arch.layers == 0 {
            return bad("flow needs at least one layer".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr must be positive and lr_decay in (0, 1]".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and clip_norm > 0".into());
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("rho_grid must be nonempty with values in [0, 1)".into());
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0 && *l <= 1.0))
        {
            return bad("lambda_grid must be nonempty with values in (0, 1]".into());
        }
        let rho_ok = if self.freeze_dependency {
            (0.0..1.0).contains(&self.rho_init)
        } else {
            self.rho_init > 0.0 && self.rho_init < RHO_MAX
        };
        if !rho_ok {
            return bad(format!("rho_init {} out of range", self.rho_init));
        }
        let a = &self.alternating;
        let lambda_ok = if self.freeze_dependency {
            a.lambda_init > 0.0 && a.lambda_init <= 1.0
        } else {
            a.lambda_init > 0.0 && a.lambda_init < 1.0
        };
        if !lambda_ok {
            return bad(format!("lambda_init {} out of range", a.lambda_init));
        }
        if a.flow_stages == 0 || !(a.lambda_lr > 0.0) {
            return bad("alternating plan needs flow stages and a positive lambda_lr".into());
        }
        Ok(())
    }
}

/// Training, validation and test sets for one run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    /// Decomposition of the training relationship matrix, shared between
    /// runs; decomposed on demand when absent.
    pub mixture: Option<&'a FixedMixture>,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Dataset, val: &'a Dataset, test: &'a Dataset) -> Self {
        Self {
            train,
            val,
            test,
            mixture: None,
        }
    }

    pub fn with_mixture(self, mixture: &'a FixedMixture) -> Self {
        Self {
            mixture: Some(mixture),
            ..self
        }
    }
}

/// Outcome of one training run.
///
/// `val_nll[0]` is the untrained model; `val_nll[e]` and `train_loss[e-1]`
/// belong to flow epoch `e`. Wall-clock time is kept out of the JSON so
/// records are byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainResult {
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub config_hash: String,
    pub grid_value: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub rho_hat: Option<Vec<f64>>,
    pub train_loss: Vec<f64>,
    pub val_nll: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub test_nll: f64,
    pub lambda_trace: Vec<f64>,
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub flow: Option<FlowModel>,
}

impl TrainResult {
    /// Mean absolute error of the per-block ρ̂ against the truth; a model
    /// without ρ̂ is scored as ρ̂ = 0.
    pub fn rho_mae(&self, truth: &[f64]) -> f64 {
        let err: f64 = match &self.rho_hat {
            Some(est) => est.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum(),
            None => truth.iter().map(|t| t.abs()).sum(),
        };
        err / truth.len().max(1) as f64
    }
}

/// First 16 hex digits of the SHA-256 of the compact JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(digest)[..16].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.rho_init = 0.0;
        assert!(c.validate().is_err());
        c.freeze_dependency = true;
        c.validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&TrainConfig::default()).unwrap();
        assert_eq!(a, config_hash(&TrainConfig::default()).unwrap());
        assert_eq!(a.len(), 16);
        let mut c = TrainConfig::default();
        c.seed = 1;
        assert_ne!(a, config_hash(&c).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "epoch": 3}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 256);
    }

    #[test]
    fn rho_mae_scores_missing_estimates_as_zero() {
        let r = TrainResult {
            schedule: ScheduleKind::Baseline,
            seed: 0,
            config_hash: String::new(),
            grid_value: None,
            lambda_hat: None,
            rho_hat: None,
            train_loss: vec![],
            val_nll: vec![0.0],
            best_epoch: 0,
            best_val_nll: 0.0,
            test_nll: 0.0,
            lambda_trace: vec![],
            checkpoint: None,
            wall_clock_secs: 0.0,
            flow: None,
        };
        assert!((r.rho_mae(&[0.5, 0.7]) - 0.6).abs() < 1e-15);
    }
}
