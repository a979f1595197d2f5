//! The shared mini-batch loop.

use std::sync::Arc;
use std::time::Instant;

use super::adamax::{adamax_step, AdamaxState};
use super::{ScheduleKind, TrainConfig, TrainResult};
use crate::covariance::{equi_derivatives, rho_raw_derivative, CovarianceModel, EquiBlocks};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::likelihood::{epoch_batches, estimator_weights, iid_nll, minibatch_loss_on_tape};
use crate::numerics::{streams, DenseMatrix, RngState, Tape};

/// Where the batch block `A[B, B]` comes from.
pub(crate) enum BatchCov {
    Model {
        cov: CovarianceModel,
        log_det: f64,
    },
    Dense {
        a: Arc<DenseMatrix>,
        log_det: f64,
    },
    /// Equicorrelated blocks whose ρ are trained with the flow.
    Joint {
        blocks: EquiBlocks,
        raw: DenseMatrix,
    },
}

impl BatchCov {
    pub(crate) fn model(cov: CovarianceModel) -> Result<Self> {
        let log_det = cov.log_det()?;
        Ok(Self::Model { cov, log_det })
    }
}

/// Dependency parameters attached to a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum DepSnapshot {
    None,
    Lambda(f64),
    Rho(Vec<f64>),
}

struct Best {
    flow: FlowModel,
    epoch: usize,
    val: f64,
    dep: DepSnapshot,
}

pub(crate) struct Trainer<'a> {
    cfg: &'a TrainConfig,
    x: &'a DenseMatrix,
    val: &'a DenseMatrix,
    pub(crate) flow: FlowModel,
    names: Vec<String>,
    opt: AdamaxState,
    lr: f64,
    shuffle: RngState,
    pub(crate) dep: DepSnapshot,
    pub(crate) train_loss: Vec<f64>,
    pub(crate) val_nll: Vec<f64>,
    pub(crate) lambda_trace: Vec<f64>,
    best: Best,
    since_best: usize,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh flow from the seed's init stream; `extra` adds one optimizer
    /// slot of width `extra` for trained dependency parameters.
    pub(crate) fn new(
        cfg: &'a TrainConfig,
        x: &'a DenseMatrix,
        val: &'a DenseMatrix,
        dep: DepSnapshot,
        extra: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if x.rows() < 2 {
            return Err(Error::InvalidParameter(
                "training needs at least two observations".into(),
            ));
        }
        let started = Instant::now();
        let mut init = RngState::with_stream(cfg.seed, streams::INIT);
        let flow = FlowModel::new(x.cols(), &cfg.arch, &mut init)?;
        let mut shapes: Vec<(usize, usize)> = flow.params().iter().map(|m| m.shape()).collect();
        let mut names = flow.param_names();
        if extra > 0 {
            shapes.push((1, extra));
            names.push("rho_raw".into());
        }
        let v0 = iid_nll(&flow, val)?;
        Ok(Self {
            cfg,
            x,
            val,
            best: Best {
                flow: flow.clone(),
                epoch: 0,
                val: v0,
                dep: dep.clone(),
            },
            flow,
            names,
            opt: AdamaxState::new(&shapes),
            lr: cfg.lr,
            shuffle: RngState::with_stream(cfg.seed, streams::SHUFFLE),
            dep,
            train_loss: Vec::new(),
            val_nll: vec![v0],
            lambda_trace: Vec::new(),
            since_best: 0,
            started,
        })
    }

    pub(crate) fn epochs_done(&self) -> usize {
        self.train_loss.len()
    }

    /// Whether patience has run out.
    pub(crate) fn should_stop(&self) -> bool {
        self.cfg.patience.is_some_and(|p| self.since_best >= p)
    }

    /// One pass over shuffled batches followed by validation.
    pub(crate) fn run_epoch(&mut self, cov: &mut BatchCov) -> Result<()> {
        let n = self.x.rows();
        let epoch = self.epochs_done() + 1;
        let batches = epoch_batches(n, self.cfg.batch_size.min(n), &mut self.shuffle)?;
        let mut total = 0.0;
        for batch in &batches {
            let loss = self.step(cov, batch.indices())?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss;
        }
        self.lr *= self.cfg.lr_decay;
        if let BatchCov::Joint { blocks, .. } = cov {
            self.dep = DepSnapshot::Rho(blocks.rho().to_vec());
        }
        let v = iid_nll(&self.flow, self.val)?;
        if v.is_nan() {
            return Err(Error::Divergence { epoch });
        }
        self.train_loss.push(total / batches.len() as f64);
        self.val_nll.push(v);
        if v < self.best.val {
            self.best = Best {
                flow: self.flow.clone(),
                epoch,
                val: v,
                dep: self.dep.clone(),
            };
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(())
    }

    fn step(&mut self, cov: &mut BatchCov, idx: &[usize]) -> Result<f64> {
        let n = self.x.rows();
        let b = idx.len();
        let (a_block, log_det, joint) = match cov {
            BatchCov::Model { cov, log_det } => (cov.inverse_block(idx)?, *log_det, false),
            BatchCov::Dense { a, log_det } => (a.select_principal(idx), *log_det, false),
            BatchCov::Joint { blocks, .. } => (blocks.inverse_block(idx), blocks.log_det(), true),
        };
        let w = estimator_weights(&a_block, n)?;
        let mut tape = Tape::new();
        let params = self.flow.register(&mut tape);
        let nodes = minibatch_loss_on_tape(
            &mut tape,
            &self.flow,
            &params,
            &self.x.select_rows(idx),
            w,
            joint,
            n,
            log_det,
        );
        let loss = tape.value(nodes.loss).item().expect("scalar loss");
        let grads = tape.backward(nodes.loss)?;
        let mut flow_grads: Vec<DenseMatrix> = params.iter().map(|&v| grads.get(v)).collect();
        clip_global_norm(&mut flow_grads, self.cfg.clip_norm);
        let nflow = flow_grads.len();
        let mut mask = vec![true; nflow];
        match cov {
            BatchCov::Joint { blocks, raw } => {
                let gw = grads.get(nodes.weights);
                let g_raw = rho_raw_gradient(blocks, idx, &gw, n, b, self.flow.dim);
                flow_grads.push(g_raw);
                mask.push(false);
                let mut targets = self.flow.params_mut();
                targets.push(raw);
                adamax_step(
                    &mut targets,
                    &flow_grads,
                    &self.names,
                    &mut self.opt,
                    self.lr,
                    self.cfg.weight_decay,
                    &mask,
                )?;
                blocks.set_raw(raw.as_slice());
            }
            _ => {
                let mut targets = self.flow.params_mut();
                adamax_step(
                    &mut targets,
                    &flow_grads,
                    &self.names[..nflow],
                    &mut self.opt,
                    self.lr,
                    self.cfg.weight_decay,
                    &mask,
                )?;
            }
        }
        Ok(loss)
    }

    pub(crate) fn finish(
        self,
        schedule: ScheduleKind,
        test: &DenseMatrix,
        grid_value: Option<f64>,
        config_hash: String,
    ) -> Result<TrainResult> {
        let test_nll = iid_nll(&self.best.flow, test)?;
        let (lambda_hat, rho_hat) = match self.best.dep {
            DepSnapshot::None => (None, None),
            DepSnapshot::Lambda(l) => (Some(l), None),
            DepSnapshot::Rho(r) => (None, Some(r)),
        };
        Ok(TrainResult {
            schedule,
            seed: self.cfg.seed,
            config_hash,
            grid_value,
            lambda_hat,
            rho_hat,
            train_loss: self.train_loss,
            val_nll: self.val_nll,
            best_epoch: self.best.epoch,
            best_val_nll: self.best.val,
            test_nll,
            lambda_trace: self.lambda_trace,
            checkpoint: None,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            flow: Some(self.best.flow),
        })
    }
}

/// Rescales `grads` in place so their joint Euclidean norm is at most `max`.
pub(crate) fn clip_global_norm(grads: &mut [DenseMatrix], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
}

/// Chains `dL/dW` through the closed-form `dA/dρ` and adds the analytic
/// log-det term, giving `dL/dρ_raw` for every block.
fn rho_raw_gradient(
    blocks: &EquiBlocks,
    idx: &[usize],
    gw: &DenseMatrix,
    n: usize,
    b: usize,
    p: usize,
) -> DenseMatrix {
    let nb = blocks.num_blocks();
    let sizes = blocks.block_sizes();
    let rho = blocks.rho();
    let of = blocks.block_of();
    let (nf, bf) = (n as f64, b as f64);
    let w_diag = nf / bf;
    let w_off = nf * (nf - 1.0) / (bf * (bf - 1.0));
    let mut sum_diag = vec![0.0; nb];
    let mut sum_off = vec![0.0; nb];
    for (x, &i) in idx.iter().enumerate() {
        let k = of[i];
        let row = gw.row(x);
        sum_diag[k] += row[x];
        for (y, &j) in idx.iter().enumerate() {
            if y != x && of[j] == k {
                sum_off[k] += row[y];
            }
        }
    }
    let ld_scale = 0.5 * p as f64 / nf;
    DenseMatrix::from_fn(1, nb, |_, k| {
        let (d_diag, d_off, d_logdet) = equi_derivatives(sizes[k], rho[k]);
        let g_rho =
            w_diag * d_diag * sum_diag[k] + w_off * d_off * sum_off[k] + ld_scale * d_logdet;
        g_rho * rho_raw_derivative(rho[k])
    })
}
