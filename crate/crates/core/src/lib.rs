//! Normalizing flows trained on dependent observations.
//!
//! Observations are mapped row-wise through an invertible flow to latents
//! `U`, whose rows are modelled as jointly Gaussian with a structured
//! cross-observation covariance `C` (matrix normal with column covariance
//! `I_p`). The crate provides the covariance structures, the joint
//! likelihood and its unbiased mini-batch surrogate, the training
//! schedules, synthetic data generators and an experiment harness.

pub mod covariance;
pub mod data;
pub mod error;
pub mod flow;
pub mod harness;
pub mod likelihood;
pub mod numerics;
pub mod training;

pub use covariance::{CovarianceModel, EquiBlocks, FixedMixture, FullCholesky, IdentityCov};
pub use data::{Dataset, ShapeName, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use flow::{BaseDistribution, CouplingLayer, FlowArch, FlowModel};
pub use likelihood::{BatchSelection, LatentMatrix};
pub use numerics::{DenseMatrix, RngState};
pub use training::{TrainConfig, TrainResult};
