//! Gaussian process hyperparameter learning with the k-truncated
//! leave-one-out objective.

pub mod baselines;
pub mod classify;
pub mod error;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod loo;
pub mod nn;
pub mod optim;
pub mod pg;

pub use error::{GpError, Result};
pub use gp::{exact_mll, predictive, DenseGp, GaussianPredictive};
pub use kernels::{Hyperparams, KernelKind};
pub use linalg::Matrix;
pub use nn::{Backend, NeighborIndex};
pub use optim::{TrainConfig, TrainTrace};
