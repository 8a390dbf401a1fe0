//! Federated, noise-robust infant cry classification: log-mel front end,
//! a small autodiff engine, a denoising transformer, federated training
//! with control variates and secure aggregation, and calibration and OOD
//! tools.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
mod error;
pub mod fed;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod objective;
pub mod reliability;
pub mod secure;
pub mod tensor;

pub use error::{Error, Result};
pub use fed::{GlobalState, HyperParams, PayloadReport, RoundReport};
pub use harness::ExperimentConfig;
pub use model::{ModelConfig, ParamSet};
pub use tensor::Tensor;
