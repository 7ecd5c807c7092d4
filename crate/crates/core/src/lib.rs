//! Differential testing for emulated distributed training.
//!
//! A single-device reference run and a candidate run that emulates data,
//! tensor, pipeline, sequence and context parallelism on one machine both
//! record their intermediate tensors under canonical ids. The checker merges
//! candidate shards back into full tensors and compares them against the
//! reference under per-tensor thresholds estimated from perturbation.

pub mod annotation;
pub mod canonical;
pub mod checker;
pub mod config;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod session;
pub mod sweep;
pub mod tensor;
pub mod trace;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Model(#[from] nn::NnError),
    #[error(transparent)]
    Parallel(#[from] parallel::ParallelError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Check(#[from] checker::CheckError),
}
