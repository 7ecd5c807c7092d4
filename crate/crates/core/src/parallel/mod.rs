//! Emulated multi-rank execution of the toy transformer.

pub mod bugs;
pub mod collective;
mod runner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bugs::{BugId, BugInjection, BugSet, Taxonomy, UnknownBugId};
pub use collective::ReduceOp;
pub use runner::{run_candidate, CandidateRun};

use crate::canonical::CanonicalError;
use crate::nn::{ModelConfig, NnError};
use crate::tensor::TensorError;
use crate::trace::TraceError;

#[derive(Debug, Error)]
pub enum ParallelError {
    #[error("invalid parallel config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Mapping(#[from] CanonicalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    UnknownBug(#[from] UnknownBugId),
}

/// Degrees of each parallel strategy plus the local batch schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelConfig {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
    pub vp: usize,
    pub cp: usize,
    pub sp: bool,
    /// Microbatches processed by each data-parallel replica per iteration.
    pub microbatches: usize,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self { dp: 1, tp: 1, pp: 1, vp: 1, cp: 1, sp: false, microbatches: 1 }
    }
}

impl ParallelConfig {
    pub fn world_size(&self) -> usize {
        self.dp * self.tp * self.pp * self.cp
    }

    /// Sequence parallelism only changes anything with tensor parallelism.
    pub fn sequence_parallel(&self) -> bool {
        self.sp && self.tp > 1
    }

    pub fn total_microbatches(&self) -> usize {
        self.dp * self.microbatches
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ParallelError> {
        let bad = |m: String| Err(ParallelError::Config(m));
        if [self.dp, self.tp, self.pp, self.vp, self.cp, self.microbatches].contains(&0) {
            return bad("all degrees and the microbatch count must be positive".into());
        }
        if self.vp > 1 && self.pp < 2 {
            return bad("virtual pipeline stages need pp >= 2".into());
        }
        if cfg.layers % (self.pp * self.vp) != 0 {
            return bad(format!("{} layers do not split into pp·vp = {} chunks", cfg.layers, self.pp * self.vp));
        }
        for (what, n) in [("heads", cfg.heads), ("ffn", cfg.ffn), ("vocab", cfg.vocab)] {
            if n % self.tp != 0 {
                return bad(format!("{what} {n} not divisible by tp {}", self.tp));
            }
        }
        if self.cp > 1 && cfg.seq % (2 * self.cp) != 0 {
            return bad(format!("seq {} not divisible by 2·cp = {}", cfg.seq, 2 * self.cp));
        }
        if self.sequence_parallel() && (cfg.seq / self.cp) % self.tp != 0 {
            return bad(format!("per-cp sequence {} not divisible by tp {}", cfg.seq / self.cp, self.tp));
        }
        Ok(())
    }
}
