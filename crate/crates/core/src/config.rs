//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, Annotations};
use crate::checker::Aggregation;
use crate::nn::ModelConfig;
use crate::parallel::{BugInjection, ParallelConfig};
use crate::rng::fnv1a64;
use crate::trace::{Mode, RewriteSpec};

/// Overrides the directory relative output paths are resolved against.
pub const OUT_DIR_ENV: &str = "DIFFTRACE_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid { field: field.into(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSettings {
    pub kappa: f64,
    /// Relative input perturbation; the storage format's epsilon when unset.
    pub eps_p: Option<f64>,
    pub n_samples: usize,
    pub aggregation: Aggregation,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { kappa: 3.0, eps_p: None, n_samples: 5, aggregation: Aggregation::Max }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub candidate: Option<PathBuf>,
    pub tolerance: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub parallel: ParallelConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub check: CheckSettings,
    #[serde(default)]
    pub bugs: Vec<BugInjection>,
    /// Replaces the built-in annotation table when present.
    #[serde(default)]
    pub annotations: Option<Vec<Annotation>>,
    #[serde(default = "RewriteSpec::defaults")]
    pub generators: Vec<RewriteSpec>,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_lr() -> f64 {
    0.1
}

impl RunConfig {
    pub fn new(model: ModelConfig, parallel: ParallelConfig) -> Self {
        Self {
            model,
            parallel,
            learning_rate: default_lr(),
            mode: Mode::Cascade,
            check: CheckSettings::default(),
            bugs: Vec::new(),
            annotations: None,
            generators: RewriteSpec::defaults(),
            outputs: Outputs::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.parallel.validate(&self.model).map_err(|e| invalid("parallel", e))?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate", "must be a finite non-negative number"));
        }
        if !(self.check.kappa > 0.0) {
            return Err(invalid("check.kappa", "must be positive"));
        }
        if self.check.eps_p.is_some_and(|e| !(e >= 0.0)) {
            return Err(invalid("check.eps_p", "must be non-negative"));
        }
        if let Some(a) = &self.annotations {
            if a.is_empty() {
                return Err(invalid("annotations", "table is empty"));
            }
        }
        Ok(())
    }

    pub fn annotations(&self) -> Annotations {
        self.annotations.clone().map_or_else(Annotations::default, Annotations)
    }

    pub fn eps_p(&self) -> f64 {
        self.check.eps_p.unwrap_or_else(|| self.model.precision.reference_format().machine_epsilon())
    }

    /// Identifies what the reference computes; traces from runs with
    /// different digests are not comparable.
    pub fn digest(&self, mode: Mode) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "microbatches": self.parallel.total_microbatches(),
            "learning_rate": self.learning_rate,
            "mode": mode,
            "generators": if mode == Mode::ModuleWise { Some(&self.generators) } else { None },
        });
        format!("{:016x}", fnv1a64(key.to_string().as_bytes()))
    }

    /// Resolves an output path: absolute paths stay, relative ones go under
    /// the env override, else `outputs.dir`, else the working directory.
    pub fn output_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            return PathBuf::from(dir).join(p);
        }
        match &self.outputs.dir {
            Some(d) => d.join(p),
            None => p.to_path_buf(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::BugId;

    const SAMPLE: &str = r#"
learning_rate = 0.05

[model]
layers = 4
hidden = 32
heads = 4
ffn = 64
seq = 8
vocab = 32
precision = "bf16"

[parallel]
dp = 2
tp = 2
sp = true
microbatches = 2

[check]
kappa = 4.0

[[bugs]]
id = "MC_TP_ROW_ALLREDUCE"
site = "model.layers.0.mlp"
"#;

    #[test]
    fn parses_sample() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.parallel.tp, 2);
        assert!(c.parallel.sp);
        assert_eq!(c.check.n_samples, 5);
        assert_eq!(c.bugs[0].bug_id, BugId::McTpRowAllreduce);
        assert_eq!(c.bugs[0].site(), "model.layers.0.mlp");
        assert_eq!(c.eps_p(), 2f64.powi(-8));
    }

    #[test]
    fn reports_bad_fields() {
        let e = RunConfig::parse(&SAMPLE.replace("tp = 2", "tp = 3")).unwrap_err().to_string();
        assert!(e.contains("parallel"), "{e}");
        let e = RunConfig::parse(&SAMPLE.replace("MC_TP_ROW_ALLREDUCE", "NOT_A_BUG")).unwrap_err().to_string();
        assert!(e.contains("NOT_A_BUG") && e.contains("line"), "{e}");
        let e = RunConfig::parse(&SAMPLE.replace("dp = 2", "dq = 2")).unwrap_err().to_string();
        assert!(e.contains("dq"), "{e}");
    }

    #[test]
    fn digest_ignores_layout_but_not_model() {
        let a = RunConfig::parse(SAMPLE).unwrap();
        let mut b = a.clone();
        b.parallel.tp = 1;
        b.parallel.sp = false;
        assert_eq!(a.digest(Mode::Cascade), b.digest(Mode::Cascade));
        b.model.layers = 2;
        assert_ne!(a.digest(Mode::Cascade), b.digest(Mode::Cascade));
        assert_ne!(a.digest(Mode::Cascade), a.digest(Mode::ModuleWise));
    }
}
