use serde::{Deserialize, Serialize};

use super::NnError;
use crate::canonical::{CanonicalId, TensorKind};
use crate::rng::{generate_full, GenSpec};
use crate::tensor::{PrecisionPolicy, Tensor};

/// Shape and numeric policy of the toy pre-norm transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seq: usize,
    pub vocab: usize,
    #[serde(default = "default_precision")]
    pub precision: PrecisionPolicy,
    /// Normal init scale for weights and embeddings; `1/sqrt(hidden)` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
}

fn default_precision() -> PrecisionPolicy {
    PrecisionPolicy::Bf16
}

impl ModelConfig {
    pub fn small(layers: usize) -> Self {
        Self {
            layers,
            hidden: 32,
            heads: 4,
            ffn: 64,
            seq: 8,
            vocab: 32,
            precision: PrecisionPolicy::Bf16,
            init_std: None,
        }
    }

    pub fn init_std(&self) -> f64 {
        self.init_std.unwrap_or_else(|| 1.0 / (self.hidden as f64).sqrt())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.seq == 0 {
            return bad("all model dimensions must be positive".into());
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.init_std.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub input_norm: NormParams,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub out: Tensor,
    pub pre_mlp_norm: NormParams,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

/// All model weights (or gradients of the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub word: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
}

pub fn layer_prefix(l: usize) -> String {
    format!("model.layers.{l}")
}

pub const WORD_EMBEDDING: &str = "model.embedding.word_embeddings.weight";
pub const POSITION_EMBEDDING: &str = "model.embedding.position_embeddings.weight";

/// Parameters replicated along the sequence under sequence parallelism;
/// their gradients need a tensor-parallel reduction.
pub fn is_sequence_parallel_param(name: &str) -> bool {
    name.contains("norm.") || name == POSITION_EMBEDDING
}

impl Params {
    /// Deterministic initialization: each tensor is generated from its own
    /// canonical parameter id and rounded to storage precision.
    pub fn init(cfg: &ModelConfig) -> Result<Params, NnError> {
        cfg.validate()?;
        let std = cfg.init_std();
        let out_std = std / (2.0 * cfg.layers as f64).sqrt();
        let gen = |name: &str, shape: &[usize], s: f64| -> Result<Tensor, NnError> {
            let id = CanonicalId::new(0, 0, TensorKind::Param, name);
            Ok(cfg.precision.store(generate_full(&id, &GenSpec::normal(0.0, s, shape))?))
        };
        let norm = |d: usize| NormParams { weight: Tensor::filled(&[d], 1.0), bias: Tensor::zeros(&[d]) };
        let (d, f) = (cfg.hidden, cfg.ffn);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = layer_prefix(l);
            layers.push(LayerParams {
                input_norm: norm(d),
                q: gen(&format!("{p}.self_attention.q.weight"), &[d, d], std)?,
                k: gen(&format!("{p}.self_attention.k.weight"), &[d, d], std)?,
                v: gen(&format!("{p}.self_attention.v.weight"), &[d, d], std)?,
                out: gen(&format!("{p}.self_attention.out.weight"), &[d, d], out_std)?,
                pre_mlp_norm: norm(d),
                fc1: gen(&format!("{p}.mlp.fc1.weight"), &[d, f], std)?,
                fc2: gen(&format!("{p}.mlp.fc2.weight"), &[f, d], out_std)?,
            });
        }
        Ok(Params {
            word: gen(WORD_EMBEDDING, &[cfg.vocab, d], std)?,
            pos: gen(POSITION_EMBEDDING, &[cfg.seq, d], std)?,
            layers,
            final_norm: norm(d),
        })
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        z.for_each_mut(|_, t| *t = Tensor::zeros(t.shape()));
        z
    }

    /// Visits every tensor with its qualified name in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        let mut c = self.clone();
        c.for_each_mut(|n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f(WORD_EMBEDDING, &mut self.word);
        f(POSITION_EMBEDDING, &mut self.pos);
        for (l, lp) in self.layers.iter_mut().enumerate() {
            let p = layer_prefix(l);
            f(&format!("{p}.input_norm.weight"), &mut lp.input_norm.weight);
            f(&format!("{p}.input_norm.bias"), &mut lp.input_norm.bias);
            f(&format!("{p}.self_attention.q.weight"), &mut lp.q);
            f(&format!("{p}.self_attention.k.weight"), &mut lp.k);
            f(&format!("{p}.self_attention.v.weight"), &mut lp.v);
            f(&format!("{p}.self_attention.out.weight"), &mut lp.out);
            f(&format!("{p}.pre_mlp_norm.weight"), &mut lp.pre_mlp_norm.weight);
            f(&format!("{p}.pre_mlp_norm.bias"), &mut lp.pre_mlp_norm.bias);
            f(&format!("{p}.mlp.fc1.weight"), &mut lp.fc1);
            f(&format!("{p}.mlp.fc2.weight"), &mut lp.fc2);
        }
        f("model.final_norm.weight", &mut self.final_norm.weight);
        f("model.final_norm.bias", &mut self.final_norm.bias);
    }

    /// Pairs up tensors of two identically laid out parameter sets.
    pub fn zip_mut(&mut self, other: &Params, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        let mut theirs = Vec::new();
        other.for_each(|_, t| theirs.push(t.clone()));
        let mut it = theirs.into_iter();
        self.for_each_mut(|n, t| f(n, t, &it.next().expect("same layout")));
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        self.for_each(|n, t| v.push((n.to_string(), t.clone())));
        v
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }
}
