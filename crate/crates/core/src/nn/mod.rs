//! Single-device reference implementation of the toy transformer.

pub mod ops;
mod params;

use std::collections::HashMap;

use thiserror::Error;

pub use params::{
    is_sequence_parallel_param, layer_prefix, LayerParams, ModelConfig, NormParams, Params, POSITION_EMBEDDING,
    WORD_EMBEDDING,
};

use crate::canonical::{CanonicalId, TensorKind};
use crate::rng::{generate_full, Distribution, GenError, GenSpec};
use crate::tensor::Tensor;
use crate::trace::{SingleDevice, TraceError, Tracer};
use ops::{AttnCache, NormCache};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("backward for microbatch {0} has no recorded forward pass")]
    MissingTape(u64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

pub const TOKENS_MODULE: &str = "data.tokens";

/// Token ids of one global microbatch: `seq + 1` ids, shifted into inputs
/// and next-token labels.
pub fn microbatch_tokens(cfg: &ModelConfig, mb: u64) -> Result<(Vec<usize>, Vec<usize>), NnError> {
    let id = CanonicalId::new(0, mb, TensorKind::ActivationIn, TOKENS_MODULE);
    let spec = GenSpec { distribution: Distribution::TokenIds { vocab: cfg.vocab }, shape: vec![cfg.seq + 1] };
    let ids: Vec<usize> = generate_full(&id, &spec)?.data().iter().map(|&x| x as usize).collect();
    Ok((ids[..cfg.seq].to_vec(), ids[1..].to_vec()))
}

struct LayerTape {
    n1: NormCache,
    a_in: Tensor,
    attn: AttnCache,
    ctx: Tensor,
    n2: NormCache,
    m_in: Tensor,
    f1: Tensor,
    g: Tensor,
}

struct Tape {
    inputs: Vec<usize>,
    labels: Vec<usize>,
    layers: Vec<LayerTape>,
    nf: NormCache,
    head_in: Tensor,
    logits: Tensor,
}

/// Reference model holding weights and the forward tapes awaiting backward.
pub struct Reference {
    pub cfg: ModelConfig,
    pub params: Params,
    tapes: HashMap<u64, Tape>,
}

pub struct StepResult {
    pub losses: Vec<f64>,
    pub main_grads: Params,
}

fn finite(t: &Tensor, what: &str) -> Result<(), NnError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(what.to_string()))
    }
}

impl Reference {
    pub fn new(cfg: ModelConfig) -> Result<Self, NnError> {
        let params = Params::init(&cfg)?;
        Ok(Self { cfg, params, tapes: HashMap::new() })
    }

    pub fn with_params(cfg: ModelConfig, params: Params) -> Self {
        Self { cfg, params, tapes: HashMap::new() }
    }

    /// Forward pass of microbatch `mb`; returns the mean token loss.
    pub fn forward(&mut self, mb: u64, inputs: &[usize], labels: &[usize], tr: &mut Tracer) -> Result<f64, NnError> {
        let cfg = &self.cfg;
        let pol = cfg.precision;
        let (s, d) = (cfg.seq, cfg.hidden);
        let pos: Vec<usize> = (0..s).collect();
        let at = &SingleDevice;
        let emb = ops::embedding_lookup(&self.params.word, inputs, 0);
        let mut x = ops::add(&emb, &self.params.pos, pol);
        tr.network_input(at, mb, "model.embedding", "Embedding", &[s, d], std::slice::from_mut(&mut x))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, lp) in self.params.layers.iter().enumerate() {
            let pre = layer_prefix(l);
            let m = |suffix: &str| format!("{pre}.{suffix}");
            let mut n1_in = x.clone();
            tr.module_input(at, mb, &m("input_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut n1_in))?;
            let (mut y1, n1) = ops::layer_norm(&n1_in, &lp.input_norm.weight, &lp.input_norm.bias, pol);
            tr.module_output(at, mb, &m("input_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut y1))?;

            let mut a_in = y1;
            tr.module_input(at, mb, &m("self_attention"), "SelfAttention", &[s, d], std::slice::from_mut(&mut a_in))?;
            let q = ops::linear(&a_in, &lp.q, pol);
            let k = ops::linear(&a_in, &lp.k, pol);
            let v = ops::linear(&a_in, &lp.v, pol);
            let (ctx, attn) = ops::attention(&q, &k, &v, &pos, &pos, cfg.heads, pol);
            let mut o = ops::linear(&ctx, &lp.out, pol);
            tr.module_output(at, mb, &m("self_attention"), "SelfAttention", &[s, d], std::slice::from_mut(&mut o))?;
            let h = ops::add(&x, &o, pol);

            let mut n2_in = h.clone();
            tr.module_input(at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut n2_in))?;
            let (mut y2, n2) = ops::layer_norm(&n2_in, &lp.pre_mlp_norm.weight, &lp.pre_mlp_norm.bias, pol);
            tr.module_output(at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut y2))?;

            let mut m_in = y2;
            tr.module_input(at, mb, &m("mlp"), "MLP", &[s, d], std::slice::from_mut(&mut m_in))?;
            let f1 = ops::linear(&m_in, &lp.fc1, pol);
            let g = ops::gelu(&f1, pol);
            let mut f2 = ops::linear(&g, &lp.fc2, pol);
            tr.module_output(at, mb, &m("mlp"), "MLP", &[s, d], std::slice::from_mut(&mut f2))?;
            let out = ops::add(&h, &f2, pol);
            finite(&out, &pre)?;
            layers.push(LayerTape { n1, a_in, attn, ctx, n2, m_in, f1, g });
            x = out;
        }
        let fp = &self.params.final_norm;
        let mut nf_in = x;
        tr.module_input(at, mb, "model.final_norm", "LayerNorm", &[s, d], std::slice::from_mut(&mut nf_in))?;
        let (mut yf, nf) = ops::layer_norm(&nf_in, &fp.weight, &fp.bias, pol);
        tr.module_output(at, mb, "model.final_norm", "LayerNorm", &[s, d], std::slice::from_mut(&mut yf))?;

        let mut head_in = yf;
        tr.module_input(at, mb, "model.lm_head", "LMHead", &[s, d], std::slice::from_mut(&mut head_in))?;
        let mut logits = ops::linear(&head_in, &self.params.word.transpose(), pol);
        tr.module_output(at, mb, "model.lm_head", "LMHead", &[s, cfg.vocab], std::slice::from_mut(&mut logits))?;
        let (loss, _) = ops::cross_entropy(&logits, labels, s, pol);
        let loss = loss / s as f64;
        if !loss.is_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        self.tapes.insert(
            mb,
            Tape { inputs: inputs.to_vec(), labels: labels.to_vec(), layers, nf, head_in, logits },
        );
        Ok(loss)
    }

    /// Backward pass of a previously forwarded microbatch; returns its
    /// parameter gradients.
    pub fn backward(&mut self, mb: u64, tr: &mut Tracer) -> Result<Params, NnError> {
        let tape = self.tapes.remove(&mb).ok_or(NnError::MissingTape(mb))?;
        let cfg = &self.cfg;
        let pol = cfg.precision;
        let (s, d) = (cfg.seq, cfg.hidden);
        let at = &SingleDevice;
        let p = &self.params;
        let mut grads = p.zeros_like();

        let (_, mut dlogits) = ops::cross_entropy(&tape.logits, &tape.labels, s, pol);
        tr.grad_output(at, mb, "model.lm_head", "LMHead", &[s, cfg.vocab], std::slice::from_mut(&mut dlogits))?;
        let (mut dhead, dwt) = ops::linear_backward(&tape.head_in, &p.word.transpose(), &dlogits, pol);
        let dword_head = dwt.transpose();
        tr.grad_input(at, mb, "model.lm_head", "LMHead", &[s, d], std::slice::from_mut(&mut dhead))?;

        tr.grad_output(at, mb, "model.final_norm", "LayerNorm", &[s, d], std::slice::from_mut(&mut dhead))?;
        let (mut dx, dg, db) = ops::layer_norm_backward(&dhead, &tape.nf, &p.final_norm.weight, pol);
        grads.final_norm = NormParams { weight: dg, bias: db };
        tr.grad_input(at, mb, "model.final_norm", "LayerNorm", &[s, d], std::slice::from_mut(&mut dx))?;

        for (l, lt) in tape.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let gl = &mut grads.layers[l];
            let pre = layer_prefix(l);
            let m = |suffix: &str| format!("{pre}.{suffix}");

            let mut df2 = dx.clone();
            tr.grad_output(at, mb, &m("mlp"), "MLP", &[s, d], std::slice::from_mut(&mut df2))?;
            let (dg_, dfc2) = ops::linear_backward(&lt.g, &lp.fc2, &df2, pol);
            let df1 = ops::gelu_backward(&lt.f1, &dg_, pol);
            let (mut dm_in, dfc1) = ops::linear_backward(&lt.m_in, &lp.fc1, &df1, pol);
            gl.fc1 = dfc1;
            gl.fc2 = dfc2;
            tr.grad_input(at, mb, &m("mlp"), "MLP", &[s, d], std::slice::from_mut(&mut dm_in))?;

            tr.grad_output(at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut dm_in))?;
            let (mut dn2, dw, db) = ops::layer_norm_backward(&dm_in, &lt.n2, &lp.pre_mlp_norm.weight, pol);
            gl.pre_mlp_norm = NormParams { weight: dw, bias: db };
            tr.grad_input(at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut dn2))?;
            let dh = ops::add(&dx, &dn2, pol);

            let mut dout = dh.clone();
            tr.grad_output(at, mb, &m("self_attention"), "SelfAttention", &[s, d], std::slice::from_mut(&mut dout))?;
            let (dctx, dwo) = ops::linear_backward(&lt.ctx, &lp.out, &dout, pol);
            let (dq, dk, dv) = ops::attention_backward(&dctx, &lt.attn, cfg.heads, pol);
            let (dxq, dwq) = ops::linear_backward(&lt.a_in, &lp.q, &dq, pol);
            let (dxk, dwk) = ops::linear_backward(&lt.a_in, &lp.k, &dk, pol);
            let (dxv, dwv) = ops::linear_backward(&lt.a_in, &lp.v, &dv, pol);
            let mut da = ops::add(&ops::add(&dxq, &dxk, pol), &dxv, pol);
            gl.q = dwq;
            gl.k = dwk;
            gl.v = dwv;
            gl.out = dwo;
            tr.grad_input(at, mb, &m("self_attention"), "SelfAttention", &[s, d], std::slice::from_mut(&mut da))?;

            tr.grad_output(at, mb, &m("input_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut da))?;
            let (mut dn1, dw, db) = ops::layer_norm_backward(&da, &lt.n1, &lp.input_norm.weight, pol);
            gl.input_norm = NormParams { weight: dw, bias: db };
            tr.grad_input(at, mb, &m("input_norm"), "LayerNorm", &[s, d], std::slice::from_mut(&mut dn1))?;
            dx = ops::add(&dh, &dn1, pol);
            finite(&dx, &pre)?;
        }
        tr.grad_output(at, mb, "model.embedding", "Embedding", &[s, d], std::slice::from_mut(&mut dx))?;
        grads.pos = pol.store(dx.clone());
        let dword_lookup = ops::embedding_backward(&dx, &tape.inputs, 0, cfg.vocab, pol);
        grads.word = ops::add(&dword_head, &dword_lookup, pol);
        grads.for_each(|_, t| debug_assert!(t.all_finite()));
        Ok(grads)
    }

    /// One training iteration over global microbatches `0..microbatches`:
    /// forward and backward each, accumulate main gradients, then apply
    /// `p ← p − lr·main/microbatches`.
    pub fn train_step(&mut self, microbatches: u64, lr: f64, tr: &mut Tracer) -> Result<StepResult, NnError> {
        let at = &SingleDevice;
        record_params(&self.params, TensorKind::Param, 0, false, tr, at)?;
        let mut main = self.params.zeros_like();
        let mut losses = Vec::new();
        for mb in 0..microbatches {
            let (inputs, labels) = microbatch_tokens(&self.cfg, mb)?;
            losses.push(self.forward(mb, &inputs, &labels, tr)?);
            let g = self.backward(mb, tr)?;
            record_params(&g, TensorKind::ParamGrad, mb, false, tr, at)?;
            main.zip_mut(&g, |_, acc, x| acc.add_assign(x).expect("same layout"));
        }
        record_params(&main, TensorKind::MainGrad, 0, false, tr, at)?;
        let pol = self.cfg.precision;
        self.params
            .zip_mut(&main, |_, w, g| *w = pol.store(w.sub(&g.scale(lr / microbatches as f64)).expect("same layout")));
        record_params(&self.params, TensorKind::Param, 0, true, tr, at)?;
        Ok(StepResult { losses, main_grads: main })
    }
}

fn record_params(
    params: &Params,
    kind: TensorKind,
    mb: u64,
    after_step: bool,
    tr: &mut Tracer,
    at: &SingleDevice,
) -> Result<(), NnError> {
    let mut err = None;
    params.for_each(|name, t| {
        if err.is_none() {
            if let Err(e) = tr.parameter(at, kind, mb, name, t.shape(), std::slice::from_ref(t), after_step) {
                err = Some(e);
            }
        }
    });
    err.map_or(Ok(()), |e| Err(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PrecisionPolicy;
    use crate::trace::TracerOptions;

    #[test]
    fn backward_without_forward_fails() {
        let mut r = Reference::new(ModelConfig::small(1)).unwrap();
        assert!(matches!(r.backward(3, &mut Tracer::disabled()), Err(NnError::MissingTape(3))));
    }

    #[test]
    fn initial_loss_near_uniform() {
        let cfg = ModelConfig { init_std: Some(0.02), ..ModelConfig::small(2) };
        let mut r = Reference::new(cfg.clone()).unwrap();
        let (i, l) = microbatch_tokens(&cfg, 0).unwrap();
        let loss = r.forward(0, &i, &l, &mut Tracer::disabled()).unwrap();
        assert!((loss - (cfg.vocab as f64).ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn step_is_deterministic_and_records_in_order() {
        let cfg = ModelConfig::small(2);
        let run = || {
            let mut r = Reference::new(cfg.clone()).unwrap();
            let mut tr = Tracer::new(TracerOptions::default());
            r.train_step(2, 0.1, &mut tr).unwrap();
            (r.params, tr.into_records())
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        let first_act = ra.iter().position(|r| r.id.kind == TensorKind::ActivationOut).unwrap();
        assert_eq!(ra[first_act].id.module, "model.embedding");
        assert!(ra.iter().any(|r| r.id.kind == TensorKind::MainGrad));
        assert!(ra.iter().any(|r| r.id.kind == TensorKind::Param && r.id.iteration == 1));
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ModelConfig { precision: PrecisionPolicy::Fp32, ..ModelConfig::small(1) };
        let mut r = Reference::new(cfg).unwrap();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..30 {
            let res = r.train_step(1, 0.5, &mut Tracer::disabled()).unwrap();
            first.get_or_insert(res.losses[0]);
            last = res.losses[0];
        }
        assert!(last < first.unwrap() - 0.5, "{first:?} -> {last}");
    }
}
