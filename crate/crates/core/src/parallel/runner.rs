use std::collections::HashMap;

use super::bugs::{BugId, BugInjection, BugSet};
use super::collective::{all_gather, all_reduce, reduce_scatter, ReduceOp};
use super::{ParallelConfig, ParallelError};
use crate::annotation::{replica_count, shard_mapping, Annotations, ShardSpec};
use crate::canonical::{canonical_layer_index, TensorKind};
use crate::nn::ops::{self, AttnCache, NormCache};
use crate::nn::{is_sequence_parallel_param, layer_prefix, microbatch_tokens, ModelConfig, NnError, Params};
use crate::rng::extract_shard;
use crate::tensor::{FloatFormat, PrecisionPolicy, Tensor};
use crate::trace::{Placement, Placer, RankMeta, TraceError, Tracer};

/// One tensor per rank of a (cp × tp) grid, indexed `c·tp + t`.
type Shards = Vec<Tensor>;

struct GridPlacer<'a> {
    pc: &'a ParallelConfig,
    dp: usize,
    pp: usize,
    vp: usize,
}

impl Placer for GridPlacer<'_> {
    fn place(&self, shape: &[usize], spec: &ShardSpec, kind: TensorKind) -> Result<Vec<Placement>, TraceError> {
        let replicas = replica_count(spec, kind, self.pc) as u16;
        let mut out = Vec::with_capacity(self.pc.cp * self.pc.tp);
        for c in 0..self.pc.cp {
            for t in 0..self.pc.tp {
                let rank = RankMeta {
                    dp: self.dp as u16,
                    tp: t as u16,
                    pp: self.pp as u16,
                    vp: self.vp as u16,
                    cp: c as u16,
                    sp: if self.pc.sequence_parallel() { t as u16 } else { 0 },
                };
                out.push(Placement { rank, mapping: shard_mapping(shape, spec, self.pc, t, c)?, replicas });
            }
        }
        Ok(out)
    }
}

struct LayerTape {
    n1: Vec<NormCache>,
    a_full: Shards,
    attn: Vec<AttnCache>,
    ctx: Shards,
    n2: Vec<NormCache>,
    m_full: Shards,
    f1: Shards,
    g: Shards,
}

struct Tape {
    ids: Vec<Vec<usize>>,
    labels: Vec<Vec<usize>>,
    layers: HashMap<usize, LayerTape>,
    nf: Vec<NormCache>,
    head_full: Shards,
    logits: Shards,
}

/// Outcome of one emulated training iteration.
pub struct CandidateRun {
    /// Mean loss per global microbatch.
    pub losses: Vec<f64>,
}

struct Runner<'a> {
    cfg: &'a ModelConfig,
    pc: &'a ParallelConfig,
    pol: PrecisionPolicy,
    fmt: Option<FloatFormat>,
    bugs: BugSet,
    ann: Annotations,
    tp: usize,
    cp: usize,
    sp: bool,
    cp_pos: Vec<Vec<usize>>,
    loc_pos: Vec<Vec<usize>>,
    full_shapes: HashMap<String, Vec<usize>>,
    stash: HashMap<String, Shards>,
}

fn positions(m: &crate::canonical::ShardMapping) -> Vec<usize> {
    m.pairs.iter().flat_map(|p| p.global.0[0].0..p.global.0[0].1).collect()
}

fn each<T>(n: usize, f: impl FnMut(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ModelConfig, pc: &'a ParallelConfig, bugs: &[BugInjection], ann: Annotations) -> Result<Self, ParallelError> {
        let (tp, cp) = (pc.tp, pc.cp);
        let seq = [cfg.seq, 1];
        let no_sp = ParallelConfig { sp: false, ..pc.clone() };
        let cp_pos = (0..cp)
            .map(|c| Ok(positions(&shard_mapping(&seq, &ShardSpec::SEQUENCE, &no_sp, 0, c)?)))
            .collect::<Result<_, ParallelError>>()?;
        let loc_pos = (0..cp * tp)
            .map(|g| Ok(positions(&shard_mapping(&seq, &ShardSpec::SEQUENCE, pc, g % tp, g / tp)?)))
            .collect::<Result<_, ParallelError>>()?;
        Ok(Self {
            cfg,
            pc,
            pol: cfg.precision,
            fmt: cfg.precision.storage(),
            bugs: BugSet::new(bugs),
            ann,
            tp,
            cp,
            sp: pc.sequence_parallel(),
            cp_pos,
            loc_pos,
            full_shapes: HashMap::new(),
            stash: HashMap::new(),
        })
    }

    fn ng(&self) -> usize {
        self.tp * self.cp
    }

    fn param_spec(&self, name: &str) -> ShardSpec {
        self.ann.lookup(name, TensorKind::Param).map_or(ShardSpec::REPLICATED, |a| a.shard)
    }

    fn shard_params(&mut self, full: &Params) -> Result<Vec<Params>, ParallelError> {
        full.for_each(|n, t| {
            self.full_shapes.insert(n.to_string(), t.shape().to_vec());
        });
        let mut out = Vec::with_capacity(self.ng());
        for g in 0..self.ng() {
            let mut p = full.clone();
            let mut err = None;
            p.for_each_mut(|n, t| {
                let spec = self.param_spec(n);
                match shard_mapping(t.shape(), &spec, self.pc, g % self.tp, g / self.tp)
                    .map_err(ParallelError::from)
                    .and_then(|m| extract_shard(t, &m).map_err(|e| ParallelError::Nn(NnError::Gen(e))))
                {
                    Ok(s) => *t = s,
                    Err(e) => err = err.take().or(Some(e)),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Pipeline coordinates `(stage, chunk)` of a global layer.
    fn layer_home(&self, l: usize) -> (usize, usize) {
        let k = self.cfg.layers / (self.pc.pp * self.pc.vp);
        let chunk = l / k;
        (chunk % self.pc.pp, chunk / self.pc.pp)
    }

    fn param_home(&self, name: &str) -> (usize, usize) {
        if let Some(rest) = name.strip_prefix("model.layers.") {
            let l: usize = rest.split('.').next().and_then(|s| s.parse().ok()).expect("layer parameter name");
            self.layer_home(l)
        } else if name.starts_with("model.final_norm") {
            (self.pc.pp - 1, self.pc.vp - 1)
        } else {
            (0, 0)
        }
    }

    fn placer(&self, dp: usize, pp: usize, vp: usize) -> GridPlacer<'a> {
        GridPlacer { pc: self.pc, dp, pp, vp }
    }

    /// All-gather of sequence-parallel shards within each tensor-parallel group.
    fn sp_gather(&self, xs: &Shards, reversed: bool) -> Result<Shards, ParallelError> {
        if !self.sp {
            return Ok(xs.clone());
        }
        let mut out = xs.clone();
        for c in 0..self.cp {
            let mut parts: Vec<Tensor> = xs[c * self.tp..(c + 1) * self.tp].to_vec();
            if reversed {
                parts.reverse();
            }
            let full = all_gather(&parts, 0)?;
            for t in 0..self.tp {
                out[c * self.tp + t] = full.clone();
            }
        }
        Ok(out)
    }

    /// Sum of tensor-parallel partials: all-reduce, or reduce-scatter along
    /// the sequence under sequence parallelism. `skip` leaves partials as-is.
    fn tp_reduce(&self, parts: Shards, reversed: bool, skip: bool) -> Result<Shards, ParallelError> {
        let mut out = parts.clone();
        for c in 0..self.cp {
            let group = &parts[c * self.tp..(c + 1) * self.tp];
            if skip {
                if self.sp {
                    for t in 0..self.tp {
                        let q = group[t].rows() / self.tp;
                        out[c * self.tp + t] = group[t].rows_range(t * q, (t + 1) * q);
                    }
                }
                continue;
            }
            if self.sp {
                let pieces = reduce_scatter(group, ReduceOp::Sum, self.fmt)?;
                for t in 0..self.tp {
                    let src = if reversed { self.tp - 1 - t } else { t };
                    out[c * self.tp + t] = pieces[src].clone();
                }
            } else {
                let full = all_reduce(group, ReduceOp::Sum, self.fmt)?;
                for t in 0..self.tp {
                    out[c * self.tp + t] = full.clone();
                }
            }
        }
        Ok(out)
    }

    /// Gather K or V across context ranks. With `reorder` the rows are put
    /// back into sequence order; otherwise they stay in rank order.
    fn cp_gather(&self, xs: &Shards, reorder: bool) -> Result<Shards, ParallelError> {
        let mut out = xs.clone();
        let order: Vec<usize> = self.cp_pos.concat();
        let mut perm: Vec<usize> = (0..order.len()).collect();
        perm.sort_by_key(|&i| order[i]);
        for t in 0..self.tp {
            let parts: Vec<Tensor> = (0..self.cp).map(|c| xs[c * self.tp + t].clone()).collect();
            let mut full = all_gather(&parts, 0)?;
            if reorder {
                full = full.select_rows(&perm);
            }
            for c in 0..self.cp {
                out[c * self.tp + t] = full.clone();
            }
        }
        Ok(out)
    }

    /// Backward of `cp_gather`: sum contributions over context ranks and
    /// keep each rank's own rows.
    fn cp_scatter(&self, grads: &Shards, reorder: bool) -> Result<Shards, ParallelError> {
        let mut out = grads.clone();
        for t in 0..self.tp {
            let parts: Vec<Tensor> = (0..self.cp).map(|c| grads[c * self.tp + t].clone()).collect();
            let full = all_reduce(&parts, ReduceOp::Sum, self.fmt)?;
            let mut offset = 0;
            for c in 0..self.cp {
                let n = self.cp_pos[c].len();
                out[c * self.tp + t] = if reorder {
                    full.select_rows(&self.cp_pos[c])
                } else {
                    full.rows_range(offset, offset + n)
                };
                offset += n;
            }
        }
        Ok(out)
    }

    /// Returns the input a module actually computes on: the previous local
    /// microbatch's when a stale-input bug targets it.
    fn module_input(&mut self, module: &str, local_mb: usize, x: Shards) -> Shards {
        if !self.bugs.hits(BugId::WdStaleInput, module) {
            return x;
        }
        let prev = self.stash.insert(module.to_string(), x.clone());
        match prev {
            Some(p) if local_mb > 0 => p,
            _ => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        params: &[Params],
        dp: usize,
        local_mb: usize,
        mb: u64,
        inputs: &[usize],
        labels: &[usize],
        tr: &mut Tracer,
    ) -> Result<(f64, Tape), ParallelError> {
        let (cfg, pol, tp, ng) = (self.cfg, self.pol, self.tp, self.ng());
        let (s, d) = (cfg.seq, cfg.hidden);
        let vt = cfg.vocab / tp;
        let heads = cfg.heads / tp;
        let ids: Vec<Vec<usize>> = self.cp_pos.iter().map(|ps| ps.iter().map(|&p| inputs[p]).collect()).collect();
        let lab: Vec<Vec<usize>> = self.cp_pos.iter().map(|ps| ps.iter().map(|&p| labels[p]).collect()).collect();

        let at = self.placer(dp, 0, 0);
        let partial = each(ng, |g| ops::embedding_lookup(&params[g].word, &ids[g / tp], (g % tp) * vt));
        let mut emb = self.tp_reduce(partial, false, false)?;
        if tp > 1 && self.bugs.hits(BugId::WdWrongScale, "model.embedding") {
            emb = emb.iter().map(|e| pol.store(e.scale(tp as f64))).collect();
        }
        let mut x = each(ng, |g| ops::add(&emb[g], &params[g].pos.select_rows(&self.loc_pos[g]), pol));
        tr.network_input(&at, mb, "model.embedding", "Embedding", &[s, d], &mut x)?;

        let (pp, vp) = (self.pc.pp, self.pc.vp);
        let k = cfg.layers / (pp * vp);
        let mut layers = HashMap::new();
        for chunk in 0..pp * vp {
            let (stage, v) = (chunk % pp, chunk / pp);
            let at = self.placer(dp, stage, v);
            for local in 0..k {
                let l = canonical_layer_index(stage, v, local, pp, vp, k)?;
                let pre = layer_prefix(l);
                let m = |suffix: &str| format!("{pre}.{suffix}");
                let lp = |g: usize| &params[g].layers[l];

                let mut n1_in = x.clone();
                tr.module_input(&at, mb, &m("input_norm"), "LayerNorm", &[s, d], &mut n1_in)?;
                let n1_in = self.module_input(&m("input_norm"), local_mb, n1_in);
                let (mut y1, n1): (Shards, Vec<_>) = (0..ng)
                    .map(|g| ops::layer_norm(&n1_in[g], &lp(g).input_norm.weight, &lp(g).input_norm.bias, pol))
                    .unzip();
                tr.module_output(&at, mb, &m("input_norm"), "LayerNorm", &[s, d], &mut y1)?;

                let attn_name = m("self_attention");
                let mut a_in = y1;
                tr.module_input(&at, mb, &attn_name, "SelfAttention", &[s, d], &mut a_in)?;
                let a_in = self.module_input(&attn_name, local_mb, a_in);
                let a_full = self.sp_gather(&a_in, false)?;
                let q = each(ng, |g| ops::linear(&a_full[g], &lp(g).q, pol));
                let kk = each(ng, |g| ops::linear(&a_full[g], &lp(g).k, pol));
                let vv = each(ng, |g| ops::linear(&a_full[g], &lp(g).v, pol));
                let reorder = !self.bugs.hits(BugId::WdLayout, &attn_name);
                let (kf, vf) = (self.cp_gather(&kk, reorder)?, self.cp_gather(&vv, reorder)?);
                let k_pos: Vec<usize> = (0..s).collect();
                let (ctx, attn): (Shards, Vec<_>) = (0..ng)
                    .map(|g| ops::attention(&q[g], &kf[g], &vf[g], &self.cp_pos[g / tp], &k_pos, heads, pol))
                    .unzip();
                let o_part = each(ng, |g| ops::linear(&ctx[g], &lp(g).out, pol));
                let mut o = self.tp_reduce(o_part, false, self.bugs.hits(BugId::McTpRowAllreduce, &attn_name))?;
                tr.module_output(&at, mb, &attn_name, "SelfAttention", &[s, d], &mut o)?;
                let h = each(ng, |g| ops::add(&x[g], &o[g], pol));

                let mut n2_in = h.clone();
                tr.module_input(&at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], &mut n2_in)?;
                let n2_in = self.module_input(&m("pre_mlp_norm"), local_mb, n2_in);
                let (mut y2, n2): (Shards, Vec<_>) = (0..ng)
                    .map(|g| ops::layer_norm(&n2_in[g], &lp(g).pre_mlp_norm.weight, &lp(g).pre_mlp_norm.bias, pol))
                    .unzip();
                tr.module_output(&at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], &mut y2)?;

                let mlp_name = m("mlp");
                let mut m_in = y2;
                tr.module_input(&at, mb, &mlp_name, "MLP", &[s, d], &mut m_in)?;
                let m_in = self.module_input(&mlp_name, local_mb, m_in);
                let m_full = self.sp_gather(&m_in, self.bugs.hits(BugId::WcWrongOrder, &mlp_name))?;
                let f1 = each(ng, |g| ops::linear(&m_full[g], &lp(g).fc1, pol));
                let gg = each(ng, |g| ops::gelu(&f1[g], pol));
                let f2_part = each(ng, |g| ops::linear(&gg[g], &lp(g).fc2, pol));
                let mut f2 = self.tp_reduce(f2_part, false, self.bugs.hits(BugId::McTpRowAllreduce, &mlp_name))?;
                tr.module_output(&at, mb, &mlp_name, "MLP", &[s, d], &mut f2)?;
                x = each(ng, |g| ops::add(&h[g], &f2[g], pol));
                if x.iter().any(|t| !t.all_finite()) {
                    return Err(NnError::NonFinite(pre).into());
                }
                layers.insert(l, LayerTape { n1, a_full, attn, ctx, n2, m_full, f1, g: gg });
            }
        }

        let at = self.placer(dp, pp - 1, vp - 1);
        let mut nf_in = x;
        tr.module_input(&at, mb, "model.final_norm", "LayerNorm", &[s, d], &mut nf_in)?;
        let nf_in = self.module_input("model.final_norm", local_mb, nf_in);
        let (mut yf, nf): (Shards, Vec<_>) = (0..ng)
            .map(|g| ops::layer_norm(&nf_in[g], &params[g].final_norm.weight, &params[g].final_norm.bias, pol))
            .unzip();
        tr.module_output(&at, mb, "model.final_norm", "LayerNorm", &[s, d], &mut yf)?;

        let mut head_in = yf;
        tr.module_input(&at, mb, "model.lm_head", "LMHead", &[s, d], &mut head_in)?;
        let head_in = self.module_input("model.lm_head", local_mb, head_in);
        let head_full = self.sp_gather(&head_in, false)?;
        let part = each(ng, |g| ops::linear(&head_full[g], &params[g].word.transpose(), pol));
        let mut logits = part.clone();
        for c in 0..self.cp {
            let full = all_gather(&part[c * tp..(c + 1) * tp], 1)?;
            for t in 0..tp {
                logits[c * tp + t] = full.clone();
            }
        }
        tr.module_output(&at, mb, "model.lm_head", "LMHead", &[s, cfg.vocab], &mut logits)?;
        let loss: f64 = (0..self.cp).map(|c| ops::cross_entropy(&logits[c * tp], &lab[c], s, pol).0).sum::<f64>() / s as f64;
        if !loss.is_finite() {
            return Err(NnError::NonFinite("loss".into()).into());
        }
        Ok((loss, Tape { ids, labels: lab, layers, nf, head_full, logits }))
    }

    fn backward(&mut self, params: &[Params], dp: usize, mb: u64, tape: Tape, tr: &mut Tracer) -> Result<Vec<Params>, ParallelError> {
        let (cfg, pol, tp, ng) = (self.cfg, self.pol, self.tp, self.ng());
        let (s, d) = (cfg.seq, cfg.hidden);
        let vt = cfg.vocab / tp;
        let heads = cfg.heads / tp;
        let (pp, vp) = (self.pc.pp, self.pc.vp);
        let mut grads: Vec<Params> = params.iter().map(Params::zeros_like).collect();

        let at = self.placer(dp, pp - 1, vp - 1);
        let mut dlog = each(ng, |g| ops::cross_entropy(&tape.logits[g], &tape.labels[g / tp], s, pol).1);
        tr.grad_output(&at, mb, "model.lm_head", "LMHead", &[s, cfg.vocab], &mut dlog)?;
        let mut dh_part = Vec::with_capacity(ng);
        let mut dword_head = Vec::with_capacity(ng);
        for g in 0..ng {
            let t = g % tp;
            let dl = dlog[g].cols_range(t * vt, (t + 1) * vt);
            let (dh, dwt) = ops::linear_backward(&tape.head_full[g], &params[g].word.transpose(), &dl, pol);
            dh_part.push(dh);
            dword_head.push(dwt.transpose());
        }
        let mut dhead = self.tp_reduce(dh_part, false, false)?;
        tr.grad_input(&at, mb, "model.lm_head", "LMHead", &[s, d], &mut dhead)?;

        tr.grad_output(&at, mb, "model.final_norm", "LayerNorm", &[s, d], &mut dhead)?;
        let mut dx = Vec::with_capacity(ng);
        for g in 0..ng {
            let (dxg, dw, db) = ops::layer_norm_backward(&dhead[g], &tape.nf[g], &params[g].final_norm.weight, pol);
            dx.push(dxg);
            grads[g].final_norm.weight = dw;
            grads[g].final_norm.bias = db;
        }
        tr.grad_input(&at, mb, "model.final_norm", "LayerNorm", &[s, d], &mut dx)?;

        let k = cfg.layers / (pp * vp);
        for chunk in (0..pp * vp).rev() {
            let (stage, v) = (chunk % pp, chunk / pp);
            let at = self.placer(dp, stage, v);
            for local in (0..k).rev() {
                let l = canonical_layer_index(stage, v, local, pp, vp, k)?;
                let lt = &tape.layers[&l];
                let pre = layer_prefix(l);
                let m = |suffix: &str| format!("{pre}.{suffix}");
                let lp = |g: usize| &params[g].layers[l];

                let mlp_name = m("mlp");
                let mut df2 = dx.clone();
                tr.grad_output(&at, mb, &mlp_name, "MLP", &[s, d], &mut df2)?;
                let df2_full = self.sp_gather(&df2, false)?;
                let mut dm_part = Vec::with_capacity(ng);
                for g in 0..ng {
                    let (dgg, dfc2) = ops::linear_backward(&lt.g[g], &lp(g).fc2, &df2_full[g], pol);
                    let df1 = ops::gelu_backward(&lt.f1[g], &dgg, pol);
                    let (dm, dfc1) = ops::linear_backward(&lt.m_full[g], &lp(g).fc1, &df1, pol);
                    dm_part.push(dm);
                    grads[g].layers[l].fc1 = dfc1;
                    grads[g].layers[l].fc2 = dfc2;
                }
                let mut dm = self.tp_reduce(dm_part, self.bugs.hits(BugId::WcWrongOrder, &mlp_name), false)?;
                tr.grad_input(&at, mb, &mlp_name, "MLP", &[s, d], &mut dm)?;

                tr.grad_output(&at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], &mut dm)?;
                let mut dn2 = Vec::with_capacity(ng);
                for g in 0..ng {
                    let (dxg, dw, db) = ops::layer_norm_backward(&dm[g], &lt.n2[g], &lp(g).pre_mlp_norm.weight, pol);
                    dn2.push(dxg);
                    grads[g].layers[l].pre_mlp_norm.weight = dw;
                    grads[g].layers[l].pre_mlp_norm.bias = db;
                }
                tr.grad_input(&at, mb, &m("pre_mlp_norm"), "LayerNorm", &[s, d], &mut dn2)?;
                let dh = each(ng, |g| ops::add(&dx[g], &dn2[g], pol));

                let attn_name = m("self_attention");
                let mut dout = dh.clone();
                tr.grad_output(&at, mb, &attn_name, "SelfAttention", &[s, d], &mut dout)?;
                let dout_full = self.sp_gather(&dout, false)?;
                let reorder = !self.bugs.hits(BugId::WdLayout, &attn_name);
                let mut dq = Vec::with_capacity(ng);
                let mut dk = Vec::with_capacity(ng);
                let mut dv = Vec::with_capacity(ng);
                for g in 0..ng {
                    let (dctx, dwo) = ops::linear_backward(&lt.ctx[g], &lp(g).out, &dout_full[g], pol);
                    grads[g].layers[l].out = dwo;
                    let (a, b, c) = ops::attention_backward(&dctx, &lt.attn[g], heads, pol);
                    dq.push(a);
                    dk.push(b);
                    dv.push(c);
                }
                let (dk, dv) = (self.cp_scatter(&dk, reorder)?, self.cp_scatter(&dv, reorder)?);
                let mut da_part = Vec::with_capacity(ng);
                for g in 0..ng {
                    let (dxq, dwq) = ops::linear_backward(&lt.a_full[g], &lp(g).q, &dq[g], pol);
                    let (dxk, dwk) = ops::linear_backward(&lt.a_full[g], &lp(g).k, &dk[g], pol);
                    let (dxv, dwv) = ops::linear_backward(&lt.a_full[g], &lp(g).v, &dv[g], pol);
                    da_part.push(ops::add(&ops::add(&dxq, &dxk, pol), &dxv, pol));
                    let gl = &mut grads[g].layers[l];
                    gl.q = dwq;
                    gl.k = dwk;
                    gl.v = dwv;
                }
                let mut da = self.tp_reduce(da_part, false, false)?;
                tr.grad_input(&at, mb, &attn_name, "SelfAttention", &[s, d], &mut da)?;

                tr.grad_output(&at, mb, &m("input_norm"), "LayerNorm", &[s, d], &mut da)?;
                let mut dn1 = Vec::with_capacity(ng);
                for g in 0..ng {
                    let (dxg, dw, db) = ops::layer_norm_backward(&da[g], &lt.n1[g], &lp(g).input_norm.weight, pol);
                    dn1.push(dxg);
                    grads[g].layers[l].input_norm.weight = dw;
                    grads[g].layers[l].input_norm.bias = db;
                }
                tr.grad_input(&at, mb, &m("input_norm"), "LayerNorm", &[s, d], &mut dn1)?;
                dx = each(ng, |g| ops::add(&dh[g], &dn1[g], pol));
                if dx.iter().any(|t| !t.all_finite()) {
                    return Err(NnError::NonFinite(pre).into());
                }
            }
        }

        let at = self.placer(dp, 0, 0);
        tr.grad_output(&at, mb, "model.embedding", "Embedding", &[s, d], &mut dx)?;
        if tp > 1 && self.bugs.hits(BugId::WdWrongScale, "model.embedding") {
            dx = dx.iter().map(|e| pol.store(e.scale(tp as f64))).collect();
        }
        for g in 0..ng {
            let mut pos = Tensor::zeros(&[s, d]);
            for (i, &p) in self.loc_pos[g].iter().enumerate() {
                pos.row_mut(p).copy_from_slice(dx[g].row(i));
            }
            grads[g].pos = pol.store(pos);
        }
        let dx_full = self.sp_gather(&dx, false)?;
        for g in 0..ng {
            let lookup = ops::embedding_backward(&dx_full[g], &tape.ids[g / tp], (g % tp) * vt, vt, pol);
            grads[g].word = ops::add(&dword_head[g], &lookup, pol);
        }
        Ok(grads)
    }

    /// Records one tensor kind for every parameter, one record per grid rank.
    fn record(&self, tr: &mut Tracer, dp: usize, kind: TensorKind, mb: u64, after: bool, per_rank: &[Params]) -> Result<(), ParallelError> {
        let named: Vec<Vec<(String, Tensor)>> = per_rank.iter().map(Params::named).collect();
        for i in 0..named[0].len() {
            let name = &named[0][i].0;
            let (pp, vp) = self.param_home(name);
            let tensors: Vec<Tensor> = named.iter().map(|n| n[i].1.clone()).collect();
            tr.parameter(&self.placer(dp, pp, vp), kind, mb, name, &self.full_shapes[name], &tensors, after)?;
        }
        Ok(())
    }

    /// Per-microbatch gradients as seen after their reductions, used only for
    /// tracing: summed over context ranks and, for sequence-parallel
    /// parameters, over tensor ranks.
    fn traced_grads(&self, grads: &[Params]) -> Result<Vec<Params>, ParallelError> {
        let mut out = grads.to_vec();
        let (tp, cp) = (self.tp, self.cp);
        let named: Vec<Vec<(String, Tensor)>> = grads.iter().map(Params::named).collect();
        let mut done: Vec<Vec<Tensor>> = vec![Vec::new(); tp * cp];
        for i in 0..named[0].len() {
            let name = &named[0][i].0;
            let mut vals: Vec<Tensor> = named.iter().map(|n| n[i].1.clone()).collect();
            if cp > 1 {
                for t in 0..tp {
                    let parts: Vec<Tensor> = (0..cp).map(|c| vals[c * tp + t].clone()).collect();
                    let sum = all_reduce(&parts, ReduceOp::Sum, self.fmt)?;
                    for c in 0..cp {
                        vals[c * tp + t] = sum.clone();
                    }
                }
            }
            if self.sp && is_sequence_parallel_param(name) {
                for c in 0..cp {
                    let sum = all_reduce(&vals[c * tp..(c + 1) * tp], ReduceOp::Sum, self.fmt)?;
                    for t in 0..tp {
                        vals[c * tp + t] = sum.clone();
                    }
                }
            }
            for (g, v) in vals.into_iter().enumerate() {
                done[g].push(v);
            }
        }
        for (g, p) in out.iter_mut().enumerate() {
            let mut it = done[g].drain(..);
            p.for_each_mut(|_, t| *t = it.next().expect("same layout"));
        }
        Ok(out)
    }

    /// Gradient reductions after all microbatches: data- and context-parallel
    /// sum, then the tensor-parallel sum of sequence-parallel parameters.
    fn finalize(&self, main: &mut [Vec<Params>]) -> Result<(), ParallelError> {
        let (dp, tp, cp) = (self.pc.dp, self.tp, self.cp);
        let mut named: Vec<Vec<Vec<(String, Tensor)>>> =
            main.iter().map(|rs| rs.iter().map(Params::named).collect()).collect();
        let n_params = named[0][0].len();
        for i in 0..n_params {
            let name = named[0][0][i].0.clone();
            // Groups of data-parallel replicas reduced together.
            let dp_groups: Vec<Vec<usize>> = if self.bugs.hits(BugId::McDpGrad, &name) {
                (0..dp).map(|r| vec![r]).collect()
            } else if dp >= 2 && self.bugs.hits(BugId::WcWrongGroup, &name) {
                let half = dp / 2;
                (0..dp).collect::<Vec<_>>().chunks(half).map(|c| c.to_vec()).collect()
            } else {
                vec![(0..dp).collect()]
            };
            for t in 0..tp {
                for grp in &dp_groups {
                    let members: Vec<(usize, usize)> =
                        grp.iter().flat_map(|&r| (0..cp).map(move |c| (r, c * tp + t))).collect();
                    let parts: Vec<Tensor> = members.iter().map(|&(r, g)| named[r][g][i].1.clone()).collect();
                    let sum = all_reduce(&parts, ReduceOp::Sum, None)?;
                    for &(r, g) in &members {
                        named[r][g][i].1 = sum.clone();
                    }
                }
            }
            if self.sp && is_sequence_parallel_param(&name) && !self.bugs.hits(BugId::McSpNormGrad, &name) {
                let op = if self.bugs.hits(BugId::WcWrongReduceOp, &name) { ReduceOp::Avg } else { ReduceOp::Sum };
                for r in 0..dp {
                    for c in 0..cp {
                        let parts: Vec<Tensor> = (0..tp).map(|t| named[r][c * tp + t][i].1.clone()).collect();
                        let red = all_reduce(&parts, op, None)?;
                        for t in 0..tp {
                            named[r][c * tp + t][i].1 = red.clone();
                        }
                    }
                }
            }
        }
        for (r, ranks) in main.iter_mut().enumerate() {
            for (g, p) in ranks.iter_mut().enumerate() {
                let mut it = named[r][g].drain(..);
                p.for_each_mut(|_, t| *t = it.next().expect("same layout").1);
            }
        }
        Ok(())
    }
}

/// One training iteration of the emulated distributed run: every data-parallel
/// replica runs its microbatches through all pipeline chunks on its
/// (cp × tp) grid, gradients are reduced, and the optimizer steps with
/// `p ← p − lr·main/(dp·microbatches)`.
pub fn run_candidate(
    cfg: &ModelConfig,
    pc: &ParallelConfig,
    bugs: &[BugInjection],
    lr: f64,
    tr: &mut Tracer,
) -> Result<CandidateRun, ParallelError> {
    cfg.validate()?;
    pc.validate(cfg)?;
    let full = Params::init(cfg)?;
    let mut run = Runner::new(cfg, pc, bugs, tr.options().annotations.clone())?;
    let shards = run.shard_params(&full)?;
    let mut params: Vec<Vec<Params>> = vec![shards; pc.dp];
    for (r, ps) in params.iter().enumerate() {
        run.record(tr, r, TensorKind::Param, 0, false, ps)?;
    }
    let m = pc.microbatches;
    let mut losses = vec![0.0; pc.total_microbatches()];
    let mut main: Vec<Vec<Params>> = params.iter().map(|ps| ps.iter().map(Params::zeros_like).collect()).collect();
    for r in 0..pc.dp {
        run.stash.clear();
        for j in 0..m {
            let mb = (r * m + j) as u64;
            let (inputs, labels) = microbatch_tokens(cfg, mb)?;
            let (loss, tape) = run.forward(&params[r], r, j, mb, &inputs, &labels, tr)?;
            losses[mb as usize] = loss;
            let grads = run.backward(&params[r], r, mb, tape, tr)?;
            run.record(tr, r, TensorKind::ParamGrad, mb, false, &run.traced_grads(&grads)?)?;
            for (acc, g) in main[r].iter_mut().zip(&grads) {
                acc.zip_mut(g, |_, a, x| a.add_assign(x).expect("same layout"));
            }
        }
    }
    run.finalize(&mut main)?;
    let scale = lr / pc.total_microbatches() as f64;
    let pol = cfg.precision;
    for r in 0..pc.dp {
        run.record(tr, r, TensorKind::MainGrad, 0, false, &main[r])?;
        for (p, g) in params[r].iter_mut().zip(&main[r]) {
            p.zip_mut(g, |_, w, gr| *w = pol.store(w.sub(&gr.scale(scale)).expect("same layout")));
        }
        run.record(tr, r, TensorKind::Param, 0, true, &params[r])?;
    }
    Ok(CandidateRun { losses })
}
