//! Tracing annotations: which module tensors are traced and along which
//! dimensions each parallel strategy splits them. Shard mappings are derived
//! from these annotations plus a rank's coordinates.

use serde::{Deserialize, Serialize};

use crate::canonical::{BoxPair, CanonicalError, ShardMapping, SliceBox, TensorKind};
use crate::parallel::ParallelConfig;

/// Dimension split by each parallel strategy, if any. `sp` only applies when
/// sequence parallelism is enabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cp: Option<usize>,
}

impl ShardSpec {
    pub const REPLICATED: ShardSpec = ShardSpec { tp: None, sp: None, cp: None };
    pub const SEQUENCE: ShardSpec = ShardSpec { tp: None, sp: Some(0), cp: Some(0) };
    pub const CONTEXT: ShardSpec = ShardSpec { tp: None, sp: None, cp: Some(0) };

    pub const fn tensor(dim: usize) -> ShardSpec {
        ShardSpec { tp: Some(dim), sp: None, cp: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub pattern: String,
    pub kinds: Vec<TensorKind>,
    #[serde(default)]
    pub shard: ShardSpec,
}

impl Annotation {
    pub fn new(pattern: &str, kinds: &[TensorKind], shard: ShardSpec) -> Self {
        Self { pattern: pattern.to_string(), kinds: kinds.to_vec(), shard }
    }
}

/// `*` matches any (possibly empty) run of characters, dots included.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations(pub Vec<Annotation>);

impl Annotations {
    /// First annotation covering `(module, kind)`.
    pub fn lookup(&self, module: &str, kind: TensorKind) -> Option<&Annotation> {
        self.0.iter().find(|a| a.kinds.contains(&kind) && glob_match(&a.pattern, module))
    }

    pub fn traces(&self, module: &str, kind: TensorKind) -> bool {
        self.lookup(module, kind).is_some()
    }
}

impl Default for Annotations {
    /// Layouts of the built-in toy transformer.
    fn default() -> Self {
        use TensorKind::*;
        let act = [ActivationIn, ActivationOut, ActivationGradIn, ActivationGradOut];
        let par = [Param, ParamGrad, MainGrad];
        Annotations(vec![
            Annotation::new("model.embedding", &[ActivationOut, ActivationGradOut], ShardSpec::SEQUENCE),
            Annotation::new("model.layers.*.input_norm", &act, ShardSpec::SEQUENCE),
            Annotation::new("model.layers.*.self_attention", &act, ShardSpec::SEQUENCE),
            Annotation::new("model.layers.*.pre_mlp_norm", &act, ShardSpec::SEQUENCE),
            Annotation::new("model.layers.*.mlp", &act, ShardSpec::SEQUENCE),
            Annotation::new("model.final_norm", &act, ShardSpec::SEQUENCE),
            Annotation::new("model.lm_head", &[ActivationIn, ActivationGradIn], ShardSpec::SEQUENCE),
            Annotation::new("model.lm_head", &[ActivationOut, ActivationGradOut], ShardSpec::CONTEXT),
            Annotation::new("model.embedding.word_embeddings.weight", &par, ShardSpec::tensor(0)),
            Annotation::new("*.self_attention.q.weight", &par, ShardSpec::tensor(1)),
            Annotation::new("*.self_attention.k.weight", &par, ShardSpec::tensor(1)),
            Annotation::new("*.self_attention.v.weight", &par, ShardSpec::tensor(1)),
            Annotation::new("*.self_attention.out.weight", &par, ShardSpec::tensor(0)),
            Annotation::new("*.mlp.fc1.weight", &par, ShardSpec::tensor(1)),
            Annotation::new("*.mlp.fc2.weight", &par, ShardSpec::tensor(0)),
            Annotation::new("*", &par, ShardSpec::REPLICATED),
        ])
    }
}

/// A run of `len` consecutive global indices starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    start: usize,
    len: usize,
}

/// Keep local positions `[part·q, (part+1)·q)` of a segment list.
fn split_contiguous(segs: &[Segment], parts: usize, part: usize) -> Result<Vec<Segment>, CanonicalError> {
    let total: usize = segs.iter().map(|s| s.len).sum();
    if total % parts != 0 {
        return Err(CanonicalError::MappingInvalid(format!("extent {total} not divisible by {parts}")));
    }
    let q = total / parts;
    let (lo, hi) = (part * q, (part + 1) * q);
    let mut out = Vec::new();
    let mut offset = 0;
    for s in segs {
        let (a, b) = (offset.max(lo), (offset + s.len).min(hi));
        if a < b {
            out.push(Segment { start: s.start + (a - offset), len: b - a });
        }
        offset += s.len;
    }
    Ok(out)
}

/// Load-balanced striping: the sequence is cut into `2·cp` chunks and rank
/// `r` holds chunks `r` and `2·cp − 1 − r`.
pub fn context_chunks(extent: usize, cp: usize, rank: usize) -> Result<Vec<(usize, usize)>, CanonicalError> {
    if cp == 1 {
        return Ok(vec![(0, extent)]);
    }
    if extent % (2 * cp) != 0 {
        return Err(CanonicalError::MappingInvalid(format!("extent {extent} not divisible by 2·cp = {}", 2 * cp)));
    }
    let c = extent / (2 * cp);
    Ok(vec![(rank * c, (rank + 1) * c), ((2 * cp - 1 - rank) * c, (2 * cp - rank) * c)])
}

/// Shard mapping of a tensor with `global_shape` on the rank at
/// (`tp_rank`, `cp_rank`). Context striping is applied first, then the
/// sequence-parallel split of the local sequence, then tensor parallelism.
pub fn shard_mapping(
    global_shape: &[usize],
    spec: &ShardSpec,
    pc: &ParallelConfig,
    tp_rank: usize,
    cp_rank: usize,
) -> Result<ShardMapping, CanonicalError> {
    let mut per_dim: Vec<Vec<Segment>> =
        global_shape.iter().map(|&n| vec![Segment { start: 0, len: n }]).collect();
    let check_dim = |d: usize| {
        if d >= global_shape.len() {
            Err(CanonicalError::MappingInvalid(format!("shard dim {d} out of range for {global_shape:?}")))
        } else {
            Ok(d)
        }
    };
    if spec.tp.is_some() && spec.sp.is_some() && pc.sp && pc.tp > 1 {
        return Err(CanonicalError::MappingInvalid("tensor and sequence parallelism cannot both split one tensor".into()));
    }
    if let (Some(d), true) = (spec.cp, pc.cp > 1) {
        let d = check_dim(d)?;
        per_dim[d] = context_chunks(global_shape[d], pc.cp, cp_rank)?
            .into_iter()
            .map(|(s, e)| Segment { start: s, len: e - s })
            .collect();
    }
    if let (Some(d), true) = (spec.sp, pc.sp && pc.tp > 1) {
        let d = check_dim(d)?;
        per_dim[d] = split_contiguous(&per_dim[d], pc.tp, tp_rank)?;
    }
    if let (Some(d), true) = (spec.tp, pc.tp > 1) {
        let d = check_dim(d)?;
        per_dim[d] = split_contiguous(&per_dim[d], pc.tp, tp_rank)?;
    }
    let local_shape: Vec<usize> = per_dim.iter().map(|s| s.iter().map(|g| g.len).sum()).collect();
    // Cartesian product of per-dimension segments, tracking local offsets.
    let mut pairs = vec![(Vec::new(), Vec::new())];
    for segs in &per_dim {
        let mut next = Vec::with_capacity(pairs.len() * segs.len());
        for (local, global) in &pairs {
            let mut off = 0;
            for s in segs {
                let mut l: Vec<(usize, usize)> = Vec::clone(local);
                let mut g: Vec<(usize, usize)> = Vec::clone(global);
                l.push((off, off + s.len));
                g.push((s.start, s.start + s.len));
                next.push((l, g));
                off += s.len;
            }
        }
        pairs = next;
    }
    Ok(ShardMapping {
        local_shape,
        global_shape: global_shape.to_vec(),
        pairs: pairs
            .into_iter()
            .map(|(l, g)| BoxPair { local: SliceBox(l), global: SliceBox(g) })
            .collect(),
    })
}

/// Number of ranks holding an identical copy of each shard.
pub fn replica_count(spec: &ShardSpec, kind: TensorKind, pc: &ParallelConfig) -> usize {
    let tp_split = spec.tp.is_some() || (spec.sp.is_some() && pc.sp);
    let mut n = 1;
    if !tp_split {
        n *= pc.tp;
    }
    if spec.cp.is_none() {
        n *= pc.cp;
    }
    if matches!(kind, TensorKind::Param | TensorKind::MainGrad) {
        n *= pc.dp;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::validate_mapping;

    fn pc(tp: usize, cp: usize, sp: bool) -> ParallelConfig {
        ParallelConfig { tp, cp, sp, ..ParallelConfig::default() }
    }

    #[test]
    fn glob() {
        assert!(glob_match("model.layers.*.mlp", "model.layers.12.mlp"));
        assert!(!glob_match("model.layers.*.mlp", "model.layers.1.mlp.fc1.weight"));
        assert!(glob_match("*norm.*", "model.layers.0.input_norm.weight"));
        assert!(glob_match("*", ""));
        assert!(!glob_match("a*b", "ac"));
        assert!(glob_match("a*b*c", "aXbYbZc"));
    }

    #[test]
    fn default_lookup() {
        let a = Annotations::default();
        let spec = a.lookup("model.layers.3.self_attention.out.weight", TensorKind::Param).unwrap().shard;
        assert_eq!(spec, ShardSpec::tensor(0));
        let spec = a.lookup("model.layers.3.input_norm.bias", TensorKind::MainGrad).unwrap().shard;
        assert_eq!(spec, ShardSpec::REPLICATED);
        assert!(a.lookup("model.embedding", TensorKind::ActivationIn).is_none());
    }

    #[test]
    fn context_striping_with_sequence_split() {
        // seq 8, cp 2, tp 2 with SP: cp0 holds [0,2)+[6,8); its SP halves are [0,2) and [6,8).
        let p = pc(2, 2, true);
        let m = shard_mapping(&[8, 3], &ShardSpec::SEQUENCE, &p, 1, 0).unwrap();
        validate_mapping(&m).unwrap();
        assert_eq!(m.local_shape, vec![2, 3]);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].global.0, vec![(6, 8), (0, 3)]);
        // Without SP the CP shard keeps both stripes.
        let m = shard_mapping(&[8, 3], &ShardSpec::SEQUENCE, &pc(2, 2, false), 1, 1).unwrap();
        assert_eq!(m.pairs.iter().map(|p| p.global.0[0]).collect::<Vec<_>>(), vec![(2, 4), (4, 6)]);
        assert_eq!(replica_count(&ShardSpec::SEQUENCE, TensorKind::ActivationOut, &pc(2, 2, false)), 2);
        // Uneven SP split straddles both stripes.
        let m = shard_mapping(&[12, 1], &ShardSpec::SEQUENCE, &pc(3, 2, true), 1, 0).unwrap();
        assert_eq!(m.pairs.iter().map(|p| p.global.0[0]).collect::<Vec<_>>(), vec![(2, 3), (9, 10)]);
    }

    #[test]
    fn tensor_split_and_replicas() {
        let p = ParallelConfig { dp: 2, tp: 2, ..ParallelConfig::default() };
        let m = shard_mapping(&[4, 6], &ShardSpec::tensor(1), &p, 1, 0).unwrap();
        assert_eq!(m.pairs[0].global.0, vec![(0, 4), (3, 6)]);
        assert_eq!(replica_count(&ShardSpec::tensor(1), TensorKind::Param, &p), 2);
        assert_eq!(replica_count(&ShardSpec::REPLICATED, TensorKind::MainGrad, &p), 4);
        assert_eq!(replica_count(&ShardSpec::REPLICATED, TensorKind::ParamGrad, &p), 2);
        assert!(shard_mapping(&[5, 6], &ShardSpec::tensor(0), &p, 0, 0).is_err());
    }

    #[test]
    fn tensor_and_sequence_split_together_is_rejected() {
        let both = ShardSpec { tp: Some(1), sp: Some(0), cp: None };
        assert!(shard_mapping(&[4, 4], &both, &pc(2, 1, true), 0, 0).is_err());
        assert!(shard_mapping(&[4, 4], &both, &pc(2, 1, false), 0, 0).is_ok());
    }
}
