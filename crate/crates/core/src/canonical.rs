//! Canonical tensor identifiers, pipeline layer remapping, shard mappings and
//! the shard merger with overlap/omission and replica checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, rel_err, FloatFormat, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CanonicalError {
    #[error("invalid shard mapping: {0}")]
    MappingInvalid(String),
    #[error("overlapping shards at index {index:?}")]
    Overlap { index: Vec<usize> },
    #[error("no shard covers index {index:?}")]
    Omission { index: Vec<usize> },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("cannot parse canonical id {0:?}")]
    Parse(String),
}

/// Which tensor of a module a record holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorKind {
    ActivationIn,
    ActivationOut,
    ActivationGradIn,
    ActivationGradOut,
    ParamGrad,
    MainGrad,
    Param,
}

impl TensorKind {
    pub const ALL: [TensorKind; 7] = [
        TensorKind::ActivationIn,
        TensorKind::ActivationOut,
        TensorKind::ActivationGradIn,
        TensorKind::ActivationGradOut,
        TensorKind::ParamGrad,
        TensorKind::MainGrad,
        TensorKind::Param,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::ActivationIn => "ActivationIn",
            TensorKind::ActivationOut => "ActivationOut",
            TensorKind::ActivationGradIn => "ActivationGradIn",
            TensorKind::ActivationGradOut => "ActivationGradOut",
            TensorKind::ParamGrad => "ParamGrad",
            TensorKind::MainGrad => "MainGrad",
            TensorKind::Param => "Param",
        }
    }

    pub fn is_parameter_side(self) -> bool {
        matches!(self, TensorKind::ParamGrad | TensorKind::MainGrad | TensorKind::Param)
    }
}

impl FromStr for TensorKind {
    type Err = CanonicalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TensorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CanonicalError::Parse(s.to_string()))
    }
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names one logical full tensor independently of how it is parallelized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalId {
    pub iteration: u64,
    pub microbatch: u64,
    pub kind: TensorKind,
    pub module: String,
}

impl CanonicalId {
    pub fn new(iteration: u64, microbatch: u64, kind: TensorKind, module: impl Into<String>) -> Self {
        Self { iteration, microbatch, kind, module: module.into() }
    }

    /// `iter={i}|mb={m}|kind={k}|mod={name}`. The trace format and external
    /// writers depend on this exact spelling.
    pub fn encode(&self) -> String {
        format!("iter={}|mb={}|kind={}|mod={}", self.iteration, self.microbatch, self.kind, self.module)
    }

    pub fn is_valid(&self) -> bool {
        !self.module.is_empty() && !self.module.contains('|')
    }
}

impl fmt::Display for CanonicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl FromStr for CanonicalId {
    type Err = CanonicalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || CanonicalError::Parse(s.to_string());
        let mut parts = s.splitn(4, '|');
        let mut field = |prefix: &str| -> Result<&str, CanonicalError> {
            parts.next().and_then(|p| p.strip_prefix(prefix)).ok_or_else(err)
        };
        let iteration = field("iter=")?.parse().map_err(|_| err())?;
        let microbatch = field("mb=")?.parse().map_err(|_| err())?;
        let kind = field("kind=")?.parse().map_err(|_| err())?;
        let module = field("mod=")?.to_string();
        let id = CanonicalId { iteration, microbatch, kind, module };
        if !id.is_valid() {
            return Err(err());
        }
        Ok(id)
    }
}

/// Global layer index of a stage-local layer under interleaved pipeline
/// placement: chunk `v·P + p` holds layers `[(v·P + p)·k, (v·P + p + 1)·k)`.
pub fn canonical_layer_index(
    stage: usize,
    chunk: usize,
    local: usize,
    stages: usize,
    chunks: usize,
    layers_per_chunk: usize,
) -> Result<usize, CanonicalError> {
    if stage >= stages || chunk >= chunks || local >= layers_per_chunk {
        return Err(CanonicalError::OutOfRange(format!(
            "stage {stage}/{stages}, chunk {chunk}/{chunks}, layer {local}/{layers_per_chunk}"
        )));
    }
    Ok((chunk * stages + stage) * layers_per_chunk + local)
}

/// Half-open `[start, stop)` interval per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceBox(pub Vec<(usize, usize)>);

impl SliceBox {
    pub fn full(shape: &[usize]) -> Self {
        SliceBox(shape.iter().map(|&e| (0, e)).collect())
    }

    pub fn extents(&self) -> Vec<usize> {
        self.0.iter().map(|&(s, e)| e.saturating_sub(s)).collect()
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    fn within(&self, shape: &[usize]) -> bool {
        self.0.len() == shape.len() && self.0.iter().zip(shape).all(|(&(s, e), &ext)| s < e && e <= ext)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPair {
    pub local: SliceBox,
    pub global: SliceBox,
}

/// How one rank's shard embeds into the logical full tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardMapping {
    pub local_shape: Vec<usize>,
    pub global_shape: Vec<usize>,
    pub pairs: Vec<BoxPair>,
}

impl ShardMapping {
    pub fn identity(shape: &[usize]) -> Self {
        Self {
            local_shape: shape.to_vec(),
            global_shape: shape.to_vec(),
            pairs: vec![BoxPair { local: SliceBox::full(shape), global: SliceBox::full(shape) }],
        }
    }

    /// Sorted global boxes; equal signatures mean the shards are replicas.
    pub fn global_signature(&self) -> Vec<SliceBox> {
        let mut boxes: Vec<SliceBox> = self.pairs.iter().map(|p| p.global.clone()).collect();
        boxes.sort();
        boxes
    }

    pub fn is_identity(&self) -> bool {
        self.local_shape == self.global_shape
            && self.pairs.len() == 1
            && self.pairs[0].local == SliceBox::full(&self.local_shape)
            && self.pairs[0].global == self.pairs[0].local
    }
}

fn invalid(reason: impl Into<String>) -> CanonicalError {
    CanonicalError::MappingInvalid(reason.into())
}

/// Enforce every structural invariant of a mapping.
pub fn validate_mapping(m: &ShardMapping) -> Result<(), CanonicalError> {
    let nd = m.local_shape.len();
    if nd == 0 || m.global_shape.len() != nd {
        return Err(invalid("dimension mismatch between local and global shape"));
    }
    if m.local_shape.iter().chain(&m.global_shape).any(|&e| e == 0) {
        return Err(invalid("zero extent"));
    }
    if m.pairs.is_empty() {
        return Err(invalid("no box pairs"));
    }
    for (i, p) in m.pairs.iter().enumerate() {
        if p.local.ndim() != nd || p.global.ndim() != nd {
            return Err(invalid(format!("pair {i}: box rank differs from tensor rank")));
        }
        if p.local.0.iter().chain(&p.global.0).any(|&(s, e)| s >= e) {
            return Err(invalid(format!("pair {i}: empty interval")));
        }
        if p.local.extents() != p.global.extents() {
            return Err(invalid(format!(
                "extent mismatch: local {:?} vs global {:?}",
                p.local.0, p.global.0
            )));
        }
        if !p.local.within(&m.local_shape) {
            return Err(invalid(format!("pair {i}: local box {:?} out of bounds", p.local.0)));
        }
        if !p.global.within(&m.global_shape) {
            return Err(invalid(format!("pair {i}: global box {:?} out of bounds", p.global.0)));
        }
    }
    let cover = coverage(&m.local_shape, m.pairs.iter().map(|p| &p.local));
    if let Some(flat) = cover.iter().position(|&c| c > 1) {
        return Err(invalid(format!("local overlap at {:?}", unravel(flat, &m.local_shape))));
    }
    if let Some(flat) = cover.iter().position(|&c| c == 0) {
        return Err(invalid(format!("local gap at {:?}", unravel(flat, &m.local_shape))));
    }
    Ok(())
}

fn unravel(flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    tensor::unravel(flat, shape, &mut idx);
    idx
}

/// Per-cell write counts of `boxes` over `shape`.
fn coverage<'a>(shape: &[usize], boxes: impl Iterator<Item = &'a SliceBox>) -> Vec<u32> {
    let mut counts = vec![0u32; shape.iter().product()];
    for b in boxes {
        for_each_cell(b, shape, |flat| counts[flat] += 1);
    }
    counts
}

fn for_each_cell(b: &SliceBox, shape: &[usize], mut f: impl FnMut(usize)) {
    let ext = b.extents();
    let n: usize = ext.iter().product();
    let mut idx = vec![0usize; ext.len()];
    for k in 0..n {
        tensor::unravel(k, &ext, &mut idx);
        let flat = idx
            .iter()
            .zip(&b.0)
            .zip(shape)
            .fold(0, |acc, ((&i, &(s, _)), &e)| acc * e + i + s);
        f(flat);
    }
}

/// Reassemble a logical full tensor from shards. Succeeds only if the global
/// boxes tile `global_shape` exactly once.
pub fn merge(shards: &[(ShardMapping, Tensor)], global_shape: &[usize]) -> Result<Tensor, CanonicalError> {
    for (m, t) in shards {
        validate_mapping(m)?;
        if m.global_shape != global_shape {
            return Err(CanonicalError::ShapeMismatch {
                expected: global_shape.to_vec(),
                got: m.global_shape.clone(),
            });
        }
        if t.shape() != m.local_shape.as_slice() {
            return Err(CanonicalError::ShapeMismatch {
                expected: m.local_shape.clone(),
                got: t.shape().to_vec(),
            });
        }
    }
    if global_shape.is_empty() || global_shape.contains(&0) {
        return Err(invalid("empty global shape"));
    }
    let cover = coverage(global_shape, shards.iter().flat_map(|(m, _)| m.pairs.iter().map(|p| &p.global)));
    if let Some(flat) = cover.iter().position(|&c| c > 1) {
        return Err(CanonicalError::Overlap { index: unravel(flat, global_shape) });
    }
    if let Some(flat) = cover.iter().position(|&c| c == 0) {
        return Err(CanonicalError::Omission { index: unravel(flat, global_shape) });
    }
    let mut full = Tensor::zeros(global_shape);
    for (m, t) in shards {
        for p in &m.pairs {
            let piece = t.slice_read(&p.local.0).expect("validated local box");
            full.slice_write(&p.global.0, &piece).expect("validated global box");
        }
    }
    Ok(full)
}

/// Ranks expected to hold equivalent copies of a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaGroup {
    ranks: Vec<usize>,
}

impl ReplicaGroup {
    pub fn new(ranks: Vec<usize>) -> Result<Self, CanonicalError> {
        if ranks.is_empty() {
            return Err(CanonicalError::OutOfRange("empty replica group".into()));
        }
        Ok(Self { ranks })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplicaCheck {
    Consistent,
    Mismatch { max_rel_err: f64, ranks: (usize, usize) },
}

/// Compare every copy against copy 0; consistent iff each rel_err is within
/// the machine epsilon of `format`.
pub fn check_replicas(
    copies: &[Tensor],
    group: &ReplicaGroup,
    format: FloatFormat,
) -> Result<ReplicaCheck, CanonicalError> {
    if copies.len() != group.ranks.len() {
        return Err(CanonicalError::OutOfRange(format!(
            "{} copies for a group of {} ranks",
            copies.len(),
            group.ranks.len()
        )));
    }
    let Some(first) = copies.first() else {
        return Ok(ReplicaCheck::Consistent);
    };
    let mut worst: Option<(f64, usize)> = None;
    for (i, c) in copies.iter().enumerate().skip(1) {
        if c.shape() != first.shape() {
            return Err(CanonicalError::ShapeMismatch {
                expected: first.shape().to_vec(),
                got: c.shape().to_vec(),
            });
        }
        let e = rel_err(first, c).expect("shapes checked");
        if worst.is_none_or(|(w, _)| e > w) {
            worst = Some((e, i));
        }
    }
    Ok(match worst {
        Some((e, i)) if e > format.machine_epsilon() => ReplicaCheck::Mismatch {
            max_rel_err: e,
            ranks: (group.ranks[0], group.ranks[i]),
        },
        _ => ReplicaCheck::Consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(m: &[(usize, usize, usize)], len: usize) -> ShardMapping {
        // (local_start, global_start, extent)
        ShardMapping {
            local_shape: vec![len],
            global_shape: vec![8],
            pairs: m
                .iter()
                .map(|&(l, g, n)| BoxPair { local: SliceBox(vec![(l, l + n)]), global: SliceBox(vec![(g, g + n)]) })
                .collect(),
        }
    }

    #[test]
    fn encoding_round_trips() {
        let id = CanonicalId::new(3, 1, TensorKind::ActivationGradIn, "model.layers.4.mlp");
        assert_eq!(id.encode(), "iter=3|mb=1|kind=ActivationGradIn|mod=model.layers.4.mlp");
        assert_eq!(id.encode().parse::<CanonicalId>().unwrap(), id);
        assert!("iter=x|mb=1|kind=Param|mod=a".parse::<CanonicalId>().is_err());
        assert!("iter=1|mb=1|kind=Bogus|mod=a".parse::<CanonicalId>().is_err());
    }

    #[test]
    fn layer_index_examples() {
        assert_eq!(canonical_layer_index(0, 1, 0, 4, 2, 1).unwrap(), 4);
        assert_eq!(canonical_layer_index(0, 0, 0, 3, 5, 7).unwrap(), 0);
        assert_eq!(canonical_layer_index(1, 1, 0, 2, 2, 2).unwrap(), 6);
        assert!(canonical_layer_index(2, 0, 0, 2, 2, 2).is_err());
        assert!(canonical_layer_index(0, 0, 2, 2, 2, 2).is_err());
    }

    /// Brute force: deal chunks of k consecutive layers round-robin to stages,
    /// then record each layer's (stage, chunk-within-stage, local) position.
    #[test]
    fn layer_index_matches_enumerated_schedule() {
        for p_n in 1..=4 {
            for v_n in 1..=4 {
                for k in 1..=4 {
                    let total = p_n * v_n * k;
                    let mut seen = vec![false; total];
                    let mut next_chunk = vec![0usize; p_n];
                    for chunk in 0..p_n * v_n {
                        let stage = chunk % p_n;
                        let v = next_chunk[stage];
                        next_chunk[stage] += 1;
                        for local in 0..k {
                            let g = chunk * k + local;
                            assert_eq!(canonical_layer_index(stage, v, local, p_n, v_n, k).unwrap(), g);
                            assert!(!std::mem::replace(&mut seen[g], true));
                        }
                    }
                    assert!(seen.iter().all(|&s| s));
                }
            }
        }
    }

    #[test]
    fn validate_examples() {
        assert!(validate_mapping(&ShardMapping::identity(&[4, 3])).is_ok());
        let overlap = ShardMapping {
            local_shape: vec![2],
            global_shape: vec![8],
            pairs: vec![
                BoxPair { local: SliceBox(vec![(0, 2)]), global: SliceBox(vec![(0, 2)]) },
                BoxPair { local: SliceBox(vec![(1, 2)]), global: SliceBox(vec![(4, 5)]) },
            ],
        };
        let e = validate_mapping(&overlap).unwrap_err().to_string();
        assert!(e.contains("local overlap"), "{e}");
        let mismatch = ShardMapping {
            local_shape: vec![2],
            global_shape: vec![8],
            pairs: vec![BoxPair { local: SliceBox(vec![(0, 2)]), global: SliceBox(vec![(0, 3)]) }],
        };
        assert!(validate_mapping(&mismatch).unwrap_err().to_string().contains("extent mismatch"));
        let gap = seg(&[(0, 0, 1)], 2);
        assert!(validate_mapping(&gap).unwrap_err().to_string().contains("local gap"));
        let oob = seg(&[(0, 7, 2)], 2);
        assert!(validate_mapping(&oob).unwrap_err().to_string().contains("out of bounds"));
    }

    #[test]
    fn merge_examples() {
        let t = Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(merge(&[(ShardMapping::identity(&[4]), t.clone())], &[4]).unwrap(), t);

        let half = |g: usize| ShardMapping {
            local_shape: vec![2],
            global_shape: vec![4],
            pairs: vec![BoxPair { local: SliceBox(vec![(0, 2)]), global: SliceBox(vec![(g, g + 2)]) }],
        };
        let a = Tensor::vector(vec![0.0, 1.0]);
        let b = Tensor::vector(vec![2.0, 3.0]);
        assert_eq!(merge(&[(half(0), a.clone()), (half(2), b.clone())], &[4]).unwrap(), t);
        assert_eq!(merge(&[(half(2), b), (half(0), a.clone())], &[4]).unwrap(), t);
        assert_eq!(
            merge(&[(half(0), a.clone()), (half(0), a.clone())], &[4]).unwrap_err(),
            CanonicalError::Overlap { index: vec![0] }
        );
        assert_eq!(merge(&[(half(0), a)], &[4]).unwrap_err(), CanonicalError::Omission { index: vec![2] });
    }

    #[test]
    fn replica_examples() {
        let g2 = ReplicaGroup::new(vec![0, 1]).unwrap();
        let a = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(check_replicas(&[a.clone(), a.clone()], &g2, FloatFormat::Bf16).unwrap(), ReplicaCheck::Consistent);
        let g1 = ReplicaGroup::new(vec![5]).unwrap();
        assert_eq!(check_replicas(&[a.clone()], &g1, FloatFormat::Bf16).unwrap(), ReplicaCheck::Consistent);
        // ‖[1,1] − [2,2]‖ / ‖[1,1]‖ = √2 / √2
        match check_replicas(&[a, Tensor::vector(vec![2.0, 2.0])], &g2, FloatFormat::Bf16).unwrap() {
            ReplicaCheck::Mismatch { max_rel_err, ranks } => {
                assert!((max_rel_err - 1.0).abs() < 1e-15);
                assert_eq!(ranks, (0, 1));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert!(ReplicaGroup::new(vec![]).is_err());
    }
}
