//! Trace records, the in-memory collector used by both runners, and
//! module-input rewriting for module-wise testing.

pub mod format;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{glob_match, Annotations, ShardSpec};
use crate::canonical::{CanonicalError, CanonicalId, ShardMapping, TensorKind};
use crate::rng::{extract_shard, fnv1a64, generate_full, Distribution, GenError, GenSpec, SplitMix64};
use crate::tensor::{FloatFormat, Tensor};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad trace header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("no generator spec for rewritten tensor {0}")]
    SpecMissing(String),
    #[error("duplicate record {0} on rank {1:?}")]
    Duplicate(String, RankMeta),
    #[error(transparent)]
    Mapping(#[from] CanonicalError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

/// Parallel coordinates of the rank that produced a record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankMeta {
    pub dp: u16,
    pub tp: u16,
    pub pp: u16,
    pub vp: u16,
    pub cp: u16,
    pub sp: u16,
}

impl RankMeta {
    pub fn as_array(&self) -> [u16; 6] {
        [self.dp, self.tp, self.pp, self.vp, self.cp, self.sp]
    }

    pub fn from_array(a: [u16; 6]) -> Self {
        Self { dp: a[0], tp: a[1], pp: a[2], vp: a[3], cp: a[4], sp: a[5] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub id: CanonicalId,
    pub rank: RankMeta,
    pub mapping: ShardMapping,
    pub replica_group_size: u16,
    pub module_class: String,
    pub shape: Vec<usize>,
    pub payload: Vec<f32>,
}

impl TraceRecord {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.payload.iter().map(|&x| f64::from(x)).collect())
            .expect("record payload matches shape")
    }
}

/// Header fields the checker relies on; writers may add more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub digest: String,
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub format: Option<FloatFormat>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Kept verbatim so load/flush is byte-preserving.
    pub header_json: String,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: &TraceHeader, records: Vec<TraceRecord>) -> Self {
        Self { header_json: serde_json::to_string(header).expect("header serializes"), records }
    }

    pub fn header(&self) -> Result<TraceHeader, TraceError> {
        Ok(serde_json::from_str(&self.header_json)?)
    }

    pub fn flush(&self, path: &Path) -> Result<(), TraceError> {
        format::write_file(self, path)
    }

    pub fn load(path: &Path) -> Result<Trace, TraceError> {
        let t = format::read_file(path)?;
        t.validate()?;
        Ok(t)
    }

    /// Every (id, rank) pair appears once and each record is self-consistent.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert((r.id.encode(), r.rank)) {
                return Err(TraceError::Duplicate(r.id.encode(), r.rank));
            }
            if r.mapping.local_shape != r.shape || r.payload.len() != r.shape.iter().product::<usize>() {
                return Err(TraceError::Format {
                    offset: 0,
                    reason: format!("record {} has inconsistent shape", r.id),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Normal execution; errors propagate downstream.
    #[default]
    Cascade,
    /// Every traced module input is rewritten by the consistent generator.
    ModuleWise,
}

/// Relative input perturbation used while estimating tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub eps: f64,
    pub sample: u64,
}

impl Perturbation {
    fn factors(&self, id: &CanonicalId, shape: &[usize]) -> Tensor {
        let key = format!("perturb|sample={}|{}", self.sample, id.encode());
        let mut rng = SplitMix64::new(fnv1a64(key.as_bytes()));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| 1.0 + (2.0 * rng.next_uniform() - 1.0) * self.eps).collect();
        Tensor::new(shape.to_vec(), data).expect("non-empty shape")
    }
}

/// Where one shard of a traced tensor lives.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub rank: RankMeta,
    pub mapping: ShardMapping,
    pub replicas: u16,
}

/// Resolves annotation layouts into per-shard placements for the tensors a
/// runner hands to the tracer.
pub trait Placer {
    fn place(&self, global_shape: &[usize], spec: &ShardSpec, kind: TensorKind) -> Result<Vec<Placement>, TraceError>;
}

/// Single-device placement: one identity shard.
pub struct SingleDevice;

impl Placer for SingleDevice {
    fn place(&self, global_shape: &[usize], _: &ShardSpec, _: TensorKind) -> Result<Vec<Placement>, TraceError> {
        Ok(vec![Placement { rank: RankMeta::default(), mapping: ShardMapping::identity(global_shape), replicas: 1 }])
    }
}

/// Generator used for rewritten tensors whose module matches `pattern`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSpec {
    pub pattern: String,
    pub distribution: Distribution,
}

impl RewriteSpec {
    pub fn defaults() -> Vec<RewriteSpec> {
        vec![RewriteSpec { pattern: "*".into(), distribution: Distribution::Normal { mean: 0.0, stddev: 1.0 } }]
    }
}

#[derive(Debug, Clone)]
pub struct TracerOptions {
    pub annotations: Annotations,
    pub mode: Mode,
    pub rewrite_specs: Vec<RewriteSpec>,
    pub perturbation: Option<Perturbation>,
    pub collect: bool,
    pub storage: Option<FloatFormat>,
}

impl Default for TracerOptions {
    fn default() -> Self {
        Self {
            annotations: Annotations::default(),
            mode: Mode::Cascade,
            rewrite_specs: RewriteSpec::defaults(),
            perturbation: None,
            collect: true,
            storage: None,
        }
    }
}

/// Hook target for both runners: records traced tensors and, in module-wise
/// mode, overwrites module inputs and incoming gradients.
pub struct Tracer {
    opts: TracerOptions,
    iteration: u64,
    records: Vec<TraceRecord>,
}

impl Tracer {
    pub fn new(opts: TracerOptions) -> Self {
        Self { opts, iteration: 0, records: Vec::new() }
    }

    /// A tracer that neither records nor alters anything.
    pub fn disabled() -> Self {
        Self::new(TracerOptions { collect: false, ..TracerOptions::default() })
    }

    pub fn options(&self) -> &TracerOptions {
        &self.opts
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn mode(&self) -> Mode {
        self.opts.mode
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    fn rewrites(&self) -> bool {
        self.opts.mode == Mode::ModuleWise
    }

    fn rewrite_distribution(&self, module: &str) -> Option<Distribution> {
        self.opts.rewrite_specs.iter().find(|s| glob_match(&s.pattern, module)).map(|s| s.distribution)
    }

    #[allow(clippy::too_many_arguments)]
    fn visit(
        &mut self,
        placer: &dyn Placer,
        id: CanonicalId,
        class: &str,
        global_shape: &[usize],
        tensors: &mut [Tensor],
        rewrite: bool,
        perturb: bool,
    ) -> Result<(), TraceError> {
        let Some(ann) = self.opts.annotations.lookup(&id.module, id.kind) else {
            return Ok(());
        };
        let spec = ann.shard;
        let needs_work = self.opts.collect || rewrite || (perturb && self.opts.perturbation.is_some());
        if !needs_work {
            return Ok(());
        }
        let placements = placer.place(global_shape, &spec, id.kind)?;
        debug_assert_eq!(placements.len(), tensors.len());
        if rewrite {
            let dist = self.rewrite_distribution(&id.module).ok_or_else(|| TraceError::SpecMissing(id.encode()))?;
            let full = generate_full(&id, &GenSpec { distribution: dist, shape: global_shape.to_vec() })?;
            let full = match self.opts.storage {
                Some(f) => full.quantize(f),
                None => full,
            };
            for (t, p) in tensors.iter_mut().zip(&placements) {
                *t = extract_shard(&full, &p.mapping)?;
            }
        }
        if let (true, Some(pert)) = (perturb, self.opts.perturbation) {
            let factors = pert.factors(&id, global_shape);
            for (t, p) in tensors.iter_mut().zip(&placements) {
                let f = extract_shard(&factors, &p.mapping)?;
                *t = t.zip_map(&f, |x, s| x * s).expect("shard shapes agree");
            }
        }
        if self.opts.collect {
            for (t, p) in tensors.iter().zip(placements) {
                if t.shape() != p.mapping.local_shape.as_slice() {
                    return Err(CanonicalError::ShapeMismatch {
                        expected: p.mapping.local_shape.clone(),
                        got: t.shape().to_vec(),
                    }
                    .into());
                }
                self.records.push(TraceRecord {
                    id: id.clone(),
                    rank: p.rank,
                    replica_group_size: p.replicas as u16,
                    module_class: class.to_string(),
                    shape: t.shape().to_vec(),
                    payload: t.data().iter().map(|&x| x as f32).collect(),
                    mapping: p.mapping,
                });
            }
        }
        Ok(())
    }

    fn id(&self, mb: u64, kind: TensorKind, module: &str) -> CanonicalId {
        CanonicalId::new(self.iteration, mb, kind, module)
    }

    /// Forward input of a module: rewritten and perturbed in module-wise mode.
    pub fn module_input(
        &mut self,
        placer: &dyn Placer,
        mb: u64,
        module: &str,
        class: &str,
        global_shape: &[usize],
        tensors: &mut [Tensor],
    ) -> Result<(), TraceError> {
        let (rw, id) = (self.rewrites(), self.id(mb, TensorKind::ActivationIn, module));
        self.visit(placer, id, class, global_shape, tensors, rw, rw)
    }

    pub fn module_output(
        &mut self,
        placer: &dyn Placer,
        mb: u64,
        module: &str,
        class: &str,
        global_shape: &[usize],
        tensors: &mut [Tensor],
    ) -> Result<(), TraceError> {
        let id = self.id(mb, TensorKind::ActivationOut, module);
        self.visit(placer, id, class, global_shape, tensors, false, false)
    }

    /// Network input after embedding; perturbed in cascade mode, then recorded
    /// as the module's output.
    pub fn network_input(
        &mut self,
        placer: &dyn Placer,
        mb: u64,
        module: &str,
        class: &str,
        global_shape: &[usize],
        tensors: &mut [Tensor],
    ) -> Result<(), TraceError> {
        let perturb = !self.rewrites();
        let id = self.id(mb, TensorKind::ActivationOut, module);
        self.visit(placer, id, class, global_shape, tensors, false, perturb)
    }

    /// Gradient flowing into a module's output during backward.
    pub fn grad_output(
        &mut self,
        placer: &dyn Placer,
        mb: u64,
        module: &str,
        class: &str,
        global_shape: &[usize],
        tensors: &mut [Tensor],
    ) -> Result<(), TraceError> {
        let (rw, id) = (self.rewrites(), self.id(mb, TensorKind::ActivationGradOut, module));
        self.visit(placer, id, class, global_shape, tensors, rw, rw)
    }

    pub fn grad_input(
        &mut self,
        placer: &dyn Placer,
        mb: u64,
        module: &str,
        class: &str,
        global_shape: &[usize],
        tensors: &mut [Tensor],
    ) -> Result<(), TraceError> {
        let id = self.id(mb, TensorKind::ActivationGradIn, module);
        self.visit(placer, id, class, global_shape, tensors, false, false)
    }

    /// Parameter-side records. `after_step` names parameters entering the
    /// next iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn parameter(
        &mut self,
        placer: &dyn Placer,
        kind: TensorKind,
        mb: u64,
        name: &str,
        global_shape: &[usize],
        tensors: &[Tensor],
        after_step: bool,
    ) -> Result<(), TraceError> {
        if !self.opts.collect {
            return Ok(());
        }
        let iteration = self.iteration + u64::from(after_step);
        let id = CanonicalId::new(iteration, mb, kind, name);
        let mut owned = tensors.to_vec();
        self.visit(placer, id, "Parameter", global_shape, &mut owned, false, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{merge, BoxPair, SliceBox};

    fn record(i: u64, data: Vec<f32>) -> TraceRecord {
        let n = data.len();
        TraceRecord {
            id: CanonicalId::new(0, i, TensorKind::ActivationOut, "model.layers.0.mlp"),
            rank: RankMeta { tp: 1, sp: 1, ..RankMeta::default() },
            mapping: ShardMapping {
                local_shape: vec![n, 1],
                global_shape: vec![2 * n, 1],
                pairs: vec![BoxPair { local: SliceBox(vec![(0, n), (0, 1)]), global: SliceBox(vec![(n, 2 * n), (0, 1)]) }],
            },
            replica_group_size: 1,
            module_class: "MLP".into(),
            shape: vec![n, 1],
            payload: data,
        }
    }

    fn sample() -> Trace {
        let header = TraceHeader { digest: "abc".into(), role: Some("candidate".into()), format: None, config: None };
        Trace::new(&header, vec![record(0, vec![1.0, -2.5]), record(1, vec![3.25, f32::MIN_POSITIVE])])
    }

    #[test]
    fn flush_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        let t = sample();
        t.flush(&path).unwrap();
        let back = Trace::load(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(format::encode(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_and_versioned_files_are_rejected() {
        let bytes = format::encode(&sample());
        for cut in [3usize, 10, bytes.len() - 9, bytes.len() - 2] {
            match format::decode(&bytes[..cut]) {
                Err(TraceError::Format { offset, .. }) => assert_eq!(offset as usize, cut, "cut {cut}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut v = bytes.clone();
        v[4..6].copy_from_slice(&999u16.to_le_bytes());
        let e = format::decode(&v).unwrap_err().to_string();
        assert!(e.contains("unsupported version"), "{e}");
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(format::decode(&m).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn rewrite_is_consistent_across_placements() {
        use crate::annotation::shard_mapping;
        use crate::parallel::ParallelConfig;

        struct Split(ParallelConfig);
        impl Placer for Split {
            fn place(&self, shape: &[usize], spec: &ShardSpec, _: TensorKind) -> Result<Vec<Placement>, TraceError> {
                (0..self.0.tp)
                    .map(|t| {
                        Ok(Placement {
                            rank: RankMeta { tp: t as u16, ..RankMeta::default() },
                            mapping: shard_mapping(shape, spec, &self.0, t, 0)?,
                            replicas: 1,
                        })
                    })
                    .collect()
            }
        }
        let opts = TracerOptions { mode: Mode::ModuleWise, storage: Some(FloatFormat::Bf16), ..TracerOptions::default() };
        let mut single = Tracer::new(opts.clone());
        let mut split = Tracer::new(opts);
        let pc = ParallelConfig { tp: 2, sp: true, ..ParallelConfig::default() };
        let shape = [8, 4];
        let mut full = [Tensor::zeros(&shape)];
        single.module_input(&SingleDevice, 0, "model.layers.0.mlp", "MLP", &shape, &mut full).unwrap();
        let mut shards = [Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4])];
        split.module_input(&Split(pc), 0, "model.layers.0.mlp", "MLP", &shape, &mut shards).unwrap();
        let parts: Vec<_> = split.records().iter().map(|r| (r.mapping.clone(), r.tensor())).collect();
        assert_eq!(merge(&parts, &shape).unwrap(), full[0]);
        assert_ne!(full[0], Tensor::zeros(&shape));
    }

    #[test]
    fn disabled_tracer_leaves_values_alone() {
        let mut t = Tracer::disabled();
        let orig = Tensor::vector(vec![1.0, 2.0]);
        let mut xs = [orig.clone()];
        t.module_input(&SingleDevice, 0, "model.layers.0.mlp", "MLP", &[2], &mut xs).unwrap();
        assert_eq!(xs[0], orig);
        assert!(t.records().is_empty());
    }
}
