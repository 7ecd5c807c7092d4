//! Differential check of a candidate trace against the reference trace.

mod report;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{render_json, render_text};

use crate::canonical::{check_replicas, merge, ReplicaCheck, ReplicaGroup, ShardMapping, SliceBox};
use crate::tensor::{rel_err, FloatFormat, Tensor};
use crate::trace::{Trace, TraceError, TraceRecord};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("trace digests differ: reference {reference}, candidate {candidate}")]
    DigestMismatch { reference: String, candidate: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("reference trace is inconsistent for {id}: {reason}")]
    Reference { id: String, reason: String },
}

/// Per-id relative-error response of the reference to input perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceMap {
    pub format: FloatFormat,
    pub eps_p: f64,
    pub samples: usize,
    pub entries: BTreeMap<String, f64>,
}

impl ToleranceMap {
    pub fn get(&self, id: &str) -> f64 {
        self.entries.get(id).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tolerance map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Records of one trace grouped by encoded id, in first-appearance order.
fn group(trace: &Trace) -> (Vec<String>, HashMap<String, Vec<&TraceRecord>>) {
    let mut order = Vec::new();
    let mut map: HashMap<String, Vec<&TraceRecord>> = HashMap::new();
    for r in &trace.records {
        let key = r.id.encode();
        map.entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    (order, map)
}

/// Bounding extent of the records' global boxes.
fn extent(records: &[&TraceRecord]) -> Vec<usize> {
    let nd = records[0].shape.len();
    (0..nd)
        .map(|d| records.iter().flat_map(|r| r.mapping.pairs.iter().map(move |p| p.global.0[d].1)).max().unwrap_or(0))
        .collect()
}

fn with_global(m: &ShardMapping, shape: &[usize]) -> ShardMapping {
    ShardMapping { global_shape: shape.to_vec(), ..m.clone() }
}

/// Full tensor of a reference id.
fn merge_reference(id: &str, records: &[&TraceRecord]) -> Result<Tensor, CheckError> {
    let shape = extent(records);
    let parts: Vec<_> = records.iter().map(|r| (with_global(&r.mapping, &shape), r.tensor())).collect();
    merge(&parts, &shape).map_err(|e| CheckError::Reference { id: id.to_string(), reason: e.to_string() })
}

/// Merged full tensors of a whole reference-side trace.
fn merge_all(trace: &Trace) -> Result<(Vec<String>, HashMap<String, Tensor>), CheckError> {
    let (order, groups) = group(trace);
    let merged = order
        .par_iter()
        .map(|id| Ok((id.clone(), merge_reference(id, &groups[id])?)))
        .collect::<Result<HashMap<_, _>, CheckError>>()?;
    Ok((order, merged))
}

/// Tolerance per id from an unperturbed reference trace and perturbed reruns.
/// A zero-norm unperturbed tensor gets tolerance 0.
pub fn tolerance_from_traces(
    base: &Trace,
    perturbed: &[Trace],
    format: FloatFormat,
    eps_p: f64,
    agg: Aggregation,
) -> Result<ToleranceMap, CheckError> {
    let (order, base_m) = merge_all(base)?;
    let samples: Vec<HashMap<String, Tensor>> =
        perturbed.iter().map(|t| merge_all(t).map(|(_, m)| m)).collect::<Result<_, _>>()?;
    let mut entries = BTreeMap::new();
    for id in order {
        let b = &base_m[&id];
        let responses: Vec<f64> = samples
            .iter()
            .filter_map(|s| s.get(&id))
            .map(|p| if b.data().iter().all(|&x| x == 0.0) { 0.0 } else { rel_err(b, p).unwrap_or(f64::INFINITY) })
            .collect();
        let v = match (agg, responses.len()) {
            (_, 0) => 0.0,
            (Aggregation::Max, _) => responses.iter().cloned().fold(0.0, f64::max),
            (Aggregation::Mean, n) => responses.iter().sum::<f64>() / n as f64,
        };
        entries.insert(id, v);
    }
    Ok(ToleranceMap { format, eps_p, samples: perturbed.len(), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Flag,
    ReplicaMismatch,
    MergeError,
    Missing,
    Unexpected,
}

impl Verdict {
    pub fn is_flagged(self) -> bool {
        matches!(self, Verdict::Flag | Verdict::ReplicaMismatch | Verdict::MergeError)
    }

    pub fn is_structural(self) -> bool {
        !matches!(self, Verdict::Pass | Verdict::Flag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdResult {
    pub id: String,
    pub verdict: Verdict,
    pub observed: Option<f64>,
    pub tolerance: f64,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub digest: String,
    pub kappa: f64,
    pub format: FloatFormat,
    pub results: Vec<IdResult>,
    pub earliest_flagged: Option<String>,
    pub counts: BTreeMap<Verdict, usize>,
}

impl Report {
    fn new(digest: String, kappa: f64, format: FloatFormat, results: Vec<IdResult>) -> Report {
        let earliest_flagged = results.iter().find(|r| r.verdict.is_flagged()).map(|r| r.id.clone());
        let mut counts = BTreeMap::new();
        for r in &results {
            *counts.entry(r.verdict).or_insert(0) += 1;
        }
        Report { version: REPORT_VERSION, digest, kappa, format, results, earliest_flagged, counts }
    }

    pub fn result(&self, id: &str) -> Option<&IdResult> {
        self.results.iter().find(|r| r.id == id)
    }

    pub fn first_flagged(&self) -> Option<&IdResult> {
        self.results.iter().find(|r| r.verdict.is_flagged())
    }

    pub fn flagged(&self) -> impl Iterator<Item = &IdResult> {
        self.results.iter().filter(|r| r.verdict.is_flagged())
    }

    pub fn is_clean(&self) -> bool {
        self.results.iter().all(|r| r.verdict == Verdict::Pass)
    }

    /// 0 clean, 2 numeric flags only, 3 any structural problem.
    pub fn exit_code(&self) -> i32 {
        if self.results.iter().any(|r| r.verdict.is_structural()) {
            3
        } else if self.results.iter().any(|r| r.verdict == Verdict::Flag) {
            2
        } else {
            0
        }
    }
}

fn digests(reference: &Trace, candidate: &Trace) -> Result<String, CheckError> {
    let (r, c) = (reference.header()?.digest, candidate.header()?.digest);
    if r != c {
        return Err(CheckError::DigestMismatch { reference: r, candidate: c });
    }
    Ok(r)
}

/// Candidate shards of one id reassembled into a full tensor after checking
/// that replicas agree. Returns the tensor (from the first copy of each
/// shard) and any replica disagreement.
fn merge_candidate(
    records: &[&TraceRecord],
    shape: &[usize],
    format: FloatFormat,
) -> Result<(Tensor, Option<String>), String> {
    let mut by_box: BTreeMap<Vec<SliceBox>, Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        by_box.entry(r.mapping.global_signature()).or_default().push(r);
    }
    let mut mismatch: Option<(f64, String)> = None;
    let mut parts = Vec::with_capacity(by_box.len());
    for copies in by_box.values_mut() {
        copies.sort_by_key(|r| r.rank);
        let declared = copies[0].replica_group_size as usize;
        if copies.len() != declared {
            return Err(format!("shard has {} copies but replica group size {declared}", copies.len()));
        }
        let tensors: Vec<Tensor> = copies.iter().map(|r| r.tensor()).collect();
        let group = ReplicaGroup::new((0..copies.len()).collect()).map_err(|e| e.to_string())?;
        match check_replicas(&tensors, &group, format).map_err(|e| e.to_string())? {
            ReplicaCheck::Consistent => {}
            ReplicaCheck::Mismatch { max_rel_err, ranks } => {
                if mismatch.as_ref().is_none_or(|(w, _)| max_rel_err > *w) {
                    let (a, b) = (copies[ranks.0].rank, copies[ranks.1].rank);
                    mismatch = Some((max_rel_err, format!("replicas {a:?} and {b:?} differ by {max_rel_err:.3e}")));
                }
            }
        }
        parts.push((with_global(&copies[0].mapping, shape), tensors.into_iter().next().expect("non-empty")));
    }
    let full = merge(&parts, shape).map_err(|e| e.to_string())?;
    Ok((full, mismatch.map(|m| m.1)))
}

/// Compares every reference id against the merged candidate tensor. An id is
/// flagged when its relative error exceeds `κ·max(tolerance, ε)`.
pub fn check(reference: &Trace, candidate: &Trace, tol: &ToleranceMap, kappa: f64) -> Result<Report, CheckError> {
    let digest = digests(reference, candidate)?;
    let format = tol.format;
    let eps = format.machine_epsilon();
    let (order, ref_groups) = group(reference);
    let (cand_order, cand_groups) = group(candidate);
    let mut results: Vec<IdResult> = order
        .par_iter()
        .map(|id| -> Result<IdResult, CheckError> {
            let r = merge_reference(id, &ref_groups[id])?;
            let tolerance = tol.get(id);
            let threshold = kappa * tolerance.max(eps);
            let mut res = IdResult { id: id.clone(), verdict: Verdict::Pass, observed: None, tolerance, threshold, detail: None };
            let Some(recs) = cand_groups.get(id) else {
                res.verdict = Verdict::Missing;
                return Ok(res);
            };
            match merge_candidate(recs, r.shape(), format) {
                Err(e) => {
                    res.verdict = Verdict::MergeError;
                    res.detail = Some(e);
                }
                Ok((c, mismatch)) => {
                    let obs = rel_err(&r, &c).unwrap_or(f64::INFINITY);
                    res.observed = Some(obs);
                    if let Some(m) = mismatch {
                        res.verdict = Verdict::ReplicaMismatch;
                        res.detail = Some(m);
                    } else if !(obs <= threshold) {
                        res.verdict = Verdict::Flag;
                    }
                }
            }
            Ok(res)
        })
        .collect::<Result<_, _>>()?;
    for id in cand_order.iter().filter(|id| !ref_groups.contains_key(*id)) {
        results.push(IdResult {
            id: id.clone(),
            verdict: Verdict::Unexpected,
            observed: None,
            tolerance: 0.0,
            threshold: 0.0,
            detail: Some("id absent from the reference".into()),
        });
    }
    Ok(Report::new(digest, kappa, format, results))
}

/// Baseline with fixed thresholds: an id is flagged when any element
/// violates `|c − r| ≤ atol + rtol·|r|`.
pub fn compare_static(reference: &Trace, candidate: &Trace, atol: f64, rtol: f64, format: FloatFormat) -> Result<Report, CheckError> {
    let digest = digests(reference, candidate)?;
    let (order, ref_groups) = group(reference);
    let (_, cand_groups) = group(candidate);
    let results = order
        .par_iter()
        .map(|id| -> Result<IdResult, CheckError> {
            let r = merge_reference(id, &ref_groups[id])?;
            let mut res = IdResult { id: id.clone(), verdict: Verdict::Pass, observed: None, tolerance: rtol, threshold: atol, detail: None };
            let Some(recs) = cand_groups.get(id) else {
                res.verdict = Verdict::Missing;
                return Ok(res);
            };
            match merge_candidate(recs, r.shape(), format) {
                Err(e) => {
                    res.verdict = Verdict::MergeError;
                    res.detail = Some(e);
                }
                Ok((c, _)) => {
                    let worst = r
                        .data()
                        .iter()
                        .zip(c.data())
                        .map(|(&a, &b)| (b - a).abs() - (atol + rtol * a.abs()))
                        .fold(f64::NEG_INFINITY, f64::max);
                    res.observed = Some(rel_err(&r, &c).unwrap_or(f64::INFINITY));
                    if worst > 0.0 {
                        res.verdict = Verdict::Flag;
                    }
                }
            }
            Ok(res)
        })
        .collect::<Result<_, _>>()?;
    Ok(Report::new(digest, 0.0, format, results))
}
