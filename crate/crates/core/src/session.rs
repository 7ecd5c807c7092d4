//! End-to-end runs: reference and candidate simulations, tolerance
//! estimation, and the differential check.

use crate::checker::{self, Report, ToleranceMap};
use crate::config::RunConfig;
use crate::nn::Reference;
use crate::parallel::run_candidate;
use crate::trace::{Mode, Perturbation, Trace, TraceHeader, Tracer, TracerOptions};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Reference,
    Candidate,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Reference => "reference",
            Role::Candidate => "candidate",
        }
    }
}

fn options(cfg: &RunConfig, mode: Mode, perturbation: Option<Perturbation>) -> TracerOptions {
    TracerOptions {
        annotations: cfg.annotations(),
        mode,
        rewrite_specs: cfg.generators.clone(),
        perturbation,
        collect: true,
        storage: cfg.model.precision.storage(),
    }
}

pub fn header(cfg: &RunConfig, mode: Mode, role: Role) -> TraceHeader {
    let config = match role {
        Role::Reference => serde_json::json!({ "model": cfg.model, "learning_rate": cfg.learning_rate }),
        Role::Candidate => serde_json::json!({ "model": cfg.model, "parallel": cfg.parallel, "bugs": cfg.bugs }),
    };
    TraceHeader {
        digest: cfg.digest(mode),
        role: Some(role.name().into()),
        format: Some(cfg.model.precision.reference_format()),
        config: Some(config),
    }
}

/// Single-device run over the same global microbatches the candidate uses.
pub fn simulate_reference(cfg: &RunConfig, mode: Mode, perturbation: Option<Perturbation>) -> Result<Trace, Error> {
    let mut tr = Tracer::new(options(cfg, mode, perturbation));
    let mut model = Reference::new(cfg.model.clone())?;
    model.train_step(cfg.parallel.total_microbatches() as u64, cfg.learning_rate, &mut tr)?;
    Ok(Trace::new(&header(cfg, mode, Role::Reference), tr.into_records()))
}

pub fn simulate_candidate(cfg: &RunConfig, mode: Mode) -> Result<Trace, Error> {
    let mut tr = Tracer::new(options(cfg, mode, None));
    run_candidate(&cfg.model, &cfg.parallel, &cfg.bugs, cfg.learning_rate, &mut tr)?;
    Ok(Trace::new(&header(cfg, mode, Role::Candidate), tr.into_records()))
}

pub fn simulate(cfg: &RunConfig, mode: Mode, role: Role) -> Result<Trace, Error> {
    match role {
        Role::Reference => simulate_reference(cfg, mode, None),
        Role::Candidate => simulate_candidate(cfg, mode),
    }
}

/// Reference response to `n_samples` relative input perturbations of size
/// `eps_p`, aggregated per id.
pub fn estimate_tolerance(cfg: &RunConfig, mode: Mode) -> Result<ToleranceMap, Error> {
    let base = simulate_reference(cfg, mode, None)?;
    estimate_tolerance_from(cfg, mode, &base)
}

pub fn estimate_tolerance_from(cfg: &RunConfig, mode: Mode, base: &Trace) -> Result<ToleranceMap, Error> {
    let eps = cfg.eps_p();
    let perturbed = (0..cfg.check.n_samples as u64)
        .map(|sample| simulate_reference(cfg, mode, Some(Perturbation { eps, sample })))
        .collect::<Result<Vec<_>, _>>()?;
    let format = cfg.model.precision.reference_format();
    Ok(checker::tolerance_from_traces(base, &perturbed, format, eps, cfg.check.aggregation)?)
}

/// Everything one differential test produces.
pub struct Outcome {
    pub reference: Trace,
    pub candidate: Trace,
    pub tolerance: ToleranceMap,
    pub report: Report,
}

/// Reference, tolerance estimate, candidate, and check in one call.
pub fn run_check(cfg: &RunConfig, mode: Mode) -> Result<Outcome, Error> {
    let reference = simulate_reference(cfg, mode, None)?;
    let tolerance = estimate_tolerance_from(cfg, mode, &reference)?;
    let (candidate, report) = check_candidate(cfg, mode, &reference, &tolerance)?;
    Ok(Outcome { reference, candidate, tolerance, report })
}

/// Candidate run checked against an existing reference and tolerance map,
/// which can be shared by every layout with the same digest.
pub fn check_candidate(
    cfg: &RunConfig,
    mode: Mode,
    reference: &Trace,
    tolerance: &ToleranceMap,
) -> Result<(Trace, Report), Error> {
    let candidate = simulate_candidate(cfg, mode)?;
    let report = checker::check(reference, &candidate, tolerance, cfg.check.kappa)?;
    Ok((candidate, report))
}
