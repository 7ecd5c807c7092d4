use difftrace::checker::{self, Verdict};
use difftrace::config::RunConfig;
use difftrace::nn::{ModelConfig, Reference};
use difftrace::parallel::{BugId, BugInjection, ParallelConfig};
use difftrace::session::{self, Role};
use difftrace::tensor::PrecisionPolicy;
use difftrace::trace::{Mode, Trace, Tracer};

fn config(layers: usize, pc: ParallelConfig) -> RunConfig {
    RunConfig::new(ModelConfig::small(layers), pc)
}

fn layout(dp: usize, tp: usize, pp: usize, vp: usize, cp: usize, sp: bool) -> ParallelConfig {
    ParallelConfig { dp, tp, pp, vp, cp, sp, microbatches: 2 }
}

#[test]
fn single_device_candidate_is_bit_identical() {
    let cfg = config(2, layout(1, 1, 1, 1, 1, false));
    let r = session::simulate(&cfg, Mode::Cascade, Role::Reference).unwrap();
    let c = session::simulate(&cfg, Mode::Cascade, Role::Candidate).unwrap();
    assert_eq!(r.records.len(), c.records.len());
    for (a, b) in r.records.iter().zip(&c.records) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.payload, b.payload, "{}", a.id);
    }
}

#[test]
fn exact_policy_layouts_agree_to_f64_roundoff() {
    // Without rounding to a storage format, every layout computes the same
    // function up to reassociation of f64 sums.
    for pc in [layout(2, 2, 1, 1, 2, true), layout(1, 2, 2, 2, 1, false)] {
        let mut cfg = config(4, pc.clone());
        cfg.model.precision = PrecisionPolicy::Exact;
        let r = session::simulate(&cfg, Mode::Cascade, Role::Reference).unwrap();
        let c = session::simulate(&cfg, Mode::Cascade, Role::Candidate).unwrap();
        let tol = checker::tolerance_from_traces(&r, &[r.clone()], difftrace::tensor::FloatFormat::Fp32, 0.0, Default::default()).unwrap();
        let report = checker::check(&r, &c, &tol, 1.0).unwrap();
        let worst = report.results.iter().filter_map(|x| x.observed).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{pc:?}: worst rel_err {worst:e}");
        assert!(report.is_clean());
    }
}

#[test]
fn correct_layout_passes_in_both_modes() {
    let cfg = config(2, layout(1, 2, 1, 1, 2, true));
    for mode in [Mode::Cascade, Mode::ModuleWise] {
        let out = session::run_check(&cfg, mode).unwrap();
        assert_eq!(out.report.exit_code(), 0, "{mode:?}");
        assert!(out.report.is_clean());
    }
}

#[test]
fn missing_grad_sync_is_a_replica_mismatch() {
    let mut cfg = config(2, layout(2, 1, 1, 1, 1, false));
    cfg.bugs.push(BugInjection::new(BugId::McDpGrad));
    let out = session::run_check(&cfg, Mode::Cascade).unwrap();
    let first = out.report.first_flagged().unwrap();
    assert_eq!(first.verdict, Verdict::ReplicaMismatch);
    assert!(first.id.contains("kind=MainGrad") && first.id.contains("model.layers.1."), "{}", first.id);
    assert_eq!(out.report.exit_code(), 3);
}

#[test]
fn wrong_embedding_scale_is_localized_to_the_embedding() {
    let mut cfg = config(2, layout(1, 2, 1, 1, 1, false));
    cfg.bugs.push(BugInjection::new(BugId::WdWrongScale));
    let out = session::run_check(&cfg, Mode::ModuleWise).unwrap();
    assert_eq!(out.report.earliest_flagged.as_deref(), Some("iter=0|mb=0|kind=ActivationOut|mod=model.embedding"));
    assert!(out.report.flagged().all(|r| r.id.contains("mod=model.embedding")));
    assert_eq!(out.report.exit_code(), 2);
}

#[test]
fn inactive_bugs_leave_the_run_clean() {
    // Every bug needs some parallelism; on one device none of them fires.
    let mut cfg = config(2, ParallelConfig { microbatches: 1, ..ParallelConfig::default() });
    cfg.bugs = BugId::ALL.iter().map(|&b| BugInjection::new(b)).collect();
    let out = session::run_check(&cfg, Mode::Cascade).unwrap();
    assert!(out.report.is_clean());
}

#[test]
fn larger_kappa_never_flags_more() {
    let mut cfg = config(2, layout(1, 2, 1, 1, 1, true));
    cfg.bugs.push(BugInjection::new(BugId::WcWrongOrder));
    let out = session::run_check(&cfg, Mode::Cascade).unwrap();
    let mut prev = usize::MAX;
    for kappa in [0.5, 1.0, 3.0, 10.0, 100.0, 1e4] {
        let r = checker::check(&out.reference, &out.candidate, &out.tolerance, kappa).unwrap();
        let n = r.results.iter().filter(|x| x.verdict == Verdict::Flag).count();
        assert!(n <= prev, "kappa {kappa}: {n} > {prev}");
        prev = n;
    }
}

#[test]
fn zero_perturbation_gives_zero_tolerance() {
    let mut cfg = config(2, layout(1, 1, 1, 1, 1, false));
    cfg.check.eps_p = Some(0.0);
    cfg.check.n_samples = 2;
    let tol = session::estimate_tolerance(&cfg, Mode::Cascade).unwrap();
    assert!(!tol.entries.is_empty());
    assert!(tol.entries.values().all(|&v| v == 0.0));
}

#[test]
fn tracing_does_not_change_training() {
    let cfg = ModelConfig::small(2);
    let traced = {
        let mut r = Reference::new(cfg.clone()).unwrap();
        let rc = config(2, ParallelConfig::default());
        let mut tr = Tracer::new(difftrace::trace::TracerOptions {
            annotations: rc.annotations(),
            mode: Mode::Cascade,
            rewrite_specs: rc.generators.clone(),
            perturbation: None,
            collect: true,
            storage: cfg.precision.storage(),
        });
        let out = r.train_step(2, 0.1, &mut tr).unwrap();
        assert!(!tr.records().is_empty());
        (out.losses, r.params)
    };
    let plain = {
        let mut r = Reference::new(cfg).unwrap();
        let out = r.train_step(2, 0.1, &mut Tracer::disabled()).unwrap();
        (out.losses, r.params)
    };
    assert_eq!(traced.0, plain.0);
    assert_eq!(traced.1, plain.1);
}

#[test]
fn traces_survive_a_file_round_trip() {
    let cfg = config(2, layout(1, 2, 1, 1, 2, true));
    let c = session::simulate(&cfg, Mode::ModuleWise, Role::Candidate).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cand.trace");
    c.flush(&path).unwrap();
    let back = Trace::load(&path).unwrap();
    assert_eq!(back.records.len(), c.records.len());
    for (a, b) in back.records.iter().zip(&c.records) {
        // Global extents are not stored; only the boxes are.
        assert_eq!((&a.id, a.rank, &a.mapping.pairs, &a.payload), (&b.id, b.rank, &b.mapping.pairs, &b.payload));
    }
    let again = dir.path().join("again.trace");
    back.flush(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(back.header().unwrap(), c.header().unwrap());
}

#[test]
fn digest_mismatch_is_refused() {
    let a = config(2, layout(1, 1, 1, 1, 1, false));
    let b = config(4, layout(1, 1, 1, 1, 1, false));
    let r = session::simulate(&a, Mode::Cascade, Role::Reference).unwrap();
    let c = session::simulate(&b, Mode::Cascade, Role::Candidate).unwrap();
    let tol = session::estimate_tolerance_from(&a, Mode::Cascade, &r).unwrap();
    assert!(matches!(checker::check(&r, &c, &tol, 3.0), Err(checker::CheckError::DigestMismatch { .. })));
}
