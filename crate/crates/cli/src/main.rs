use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use difftrace::checker::{self, render_json, render_text, CheckError, ToleranceMap};
use difftrace::config::{ConfigError, RunConfig, OUT_DIR_ENV};
use difftrace::parallel::BugId;
use difftrace::session::{self, Role};
use difftrace::sweep::{run_sweep, Grid};
use difftrace::trace::{Mode, Trace, TraceError};

/// Differential testing of emulated distributed training against a
/// single-device reference.
#[derive(Debug, Parser)]
#[command(name = "difftrace", version)]
struct Cli {
    /// Directory that relative output paths are written under.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    #[value(alias = "reference")]
    Ref,
    #[value(alias = "candidate")]
    Cand,
}

#[derive(Debug, Args)]
struct ModeArgs {
    /// Rewrite every traced module input with generated data (module-wise
    /// mode) instead of letting errors cascade.
    #[arg(long)]
    rewrite_inputs: bool,
}

impl ModeArgs {
    fn mode(&self, cfg: &RunConfig) -> Mode {
        if self.rewrite_inputs {
            Mode::ModuleWise
        } else {
            cfg.mode
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the reference or the candidate and write its trace.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Estimate per-tensor tolerances by perturbing the reference input.
    EstimateTol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Compare a candidate trace against a reference trace.
    Check {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "cand")]
        candidate: PathBuf,
        #[arg(long)]
        tol: PathBuf,
        /// Safety factor applied to the estimated tolerance.
        #[arg(long = "k", default_value_t = 3.0)]
        kappa: f64,
        #[arg(long, conflicts_with = "text")]
        json: bool,
        #[arg(long)]
        text: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every layout of a grid, with and without injected bugs.
    Sweep {
        config: PathBuf,
        /// For example `dp=1,2;tp=1,2;pp=1,2;vp=1,2;sp=off,on;cp=1,2`.
        #[arg(long)]
        grid: Option<String>,
        /// `none`, `all`, or a comma-separated list of bug ids.
        #[arg(long, default_value = "none")]
        bugs: String,
        #[arg(long, default_value_t = 8)]
        max_world: usize,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Injectable bug catalog.
    Bugs {
        #[command(subcommand)]
        command: BugsCommand,
    },
}

#[derive(Debug, Subcommand)]
enum BugsCommand {
    List,
}

/// Malformed inputs exit with 4; other failures with 1.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<TraceError>() {
            return if matches!(t, TraceError::Io(_)) { 1 } else { 4 };
        }
        if let Some(c) = cause.downcast_ref::<ConfigError>() {
            return if matches!(c, ConfigError::Read { .. }) { 1 } else { 4 };
        }
        if cause.downcast_ref::<CheckError>().is_some_and(|c| matches!(c, CheckError::DigestMismatch { .. })) {
            return 4;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn resolve(out_dir: &Option<PathBuf>, p: &Path) -> PathBuf {
    match out_dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

/// Output path: the flag, else the config's `outputs` entry, else `default`;
/// relative paths go under the output directory.
fn output(cli_dir: &Option<PathBuf>, cfg: &RunConfig, flag: &Option<PathBuf>, configured: &Option<PathBuf>, default: &str) -> PathBuf {
    let p = flag.clone().or_else(|| configured.clone()).unwrap_or_else(|| PathBuf::from(default));
    if p.is_absolute() {
        return p;
    }
    match cli_dir {
        Some(d) => d.join(p),
        None => cfg.output_path(&p),
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn parse_bugs(s: &str) -> anyhow::Result<Vec<BugId>> {
    match s.trim() {
        "none" | "" => Ok(Vec::new()),
        "all" => Ok(BugId::ALL.to_vec()),
        list => list.split(',').map(|b| b.trim().parse::<BugId>().map_err(|e| anyhow!(e))).collect(),
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let dir = &cli.out_dir;
    match cli.command {
        Command::Simulate { config, role, out, mode } => {
            let cfg = load_config(&config)?;
            let (role, configured, default) = match role {
                RoleArg::Ref => (Role::Reference, &cfg.outputs.reference, "reference.trace"),
                RoleArg::Cand => (Role::Candidate, &cfg.outputs.candidate, "candidate.trace"),
            };
            let trace = session::simulate(&cfg, mode.mode(&cfg), role)?;
            let path = output(dir, &cfg, &out, configured, default);
            if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
            }
            trace.flush(&path)?;
            eprintln!("wrote {} records to {}", trace.records.len(), path.display());
            Ok(0)
        }
        Command::EstimateTol { config, out, mode } => {
            let cfg = load_config(&config)?;
            let tol = session::estimate_tolerance(&cfg, mode.mode(&cfg))?;
            let path = output(dir, &cfg, &out, &cfg.outputs.tolerance, "tolerance.json");
            write_file(&path, tol.to_json().as_bytes())?;
            eprintln!("wrote {} tolerances to {}", tol.entries.len(), path.display());
            Ok(0)
        }
        Command::Check { reference, candidate, tol, kappa, json, text: _, out } => {
            if !(kappa > 0.0) {
                return Err(anyhow!("--k must be positive"));
            }
            let r = Trace::load(&reference).with_context(|| format!("loading {}", reference.display()))?;
            let c = Trace::load(&candidate).with_context(|| format!("loading {}", candidate.display()))?;
            let text = std::fs::read_to_string(&tol).with_context(|| format!("cannot read {}", tol.display()))?;
            let t = ToleranceMap::from_json(&text).with_context(|| format!("parsing {}", tol.display()))?;
            let report = checker::check(&r, &c, &t, kappa)?;
            let rendered = if json { render_json(&report) } else { render_text(&report) };
            print!("{rendered}");
            if let Some(p) = out {
                write_file(&resolve(dir, &p), rendered.as_bytes())?;
            }
            Ok(report.exit_code() as u8)
        }
        Command::Sweep { config, grid, bugs, max_world, json, out, mode } => {
            let cfg = load_config(&config)?;
            let grid = match grid {
                Some(g) => Grid::parse(&g).map_err(|e| anyhow!("invalid --grid: {e}"))?,
                None => Grid::default(),
            };
            let bugs = parse_bugs(&bugs)?;
            let points = grid.points(&cfg, max_world);
            if points.is_empty() {
                return Err(anyhow!("no valid layout in the grid for this model"));
            }
            let report = run_sweep(&cfg, mode.mode(&cfg), &points, &bugs, |line| eprintln!("{line}"))?;
            let rendered = if json { report.render_json() } else { report.render_text() };
            print!("{rendered}");
            if let Some(p) = out {
                write_file(&resolve(dir, &p), rendered.as_bytes())?;
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Bugs { command: BugsCommand::List } => {
            for b in BugId::ALL {
                println!("{:<20} {}  {}  (needs {}; site {})", b.name(), b.taxonomy().tag(), b.description(), b.requirement(), b.default_site());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
