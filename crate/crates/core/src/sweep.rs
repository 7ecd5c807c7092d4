//! Grid sweeps over parallel layouts, with and without injected bugs.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde_json::json;

use crate::checker::{Report, ToleranceMap};
use crate::config::RunConfig;
use crate::parallel::{BugId, BugInjection, ParallelConfig};
use crate::session;
use crate::trace::{Mode, Trace};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub dp: Vec<usize>,
    pub tp: Vec<usize>,
    pub pp: Vec<usize>,
    pub vp: Vec<usize>,
    pub cp: Vec<usize>,
    pub sp: Vec<bool>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            dp: vec![1, 2],
            tp: vec![1, 2],
            pp: vec![1, 2],
            vp: vec![1, 2],
            cp: vec![1, 2],
            sp: vec![false, true],
        }
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "0" | "off" | "false" => Some(false),
        "1" | "on" | "true" => Some(true),
        _ => None,
    }
}

impl Grid {
    /// Parses `dp=1,2;tp=1,2;sp=off,on`. Dimensions left out keep the
    /// default `{1,2}` (`{off,on}` for sp).
    pub fn parse(s: &str) -> Result<Grid, String> {
        let mut g = Grid::default();
        for part in s.split([';', ' ']).map(str::trim).filter(|p| !p.is_empty()) {
            let (key, vals) = part.split_once('=').ok_or_else(|| format!("expected key=values, got {part:?}"))?;
            let vals: Vec<&str> = vals.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            if vals.is_empty() {
                return Err(format!("no values for {key}"));
            }
            if key == "sp" {
                g.sp = vals.iter().map(|v| parse_flag(v).ok_or_else(|| format!("bad sp value {v:?}"))).collect::<Result<_, _>>()?;
                continue;
            }
            let nums = vals
                .iter()
                .map(|v| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad {key} value {v:?}")))
                .collect::<Result<Vec<_>, _>>()?;
            match key {
                "dp" => g.dp = nums,
                "tp" => g.tp = nums,
                "pp" => g.pp = nums,
                "vp" => g.vp = nums,
                "cp" => g.cp = nums,
                _ => return Err(format!("unknown grid dimension {key:?}")),
            }
        }
        Ok(g)
    }

    /// Layouts valid for `base`'s model with at most `max_world` ranks, in a
    /// fixed order.
    pub fn points(&self, base: &RunConfig, max_world: usize) -> Vec<ParallelConfig> {
        let mut out = Vec::new();
        for &dp in &self.dp {
            for &tp in &self.tp {
                for &pp in &self.pp {
                    for &vp in &self.vp {
                        for &cp in &self.cp {
                            for &sp in &self.sp {
                                let pc = ParallelConfig { dp, tp, pp, vp, cp, sp, ..base.parallel.clone() };
                                if pc.world_size() <= max_world && pc.validate(&base.model).is_ok() {
                                    out.push(pc);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn layout_label(pc: &ParallelConfig) -> String {
    format!("dp{} tp{} pp{} vp{} cp{} sp{}", pc.dp, pc.tp, pc.pp, pc.vp, pc.cp, u8::from(pc.sp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// `None` for the bug-free run.
    pub bug: Option<BugId>,
    pub exit_code: i32,
    pub flagged: usize,
    pub earliest: Option<String>,
    /// Observed error over tolerance at the earliest flagged id.
    pub margin: Option<f64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub parallel: ParallelConfig,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub mode: Mode,
    pub bugs: Vec<BugId>,
    pub rows: Vec<Row>,
}

fn cell(bug: Option<BugId>, report: &Report) -> Cell {
    let first = report.first_flagged();
    let flagged = report.flagged().count();
    let clean = report.is_clean();
    Cell {
        bug,
        exit_code: report.exit_code(),
        flagged,
        earliest: first.map(|r| r.id.clone()),
        margin: first.and_then(|r| r.observed.map(|o| o / r.tolerance)),
        ok: if bug.is_some() { !clean } else { clean },
    }
}

/// Runs the bug-free candidate at every grid point, plus one run per bug in
/// `bugs` wherever that bug's site is active. Reference traces and
/// tolerances are shared between points with the same digest.
pub fn run_sweep(
    base: &RunConfig,
    mode: Mode,
    points: &[ParallelConfig],
    bugs: &[BugId],
    mut progress: impl FnMut(&str),
) -> Result<SweepReport, Error> {
    let mut cache: BTreeMap<String, (Trace, ToleranceMap)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(points.len());
    for pc in points {
        let mut cfg = base.clone();
        cfg.parallel = pc.clone();
        cfg.bugs.clear();
        cfg.validate()?;
        let digest = cfg.digest(mode);
        if !cache.contains_key(&digest) {
            let reference = session::simulate_reference(&cfg, mode, None)?;
            let tol = session::estimate_tolerance_from(&cfg, mode, &reference)?;
            cache.insert(digest.clone(), (reference, tol));
        }
        let (reference, tol) = &cache[&digest];
        let mut cells = Vec::new();
        let (_, report) = session::check_candidate(&cfg, mode, reference, tol)?;
        cells.push(cell(None, &report));
        progress(&format!("{} correct: exit {}", layout_label(pc), report.exit_code()));
        for &bug in bugs.iter().filter(|b| b.is_active(pc)) {
            let injection = base.bugs.iter().find(|b| b.bug_id == bug).cloned().unwrap_or_else(|| BugInjection::new(bug));
            let mut bcfg = cfg.clone();
            bcfg.bugs = vec![BugInjection { enabled: true, ..injection }];
            let (_, report) = session::check_candidate(&bcfg, mode, reference, tol)?;
            progress(&format!("{} {}: exit {}", layout_label(pc), bug.name(), report.exit_code()));
            cells.push(cell(Some(bug), &report));
        }
        rows.push(Row { parallel: pc.clone(), cells });
    }
    Ok(SweepReport { mode, bugs: bugs.to_vec(), rows })
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.cells.iter().all(|c| c.ok))
    }

    pub fn failures(&self) -> impl Iterator<Item = (&ParallelConfig, &Cell)> {
        self.rows.iter().flat_map(|r| r.cells.iter().filter(|c| !c.ok).map(move |c| (&r.parallel, c)))
    }

    /// Matrix with one row per layout and one column per run kind.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let width = 26;
        write!(out, "{:<width$} {:>8}", "layout", "correct").unwrap();
        for b in &self.bugs {
            write!(out, " {:>20}", b.name()).unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{:<width$}", layout_label(&row.parallel)).unwrap();
            let show = |c: &Cell| {
                let v = if c.flagged == 0 && c.exit_code == 0 { "pass" } else { "flag" };
                if c.ok { v.to_string() } else { format!("{}!", v.to_uppercase()) }
            };
            write!(out, " {:>8}", show(&row.cells[0])).unwrap();
            for b in &self.bugs {
                let s = row.cells.iter().find(|c| c.bug == Some(*b)).map_or("-".to_string(), show);
                write!(out, " {s:>20}").unwrap();
            }
            out.push('\n');
        }
        let runs: usize = self.rows.iter().map(|r| r.cells.len()).sum();
        let bad = self.failures().count();
        writeln!(out, "{runs} runs, {bad} unexpected").unwrap();
        out
    }

    pub fn render_json(&self) -> String {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "parallel": r.parallel,
                    "runs": r.cells.iter().map(|c| json!({
                        "bug": c.bug.map(|b| b.name()),
                        "exit_code": c.exit_code,
                        "flagged": c.flagged,
                        "earliest_flagged": c.earliest,
                        "margin": c.margin.filter(|m| m.is_finite()),
                        "ok": c.ok,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        let v = json!({ "mode": self.mode, "passed": self.passed(), "rows": rows });
        serde_json::to_string_pretty(&v).expect("json value serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    #[test]
    fn grid_parsing() {
        let g = Grid::parse("dp=1,2; tp=2;sp=on").unwrap();
        assert_eq!(g.dp, vec![1, 2]);
        assert_eq!(g.tp, vec![2]);
        assert_eq!(g.sp, vec![true]);
        assert_eq!(g.cp, vec![1, 2]);
        assert!(Grid::parse("xp=1").is_err());
        assert!(Grid::parse("dp=0").is_err());
        assert!(Grid::parse("sp=maybe").is_err());
    }

    #[test]
    fn points_respect_world_size_and_validity() {
        let base = RunConfig::new(ModelConfig::small(4), ParallelConfig { microbatches: 2, ..Default::default() });
        let pts = Grid::default().points(&base, 8);
        assert!(pts.iter().all(|p| p.world_size() <= 8 && !(p.vp > 1 && p.pp == 1)));
        assert!(pts.iter().any(|p| p.world_size() == 8));
        assert!(!pts.iter().any(|p| p.dp == 2 && p.tp == 2 && p.pp == 2 && p.cp == 2));
        let labels: Vec<String> = pts.iter().map(layout_label).collect();
        assert_eq!(labels[0], "dp1 tp1 pp1 vp1 cp1 sp0");
    }
}
