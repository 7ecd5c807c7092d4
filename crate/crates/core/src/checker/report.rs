use std::fmt::Write;

use serde_json::{json, Map, Value};

use super::{IdResult, Report, Verdict};

/// JSON numbers cannot hold infinities or NaN; those become strings.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn verdict_name(v: Verdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn result_json(r: &IdResult) -> Value {
    let mut m = Map::new();
    m.insert("id".into(), json!(r.id));
    m.insert("verdict".into(), json!(verdict_name(r.verdict)));
    m.insert("observed".into(), r.observed.map_or(Value::Null, num));
    m.insert("tolerance".into(), num(r.tolerance));
    m.insert("threshold".into(), num(r.threshold));
    if let Some(d) = &r.detail {
        m.insert("detail".into(), json!(d));
    }
    Value::Object(m)
}

/// Deterministic JSON: keys sorted, results in reference execution order.
pub fn render_json(report: &Report) -> String {
    let counts: Map<String, Value> = report.counts.iter().map(|(v, n)| (verdict_name(*v), json!(n))).collect();
    let v = json!({
        "version": report.version,
        "digest": report.digest,
        "kappa": num(report.kappa),
        "format": report.format.name(),
        "earliest_flagged": report.earliest_flagged,
        "exit_code": report.exit_code(),
        "counts": counts,
        "results": report.results.iter().map(result_json).collect::<Vec<_>>(),
    });
    serde_json::to_string_pretty(&v).expect("json value serializes")
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let total = report.results.len();
    let flagged = report.flagged().count();
    writeln!(out, "checked {total} tensors ({}), kappa {}: {flagged} flagged", report.format, report.kappa).unwrap();
    for (v, n) in &report.counts {
        writeln!(out, "  {:<16} {n}", verdict_name(*v)).unwrap();
    }
    match &report.earliest_flagged {
        Some(id) => writeln!(out, "earliest flagged: {id}").unwrap(),
        None => writeln!(out, "no tensor flagged").unwrap(),
    }
    for r in report.results.iter().filter(|r| r.verdict != Verdict::Pass) {
        let obs = r.observed.map_or("-".to_string(), |o| format!("{o:.3e}"));
        write!(out, "{:<16} {}  observed {obs}  threshold {:.3e}", verdict_name(r.verdict), r.id, r.threshold).unwrap();
        if let Some(d) = &r.detail {
            write!(out, "  ({d})").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FloatFormat;

    #[test]
    fn json_is_stable_and_handles_infinity() {
        let results = vec![IdResult {
            id: "iter=0|mb=0|kind=ActivationOut|mod=model.layers.0.mlp".into(),
            verdict: Verdict::Flag,
            observed: Some(f64::INFINITY),
            tolerance: 0.0,
            threshold: 0.01,
            detail: None,
        }];
        let r = Report::new("d".into(), 3.0, FloatFormat::Bf16, results);
        let a = render_json(&r);
        assert_eq!(a, render_json(&r));
        let v: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["results"][0]["observed"], "inf");
        assert_eq!(v["results"][0]["verdict"], "flag");
        assert_eq!(v["exit_code"], 2);
        assert!(render_text(&r).contains("earliest flagged"));
    }
}
