//! CSV and JSON artifacts.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use smpc_core::sim::SimTrace;

/// Shortest decimal rendering with 9 significant digits (like C's `%.9g`).
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

fn trim(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig9).unwrap_or_default()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// `t, agent, s, v, a, a_ref, advice, dv, colliding`, one row per fine step
/// and agent.
pub fn write_trace_csv(path: &Path, trace: &SimTrace, names: &[String]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "agent", "s", "v", "a", "a_ref", "advice", "dv", "colliding"])?;
    for r in &trace.rows {
        w.write_record([
            fmt_sig9(r.t),
            names[r.agent].clone(),
            fmt_sig9(r.s),
            fmt_sig9(r.v),
            fmt_sig9(r.a),
            fmt_sig9(r.a_ref),
            fmt_sig9(r.advice),
            fmt_sig9(r.dv),
            (r.colliding as u8).to_string(),
        ])?;
    }
    w.flush()
}

/// One row per controller step and agent with solver diagnostics.
pub fn write_controller_csv(path: &Path, trace: &SimTrace, names: &[String]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "k",
        "t",
        "agent",
        "advice",
        "du0",
        "safety_specs",
        "mean_v_active",
        "ccp_iterations",
        "total_slack",
        "soft_infeasible",
        "state_slack",
        "fallback",
        "min_safety_margin",
        "envelope_center_1",
        "envelope_width_1",
    ])?;
    for c in &trace.controller {
        let d = c.diagnostics.as_ref();
        let o = d.and_then(|d| d.ocp.as_ref());
        w.write_record([
            c.k.to_string(),
            fmt_sig9(c.t),
            names[c.agent].clone(),
            fmt_sig9(c.advice),
            opt(d.map(|d| d.du0)),
            d.map(|d| d.safety_specs.to_string()).unwrap_or_default(),
            d.map(|d| (d.mean_v_active as u8).to_string()).unwrap_or_default(),
            o.map(|o| o.ccp_iterations.to_string()).unwrap_or_default(),
            opt(o.map(|o| o.total_slack)),
            o.map(|o| (o.soft_infeasible as u8).to_string()).unwrap_or_default(),
            opt(o.map(|o| o.state_slack)),
            d.map(|d| (d.fallback as u8).to_string()).unwrap_or_default(),
            opt(o.and_then(|o| o.min_safety_margin.is_finite().then_some(o.min_safety_margin))),
            opt(d.map(|d| d.envelope_center_1)),
            opt(d.map(|d| d.envelope_width_1)),
        ])?;
    }
    w.flush()
}
