//! Minimal deterministic SVG line charts: six stacked panels for genset P, Q, speed and
//! torque, PV P/Q and the reported bus P/Q.

use std::fmt::Write as _;

use crate::csvio::TimeSeries;
use crate::engine::channels;
use crate::{Error, Result};

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 150.0;
const GAP: f64 = 30.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

struct Trace {
    label: String,
    values: Vec<f64>,
}

struct Panel {
    title: String,
    unit: &'static str,
    traces: Vec<Trace>,
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn panels(ts: &TimeSeries) -> Result<Vec<Panel>> {
    let col = |name: &str| -> Result<Vec<f64>> {
        ts.column(name)
            .map(|c| c.to_vec())
            .ok_or_else(|| Error::InvalidInput(format!("missing column `{name}`")))
    };
    let f_nom: f64 = ts
        .footer_value("f_nominal_hz")
        .and_then(|v| v.parse().ok())
        .unwrap_or(60.0);
    // An offline machine records zero speed; leave those samples out of the trace.
    let speed_hz = col(channels::GEN_SPEED)?
        .into_iter()
        .map(|w| if w == 0.0 { f64::NAN } else { w * f_nom })
        .collect();
    let bus = ts
        .header
        .iter()
        .find_map(|h| h.strip_prefix("bus").and_then(|r| r.strip_suffix("_p_mw")))
        .ok_or_else(|| Error::InvalidInput("no reported bus columns".into()))?
        .to_string();
    let trace = |label: &str, values: Vec<f64>| Trace {
        label: label.to_string(),
        values,
    };
    Ok(vec![
        Panel {
            title: "Genset real power".into(),
            unit: "MW",
            traces: vec![trace("P", col(channels::GEN_P)?)],
        },
        Panel {
            title: "Genset reactive power".into(),
            unit: "Mvar",
            traces: vec![trace("Q", col(channels::GEN_Q)?)],
        },
        Panel {
            title: "Genset speed".into(),
            unit: "Hz",
            traces: vec![trace("f", speed_hz)],
        },
        Panel {
            title: "Genset torque".into(),
            unit: "pu",
            traces: vec![trace("Te", col(channels::GEN_TORQUE)?)],
        },
        Panel {
            title: "PV output".into(),
            unit: "MW / Mvar",
            traces: vec![trace("P", col(channels::PV_P)?), trace("Q", col(channels::PV_Q)?)],
        },
        Panel {
            title: format!("Bus {bus} flow"),
            unit: "MW / Mvar",
            traces: vec![
                trace("P", col(&format!("bus{bus}_p_mw"))?),
                trace("Q", col(&format!("bus{bus}_q_mvar"))?),
            ],
        },
    ])
}

fn value_range(traces: &[Trace]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in traces.iter().flat_map(|t| t.values.iter()).filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 1e-9 * hi.abs().max(lo.abs()).max(1e-12) {
        0.05 * span
    } else {
        0.5 * hi.abs().max(1e-3)
    };
    (lo - pad, hi + pad)
}

/// Renders the six-panel chart. Identical input gives identical output.
pub fn render_svg(ts: &TimeSeries, title: &str) -> Result<String> {
    let time = ts.column("t").ok_or_else(|| Error::InvalidInput("missing column `t`".into()))?;
    if time.len() < 2 {
        return Err(Error::InsufficientData("need at least two samples to plot".into()));
    }
    let panels = panels(ts)?;
    let (t0, t1) = (time[0], time[time.len() - 1]);
    let plot_w = WIDTH - LEFT - RIGHT;
    let height = TOP + panels.len() as f64 * (PANEL_H + GAP) + 10.0;
    let x_of = |t: f64| LEFT + (t - t0) / (t1 - t0).max(1e-12) * plot_w;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        fmt(WIDTH),
        fmt(height),
        fmt(WIDTH),
        fmt(height)
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        fmt(WIDTH / 2.0),
        escape(title)
    );

    for (k, panel) in panels.iter().enumerate() {
        let y0 = TOP + k as f64 * (PANEL_H + GAP);
        let (lo, hi) = value_range(&panel.traces);
        let y_of = |v: f64| y0 + PANEL_H - (v - lo) / (hi - lo) * PANEL_H;
        let _ = writeln!(out, r#"<g class="panel" id="panel{k}">"#);
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            fmt(LEFT),
            fmt(y0),
            fmt(plot_w),
            fmt(PANEL_H)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">{} ({})</text>"#,
            fmt(LEFT + 4.0),
            fmt(y0 - 4.0),
            escape(&panel.title),
            panel.unit
        );
        for (v, anchor_y) in [(hi, y0 + 10.0), (lo, y0 + PANEL_H)] {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                fmt(LEFT - 4.0),
                fmt(anchor_y),
                tick(v)
            );
        }
        let mut s = t0.ceil();
        while s <= t1 + 1e-9 {
            let x = x_of(s);
            let _ = writeln!(
                out,
                r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#dddddd"/>"##,
                fmt(y0),
                fmt(y0 + PANEL_H),
                x = fmt(x)
            );
            if k + 1 == panels.len() {
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                    fmt(x),
                    fmt(y0 + PANEL_H + 14.0),
                    tick(s)
                );
            }
            s += 1.0;
        }
        for (ti, trace) in panel.traces.iter().enumerate() {
            let color = COLORS[ti % COLORS.len()];
            for segment in segments(time, &trace.values) {
                let pts: Vec<String> = segment
                    .iter()
                    .map(|&(t, v)| format!("{},{}", fmt(x_of(t)), fmt(y_of(v))))
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
                fmt(WIDTH - RIGHT - 4.0 - 30.0 * ti as f64),
                fmt(y0 - 4.0),
                escape(&trace.label)
            );
        }
        let _ = writeln!(out, "</g>");
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#,
        fmt(LEFT + plot_w / 2.0),
        fmt(height - 2.0)
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Splits a trace at non-finite samples.
fn segments(time: &[f64], values: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let mut segs = Vec::new();
    let mut cur = Vec::new();
    for (&t, &v) in time.iter().zip(values) {
        if v.is_finite() {
            cur.push((t, v));
        } else if !cur.is_empty() {
            segs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        segs.push(cur);
    }
    segs
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
