//! Scenario x penetration sweeps and hosting-capacity reporting.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parameter_hash, DieselStatus, LoadLevel};
use crate::engine::{self, SimConfig, SimResult};
use crate::stability::{classify, Outcome, Thresholds, Verdict};
use crate::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
pub const THREADS_ENV: &str = "MGHC_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub fractions: Vec<f64>,
    /// Scenario labels, a subset of `low_off`, `low_on`, `high_off`, `high_on`.
    pub scenarios: Vec<String>,
    /// Bisection resolution for `--refine`; no refinement when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            scenarios: ScenarioSpec::standard().into_iter().map(|s| s.label).collect(),
            refine: None,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        check_fractions(&self.fractions).map_err(|e| Error::config("sweep.fractions", e.to_string()))?;
        for label in &self.scenarios {
            ScenarioSpec::by_label(label).map_err(|e| Error::config("sweep.scenarios", e.to_string()))?;
        }
        if let Some(r) = self.refine {
            if !(r > 0.0) {
                return Err(Error::config("sweep.refine", "must be positive"));
            }
        }
        Ok(())
    }
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no fractions given".into()));
    }
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::InvalidArgument("fractions must be finite and non-negative".into()));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("fractions must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub label: String,
    pub load: LoadLevel,
    pub diesel: DieselStatus,
}

impl ScenarioSpec {
    pub fn new(load: LoadLevel, diesel: DieselStatus) -> Self {
        let level = match load {
            LoadLevel::Low => "low".to_string(),
            LoadLevel::High => "high".to_string(),
            LoadLevel::Mw(v) => format!("{v}mw"),
        };
        let status = match diesel {
            DieselStatus::On => "on",
            DieselStatus::Off => "off",
        };
        ScenarioSpec {
            label: format!("{level}_{status}"),
            load,
            diesel,
        }
    }

    /// The four load x diesel scenarios in report column order.
    pub fn standard() -> Vec<ScenarioSpec> {
        vec![
            ScenarioSpec::new(LoadLevel::Low, DieselStatus::Off),
            ScenarioSpec::new(LoadLevel::Low, DieselStatus::On),
            ScenarioSpec::new(LoadLevel::High, DieselStatus::Off),
            ScenarioSpec::new(LoadLevel::High, DieselStatus::On),
        ]
    }

    pub fn by_label(label: &str) -> Result<ScenarioSpec> {
        let want = label.trim().to_ascii_lowercase();
        ScenarioSpec::standard()
            .into_iter()
            .find(|s| s.label == want)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown scenario `{label}` (expected low_off, low_on, high_off or high_on)"
                ))
            })
    }

    pub fn load_mw(&self) -> f64 {
        self.load.mw()
    }

    /// Column heading, e.g. "Low OFF".
    pub fn title(&self) -> String {
        let level = match self.load {
            LoadLevel::Low => "Low".to_string(),
            LoadLevel::High => "High".to_string(),
            LoadLevel::Mw(v) => format!("{v} MW"),
        };
        format!("{level} {}", self.diesel)
    }

    pub fn config(&self, base: &SimConfig, fraction: f64) -> SimConfig {
        SimConfig {
            load: self.load,
            diesel: self.diesel,
            pv_fraction: fraction,
            ..base.clone()
        }
    }
}

/// PV capacity for a penetration level.
pub fn penetration_mw(load_mw: f64, fraction: f64) -> Result<f64> {
    if !(fraction >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "penetration fraction must be non-negative, got {fraction}"
        )));
    }
    Ok(load_mw * fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HostingCapacity {
    /// Unstable already at the lowest tested level.
    None,
    Fraction { value: f64, sweep_limited: bool },
}

impl HostingCapacity {
    pub fn fraction(&self) -> Option<f64> {
        match self {
            HostingCapacity::None => None,
            HostingCapacity::Fraction { value, .. } => Some(*value),
        }
    }
}

/// Largest tested fraction below the first unstable one.
pub fn hosting_capacity(verdicts: &[(f64, Outcome)]) -> Result<HostingCapacity> {
    if verdicts.is_empty() {
        return Err(Error::InvalidArgument("empty verdict list".into()));
    }
    match verdicts.iter().position(|(_, o)| *o == Outcome::Unstable) {
        Some(0) => Ok(HostingCapacity::None),
        Some(k) => Ok(HostingCapacity::Fraction {
            value: verdicts[k - 1].0,
            sweep_limited: false,
        }),
        None => Ok(HostingCapacity::Fraction {
            value: verdicts[verdicts.len() - 1].0,
            sweep_limited: true,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub fraction: f64,
    pub p_mw: f64,
    pub verdict: Verdict,
}

/// Bisection result between the last stable and first unstable level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub resolution: f64,
    pub stable: f64,
    pub unstable: f64,
    pub probes: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioColumn {
    pub scenario: ScenarioSpec,
    pub cells: Vec<SweepCell>,
    pub hosting: HostingCapacity,
    pub refined: Option<Refinement>,
}

impl ScenarioColumn {
    pub fn hosting_mw(&self) -> Option<f64> {
        self.hosting.fraction().map(|f| self.scenario.load_mw() * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub parameter_hash: String,
    pub dt_s: f64,
    pub t_end_s: f64,
    pub thresholds: Thresholds,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostingReport {
    pub fractions: Vec<f64>,
    pub columns: Vec<ScenarioColumn>,
    pub meta: ReportMeta,
}

/// Number of worker threads from `MGHC_THREADS` (unset or 0 means all cores).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

pub struct SweepOptions<'a> {
    /// 0 = rayon default.
    pub threads: usize,
    pub refine: Option<f64>,
    /// Called once per simulated cell, e.g. to persist its time series.
    pub on_cell: Option<&'a (dyn Fn(&ScenarioSpec, f64, &SimResult) -> Result<()> + Sync)>,
}

impl Default for SweepOptions<'_> {
    fn default() -> Self {
        SweepOptions {
            threads: threads_from_env(),
            refine: None,
            on_cell: None,
        }
    }
}

fn simulate_cell(
    base: &SimConfig,
    spec: &ScenarioSpec,
    fraction: f64,
    on_cell: Option<&(dyn Fn(&ScenarioSpec, f64, &SimResult) -> Result<()> + Sync)>,
) -> Result<SweepCell> {
    let wrap = |e: Error| Error::Cell {
        scenario: spec.label.clone(),
        fraction,
        source: Box::new(e),
    };
    let p_mw = penetration_mw(spec.load_mw(), fraction).map_err(wrap)?;
    let cfg = spec.config(base, fraction);
    let result = engine::run(&cfg).map_err(wrap)?;
    let verdict = classify(&result, &cfg.stability).map_err(wrap)?;
    if let Some(cb) = on_cell {
        cb(spec, fraction, &result).map_err(wrap)?;
    }
    Ok(SweepCell {
        fraction,
        p_mw,
        verdict,
    })
}

pub fn run_sweep(base: &SimConfig, scenarios: &[ScenarioSpec], fractions: &[f64]) -> Result<HostingReport> {
    run_sweep_with(base, scenarios, fractions, &SweepOptions::default())
}

pub fn run_sweep_with(
    base: &SimConfig,
    scenarios: &[ScenarioSpec],
    fractions: &[f64],
    opts: &SweepOptions<'_>,
) -> Result<HostingReport> {
    check_fractions(fractions)?;
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios given".into()));
    }
    if let Some(r) = opts.refine {
        if !(r > 0.0) {
            return Err(Error::InvalidArgument("refine resolution must be positive".into()));
        }
    }
    let started = std::time::SystemTime::now();
    let clock = std::time::Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let jobs: Vec<(usize, f64)> = (0..scenarios.len())
        .flat_map(|s| fractions.iter().map(move |&f| (s, f)))
        .collect();
    let cells: Vec<SweepCell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, f)| simulate_cell(base, &scenarios[s], f, opts.on_cell))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut columns = Vec::with_capacity(scenarios.len());
    for (s, spec) in scenarios.iter().enumerate() {
        let cells: Vec<SweepCell> = cells[s * fractions.len()..(s + 1) * fractions.len()].to_vec();
        let outcomes: Vec<(f64, Outcome)> = cells.iter().map(|c| (c.fraction, c.verdict.outcome)).collect();
        let hosting = hosting_capacity(&outcomes)?;
        columns.push(ScenarioColumn {
            scenario: spec.clone(),
            cells,
            hosting,
            refined: None,
        });
    }

    if let Some(res) = opts.refine {
        pool.install(|| {
            columns
                .par_iter_mut()
                .try_for_each(|col| -> Result<()> {
                    col.refined = refine_column(base, col, res)?;
                    Ok(())
                })
        })?;
    }

    Ok(HostingReport {
        fractions: fractions.to_vec(),
        columns,
        meta: ReportMeta {
            parameter_hash: parameter_hash(base),
            dt_s: base.engine.dt_s,
            t_end_s: base.engine.t_end_s,
            thresholds: base.stability,
            started_unix_s: started
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            elapsed_s: clock.elapsed().as_secs_f64(),
        },
    })
}

/// Bisects between the hosting capacity and the first unstable level.
fn refine_column(base: &SimConfig, col: &ScenarioColumn, resolution: f64) -> Result<Option<Refinement>> {
    let (mut lo, sweep_limited) = match col.hosting {
        HostingCapacity::Fraction { value, sweep_limited } => (value, sweep_limited),
        HostingCapacity::None => return Ok(None),
    };
    if sweep_limited {
        return Ok(None);
    }
    let mut hi = match col.cells.iter().find(|c| c.fraction > lo) {
        Some(c) => c.fraction,
        None => return Ok(None),
    };
    let mut probes = Vec::new();
    while hi - lo > resolution * (1.0 + 1e-9) {
        let mid = 0.5 * (lo + hi);
        let cell = simulate_cell(base, &col.scenario, mid, None)?;
        if cell.verdict.is_stable() {
            lo = mid;
        } else {
            hi = mid;
        }
        probes.push(cell);
    }
    Ok(Some(Refinement {
        resolution,
        stable: lo,
        unstable: hi,
        probes,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

/// Row label for a penetration level; the 70% probe stands for "above 60%".
pub fn fraction_label(f: f64) -> String {
    if (f - 0.7).abs() < 1e-12 {
        return ">60%".to_string();
    }
    format!("{}%", percent(f))
}

fn percent(f: f64) -> String {
    let p = (f * 100.0 * 1e6).round() / 1e6;
    let s = format!("{p}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn hosting_label(col: &ScenarioColumn) -> String {
    match col.hosting {
        HostingCapacity::None => "NONE".into(),
        HostingCapacity::Fraction { value, sweep_limited } => {
            let mw = col.scenario.load_mw() * value;
            let mut s = format!("{}% ({} MW)", percent(value), round6(mw));
            if sweep_limited {
                s.push_str(" sweep-limited");
            }
            s
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn render_table(report: &HostingReport, format: TableFormat) -> String {
    match format {
        TableFormat::Text => render_text(report),
        TableFormat::Csv => render_csv(report),
    }
}

fn render_text(report: &HostingReport) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["PV penetration".to_string()];
    header.extend(report.columns.iter().map(|c| c.scenario.title()));
    rows.push(header);
    for (i, &f) in report.fractions.iter().enumerate() {
        let mut row = vec![fraction_label(f)];
        row.extend(report.columns.iter().map(|c| c.cells[i].verdict.outcome.to_string()));
        rows.push(row);
    }
    let body_rows = rows.len();
    let mut hc = vec!["Hosting capacity".to_string()];
    hc.extend(report.columns.iter().map(hosting_label));
    rows.push(hc);
    if report.columns.iter().any(|c| c.refined.is_some()) {
        let mut r = vec!["Refined".to_string()];
        r.extend(report.columns.iter().map(|c| match &c.refined {
            Some(rf) => format!("[{}%, {}%)", percent(rf.stable), percent(rf.unstable)),
            None => "-".into(),
        }));
        rows.push(r);
    }

    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |r: &[String]| -> String {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |", cells.join(" | "))
    };
    let rule = format!(
        "|{}|",
        widths
            .iter()
            .map(|w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("|")
    );
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        if i == 1 || i == body_rows {
            out.push_str(&rule);
            out.push('\n');
        }
        out.push_str(&line(r));
        out.push('\n');
    }
    let m = &report.meta;
    let _ = writeln!(out);
    let _ = writeln!(out, "parameter hash: {}", m.parameter_hash);
    let _ = writeln!(out, "dt_s: {}  t_end_s: {}", m.dt_s, m.t_end_s);
    let _ = writeln!(
        out,
        "thresholds: settle_s={} window_s={} r_damped={} r_growing={}",
        m.thresholds.settle_s, m.thresholds.window_s, m.thresholds.r_damped, m.thresholds.r_growing
    );
    out
}

fn render_csv(report: &HostingReport) -> String {
    let mut out = String::from("fraction,label");
    for c in &report.columns {
        out.push(',');
        out.push_str(&c.scenario.label);
    }
    out.push('\n');
    for (i, &f) in report.fractions.iter().enumerate() {
        let _ = write!(out, "{f},{}", fraction_label(f));
        for c in &report.columns {
            let _ = write!(out, ",{}", c.cells[i].verdict.outcome);
        }
        out.push('\n');
    }
    out.push_str("hosting_capacity,");
    for c in &report.columns {
        out.push(',');
        match c.hosting.fraction() {
            Some(f) => {
                let _ = write!(out, "{f}");
            }
            None => out.push_str("NONE"),
        }
    }
    out.push('\n');
    out.push_str("hosting_capacity_mw,");
    for c in &report.columns {
        out.push(',');
        match c.hosting_mw() {
            Some(mw) => {
                let _ = write!(out, "{}", round6(mw));
            }
            None => out.push_str("NONE"),
        }
    }
    out.push('\n');
    let _ = writeln!(out, "parameter_hash,{}", report.meta.parameter_hash);
    out
}

/// Verdict matrix read back from the CSV rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub scenarios: Vec<String>,
    pub fractions: Vec<f64>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<Outcome>>,
    /// `None` for columns without hosting capacity.
    pub hosting: Vec<Option<f64>>,
    pub parameter_hash: Option<String>,
}

pub fn parse_table_csv(text: &str) -> Result<ParsedTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Csv {
        row: 1,
        message: "empty report".into(),
    })?;
    let head: Vec<&str> = header.split(',').collect();
    if head.len() < 2 || head[0] != "fraction" || head[1] != "label" {
        return Err(Error::Csv {
            row: 1,
            message: "expected `fraction,label,...` header".into(),
        });
    }
    let scenarios: Vec<String> = head[2..].iter().map(|s| s.to_string()).collect();
    let mut table = ParsedTable {
        scenarios,
        fractions: Vec::new(),
        cells: Vec::new(),
        hosting: Vec::new(),
        parameter_hash: None,
    };
    for (i, line) in lines {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |message: String| Error::Csv { row, message };
        match fields[0] {
            "hosting_capacity" => {
                table.hosting = fields[2..]
                    .iter()
                    .map(|s| match *s {
                        "NONE" => Ok(None),
                        v => v.parse().map(Some).map_err(|_| bad(format!("bad capacity `{v}`"))),
                    })
                    .collect::<Result<_>>()?;
            }
            "hosting_capacity_mw" => {}
            "parameter_hash" => table.parameter_hash = fields.get(1).map(|s| s.to_string()),
            f => {
                let fraction: f64 = f.parse().map_err(|_| bad(format!("bad fraction `{f}`")))?;
                if fields.len() != table.scenarios.len() + 2 {
                    return Err(bad(format!("expected {} fields", table.scenarios.len() + 2)));
                }
                let cells = fields[2..]
                    .iter()
                    .map(|s| match *s {
                        "Stable" => Ok(Outcome::Stable),
                        "Unstable" => Ok(Outcome::Unstable),
                        v => Err(bad(format!("bad verdict `{v}`"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                table.fractions.push(fraction);
                table.cells.push(cells);
            }
        }
    }
    Ok(table)
}
