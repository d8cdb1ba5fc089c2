use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mghc::config::{parameter_hash, parse_config, render_config};
use mghc::csvio::TimeSeries;
use mghc::engine::{self, SimConfig, SimResult};
use mghc::stability::{classify, Verdict};
use mghc::svg::render_svg;
use mghc::sweep::{self, render_table, ScenarioSpec, SweepOptions, TableFormat};

#[derive(Parser)]
#[command(name = "mghc", version, about = "Microgrid islanding simulator and PV hosting-capacity sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and classify it.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Also write run.svg.
        #[arg(long)]
        plot: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the scenario x penetration matrix and report hosting capacity.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated penetration fractions, e.g. 0,0.1,0.2.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Comma-separated scenario labels: low_off, low_on, high_off, high_on.
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<String>>,
        /// Bisect the stability boundary down to this resolution.
        #[arg(long)]
        refine: Option<f64>,
        /// Write one CSV per simulated cell.
        #[arg(long)]
        keep_series: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render a saved time-series CSV as SVG.
    Plot { csv: PathBuf, svg: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, plot, out } => cmd_simulate(&config, plot, &out),
        Command::Sweep {
            config,
            fractions,
            scenarios,
            refine,
            keep_series,
            out,
        } => cmd_sweep(&config, fractions, scenarios, refine, keep_series, &out),
        Command::Plot { csv, svg } => cmd_plot(&csv, &svg),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Refuses to write over the configuration that was read.
fn guard_output(path: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    if let Some(target) = canon(path) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&target)) {
            bail!("refusing to overwrite input file {}", path.display());
        }
    }
    Ok(())
}

fn write_output(path: &Path, contents: &str, inputs: &[&Path]) -> Result<()> {
    guard_output(path, inputs)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_footer(cfg: &SimConfig, verdict: &Verdict) -> Vec<String> {
    let mut footer = vec![
        format!("verdict: {verdict}"),
        format!("parameter_hash: {}", parameter_hash(cfg)),
        format!("f_nominal_hz: {}", cfg.network.f_nominal_hz),
        format!("plot_title: {}", plot_title(cfg)),
        "config:".to_string(),
    ];
    footer.extend(render_config(cfg).lines().map(|l| format!("  {l}")));
    footer
}

fn series_for(cfg: &SimConfig, result: &SimResult, verdict: &Verdict) -> Result<TimeSeries> {
    Ok(TimeSeries::from_result(
        result,
        &cfg.engine.record_buses,
        run_footer(cfg, verdict),
    )?)
}

fn cmd_simulate(config: &Path, plot: bool, out: &Path) -> Result<ExitCode> {
    let cfg = parse_config(config).with_context(|| format!("loading {}", config.display()))?;
    let result = engine::run(&cfg)?;
    let verdict = classify(&result, &cfg.stability)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let series = series_for(&cfg, &result, &verdict)?;
    write_output(&out.join("timeseries.csv"), &series.render(), &[config])?;

    let m = &verdict.metrics;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    let mut text = format!("{verdict}\n");
    text.push_str(&format!("envelope_ratio: {}\n", opt(m.envelope_ratio)));
    text.push_str(&format!("r_speed: {}\nr_torque: {}\n", opt(m.r_speed), opt(m.r_torque)));
    text.push_str(&format!(
        "f_final_hz: {}\nf_min_hz: {}\nf_max_hz: {}\n",
        opt(m.f_final_hz),
        opt(m.f_min_hz),
        opt(m.f_max_hz)
    ));
    text.push_str(&format!("termination: {:?}\n", result.termination));
    text.push_str(&format!("pv_ride_through_trip: {}\n", result.trips.pv_ride_through));
    text.push_str(&format!("parameter_hash: {}\n\n", parameter_hash(&cfg)));
    text.push_str(&render_config(&cfg));
    write_output(&out.join("verdict.txt"), &text, &[config])?;

    if plot {
        let svg = render_svg(&series, &plot_title(&cfg))?;
        write_output(&out.join("run.svg"), &svg, &[config])?;
    }
    println!("{verdict}");
    Ok(if verdict.is_stable() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn plot_title(cfg: &SimConfig) -> String {
    format!(
        "load {} MW, diesel {}, PV {:.0}% ({} MW)",
        cfg.load.mw(),
        cfg.diesel,
        cfg.pv_fraction * 100.0,
        (cfg.pv_capacity_mw() * 1e6).round() / 1e6
    )
}

fn cmd_sweep(
    config: &Path,
    fractions: Option<Vec<f64>>,
    scenarios: Option<Vec<String>>,
    refine: Option<f64>,
    keep_series: bool,
    out: &Path,
) -> Result<ExitCode> {
    let cfg = parse_config(config).with_context(|| format!("loading {}", config.display()))?;
    let fractions = fractions.unwrap_or_else(|| cfg.sweep.fractions.clone());
    let labels = scenarios.unwrap_or_else(|| cfg.sweep.scenarios.clone());
    let specs = labels
        .iter()
        .map(|l| ScenarioSpec::by_label(l))
        .collect::<mghc::Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let series_dir = out.join("series");
    if keep_series {
        fs::create_dir_all(&series_dir)?;
    }
    let save = |spec: &ScenarioSpec, fraction: f64, result: &SimResult| -> mghc::Result<()> {
        let cell_cfg = spec.config(&cfg, fraction);
        let verdict = classify(result, &cell_cfg.stability)?;
        let series = TimeSeries::from_result(result, &cell_cfg.engine.record_buses, run_footer(&cell_cfg, &verdict))?;
        fs::write(series_dir.join(format!("{}_{}.csv", spec.label, fraction)), series.render())?;
        Ok(())
    };
    let opts = SweepOptions {
        refine: refine.or(cfg.sweep.refine),
        on_cell: if keep_series { Some(&save) } else { None },
        ..SweepOptions::default()
    };
    let report = sweep::run_sweep_with(&cfg, &specs, &fractions, &opts)?;
    let text = render_table(&report, TableFormat::Text);
    write_output(&out.join("hosting_report.txt"), &text, &[config])?;
    write_output(
        &out.join("hosting_report.csv"),
        &render_table(&report, TableFormat::Csv),
        &[config],
    )?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(csv: &Path, svg: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let series = TimeSeries::parse(&text).with_context(|| format!("parsing {}", csv.display()))?;
    let title = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let title = series
        .footer_value("plot_title")
        .map(str::to_string)
        .unwrap_or(title);
    write_output(svg, &render_svg(&series, &title)?, &[csv])?;
    Ok(ExitCode::SUCCESS)
}
