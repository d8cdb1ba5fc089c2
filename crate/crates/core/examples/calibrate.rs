//! Calibration helper: prints the scenario matrix with verdict details for a config,
//! and optionally random-searches parameter overrides against a target matrix.
//!
//! cargo run --example calibrate -- <config.toml>
//! cargo run --example calibrate -- <config.toml> search <iterations> <seed>

use std::collections::BTreeMap;
use std::env;
use std::sync::Mutex;

use mghc::config::parse_config;
use mghc::engine::{channels, SimConfig, SimResult};
use mghc::stability::Outcome;
use mghc::sweep::{run_sweep_with, ScenarioSpec, SweepOptions, DEFAULT_FRACTIONS};

/// Stable-through index per standard scenario (number of leading Stable cells).
const TARGET: [usize; 4] = [5, 6, 0, 5];

fn score(cfg: &SimConfig, verbose: bool) -> (usize, Vec<Vec<Outcome>>) {
    let mut specs = ScenarioSpec::standard();
    if let Ok(only) = env::var("CAL_SCEN") {
        specs.retain(|s| only.split(',').any(|o| o == s.label));
    }
    let fractions: Vec<f64> = env::var("CAL_FRAC")
        .map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| DEFAULT_FRACTIONS.to_vec());
    let pll: Mutex<BTreeMap<(String, u64), (f64, f64, Option<f64>)>> = Mutex::new(BTreeMap::new());
    let record = |spec: &ScenarioSpec, fraction: f64, r: &SimResult| -> mghc::Result<()> {
        let f = r.require(channels::PV_PLL_HZ)?;
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for (t, v) in r.time.iter().zip(f) {
            if *t >= r.islanding_time_s.unwrap_or(0.0) && *v > 0.0 {
                hi = hi.max(*v);
                lo = lo.min(*v);
            }
        }
        pll.lock().unwrap().insert((spec.label.clone(), fraction.to_bits()), (lo, hi, r.trips.pv_trip_time_s));
        Ok(())
    };
    let opts = SweepOptions { on_cell: Some(&record), ..SweepOptions::default() };
    let report = match run_sweep_with(cfg, &specs, &fractions, &opts) {
        Ok(r) => r,
        Err(e) => {
            if verbose {
                println!("sweep failed: {e}");
            }
            return (usize::MAX, vec![]);
        }
    };
    let mut misses = 0;
    let mut grid = Vec::new();
    for col in report.columns.iter() {
        let s = ScenarioSpec::standard().iter().position(|x| x.label == col.scenario.label).unwrap();
        let mut outs = Vec::new();
        for c in col.cells.iter() {
            let want = if c.fraction < TARGET[s] as f64 / 10.0 - 1e-9 { Outcome::Stable } else { Outcome::Unstable };
            if c.verdict.outcome != want {
                misses += 1;
            }
            outs.push(c.verdict.outcome);
            if verbose {
                let m = &c.verdict.metrics;
                let pl = pll.lock().unwrap()[&(col.scenario.label.clone(), c.fraction.to_bits())];
                println!(
                    "{:<9} {:>4.2} {:<28} R={:<10} Rs={:<10} Rt={:<10} ffin={:<9} fmin={:<8} fmax={:<8} pll={:.3}/{:.3} trip={:?} {}",
                    col.scenario.label,
                    c.fraction,
                    c.verdict.to_string(),
                    fmt(m.envelope_ratio),
                    fmt(m.r_speed),
                    fmt(m.r_torque),
                    fmt(m.f_final_hz),
                    fmt(m.f_min_hz),
                    fmt(m.f_max_hz),
                    pl.0,
                    pl.1,
                    pl.2,
                    if c.verdict.outcome == want { "" } else { "MISS" }
                );
            }
        }
        grid.push(outs);
    }
    (misses, grid)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Small deterministic generator for the search.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn log_range(&mut self, lo: f64, hi: f64) -> f64 {
        (lo.ln() + self.next() * (hi.ln() - lo.ln())).exp()
    }
}

fn main() {
    let args: Vec<String> = env::args().collect();
    let base = parse_config(args.get(1).expect("config path").as_ref()).expect("config");
    if args.get(2).map(String::as_str) != Some("search") {
        let (misses, _) = score(&base, true);
        println!("misses: {misses}");
        return;
    }
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut rng = Lcg(args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1));
    let mut best = (usize::MAX, base.clone());
    for it in 0..iters {
        let mut c = base.clone();
        c.genset.h = rng.log_range(0.5, 3.0);
        c.genset.d = rng.log_range(0.05, 2.0);
        c.genset.tg = rng.log_range(0.1, 1.0);
        c.genset.ki_iso = rng.log_range(5.0, 60.0);
        c.pv.pll_wn = rng.log_range(10.0, 60.0);
        c.pv.pll_zeta = rng.log_range(0.1, 1.0);
        c.pv.phase_power_gain = rng.log_range(0.5, 10.0);
        c.pv.ramp_rate_pu_s = rng.log_range(0.05, 1.0);
        c.genset.r_droop = rng.log_range(0.03, 0.1);
        let (m, _) = score(&c, false);
        println!(
            "{it:>4} misses={m:<3} h={:.3} d={:.3} tg={:.3} ki={:.2} wn={:.2} zeta={:.3} k={:.3} ramp={:.3} r={:.3}",
            c.genset.h, c.genset.d, c.genset.tg, c.genset.ki_iso, c.pv.pll_wn, c.pv.pll_zeta, c.pv.phase_power_gain, c.pv.ramp_rate_pu_s, c.genset.r_droop
        );
        if m < best.0 {
            best = (m, c);
        }
    }
    println!("best misses: {}", best.0);
    println!("{}", mghc::config::render_config(&best.1));
}
