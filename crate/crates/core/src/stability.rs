//! Stable/unstable classification of a finished run.
//!
//! Post-islanding oscillations of genset speed and torque are cut into fixed windows;
//! the ratio of the last to the first window's peak-to-peak amplitude decides whether
//! they decay. Trips, frequency limits and frequency recovery are checked first/last.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{channels, SimResult, Termination};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Time after islanding excluded from the envelope test, s.
    pub settle_s: f64,
    pub window_s: f64,
    pub r_damped: f64,
    pub r_growing: f64,
    /// Genset frequency band; leaving it is a device trip, Hz.
    pub f_trip_band_hz: [f64; 2],
    /// Allowed final frequency deviation for a stable verdict, Hz.
    pub f_final_tol_hz: f64,
    /// Peak-to-peak amplitudes below this are treated as zero.
    pub amplitude_floor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            settle_s: 0.5,
            window_s: 1.0,
            r_damped: 0.5,
            r_growing: 1.1,
            f_trip_band_hz: [55.0, 65.0],
            f_final_tol_hz: 0.1,
            amplitude_floor: 1e-7,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0) {
            return Err(Error::config("stability.window_s", "must be positive"));
        }
        if !(self.settle_s >= 0.0) {
            return Err(Error::config("stability.settle_s", "must be non-negative"));
        }
        if !(self.r_damped > 0.0 && self.r_damped <= self.r_growing) {
            return Err(Error::config(
                "stability.r_damped",
                "must be positive and not above r_growing",
            ));
        }
        if !(self.f_trip_band_hz[0] < self.f_trip_band_hz[1]) {
            return Err(Error::config("stability.f_trip_band_hz", "must be increasing"));
        }
        if !(self.f_final_tol_hz > 0.0) || !(self.amplitude_floor >= 0.0) {
            return Err(Error::config(
                "stability.f_final_tol_hz",
                "tolerances must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Stable,
    Unstable,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Stable => "Stable",
            Outcome::Unstable => "Unstable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    GrowingOscillation,
    SustainedOscillation,
    /// Oscillations died out but frequency did not return to nominal.
    FrequencyTrip,
    VoltageTrip,
    DeviceTrip,
    SolverDivergence,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::GrowingOscillation => "GROWING_OSCILLATION",
            Reason::SustainedOscillation => "SUSTAINED_OSCILLATION",
            Reason::FrequencyTrip => "FREQUENCY_TRIP",
            Reason::VoltageTrip => "VOLTAGE_TRIP",
            Reason::DeviceTrip => "DEVICE_TRIP",
            Reason::SolverDivergence => "SOLVER_DIVERGENCE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub r_speed: Option<f64>,
    pub r_torque: Option<f64>,
    /// max(r_speed, r_torque).
    pub envelope_ratio: Option<f64>,
    pub f_final_hz: Option<f64>,
    pub f_min_hz: Option<f64>,
    pub f_max_hz: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub reason: Option<Reason>,
    pub metrics: Metrics,
}

impl Verdict {
    fn stable(metrics: Metrics) -> Self {
        Verdict {
            outcome: Outcome::Stable,
            reason: None,
            metrics,
        }
    }

    fn unstable(reason: Reason, metrics: Metrics) -> Self {
        Verdict {
            outcome: Outcome::Unstable,
            reason: Some(reason),
            metrics,
        }
    }

    pub fn is_stable(&self) -> bool {
        self.outcome == Outcome::Stable
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            Some(r) => write!(f, "UNSTABLE ({r})"),
            None => write!(f, "STABLE"),
        }
    }
}

/// Peak-to-peak amplitude of `values` in consecutive windows of `window_s` starting at
/// `t_start`. Only windows that are fully covered by the samples count.
pub fn envelope(time: &[f64], values: &[f64], t_start: f64, window_s: f64) -> Result<Vec<f64>> {
    if time.len() != values.len() {
        return Err(Error::InvalidInput("time and value lengths differ".into()));
    }
    if !(window_s > 0.0) {
        return Err(Error::InvalidArgument("window_s must be positive".into()));
    }
    let eps = 1e-9;
    let t_last = match time.last() {
        Some(&t) => t,
        None => return Err(Error::InsufficientData("empty series".into())),
    };
    let n_windows = ((t_last - t_start + eps) / window_s).floor().max(0.0) as usize;
    if n_windows < 2 {
        return Err(Error::InsufficientData(format!(
            "{n_windows} full window(s) of {window_s} s after t = {t_start} s"
        )));
    }
    let mut amps = Vec::with_capacity(n_windows);
    for k in 0..n_windows {
        let a = t_start + k as f64 * window_s - eps;
        let b = t_start + (k + 1) as f64 * window_s + eps;
        let lo = time.partition_point(|&t| t < a);
        let hi = time.partition_point(|&t| t <= b);
        let slice = &values[lo..hi];
        if slice.is_empty() {
            return Err(Error::InsufficientData(format!("window {k} holds no samples")));
        }
        let (mn, mx) = slice
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &v| (mn.min(v), mx.max(v)));
        amps.push(mx - mn);
    }
    Ok(amps)
}

/// Last-over-first window amplitude ratio with the noise floor applied.
fn decay_ratio(amps: &[f64], floor: f64) -> f64 {
    let first = amps[0];
    let last = amps[amps.len() - 1];
    if last <= floor {
        0.0
    } else if first <= floor {
        f64::INFINITY
    } else {
        last / first
    }
}

pub fn classify(result: &SimResult, th: &Thresholds) -> Result<Verdict> {
    let speed = result.require(channels::GEN_SPEED)?;
    let torque = result.require(channels::GEN_TORQUE)?;
    let online: Vec<bool> = match result.channel(channels::GEN_ONLINE) {
        Some(c) => c.iter().map(|&v| v > 0.5).collect(),
        None => speed.iter().map(|&w| w > 0.0).collect(),
    };
    let f_nom = result.f_nominal_hz;
    let mut metrics = Metrics::default();

    let freqs: Vec<f64> = speed
        .iter()
        .zip(&online)
        .filter(|(_, &on)| on)
        .map(|(&w, _)| w * f_nom)
        .collect();
    if !freqs.is_empty() {
        metrics.f_min_hz = Some(freqs.iter().copied().fold(f64::INFINITY, f64::min));
        metrics.f_max_hz = Some(freqs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    if online.last() == Some(&true) {
        metrics.f_final_hz = speed.last().map(|w| w * f_nom);
    }

    if result.termination != Termination::Completed {
        return Ok(Verdict::unstable(Reason::SolverDivergence, metrics));
    }
    if result.trips.pv_ride_through {
        return Ok(Verdict::unstable(Reason::DeviceTrip, metrics));
    }
    let [f_lo, f_hi] = th.f_trip_band_hz;
    if freqs.iter().any(|&f| f < f_lo || f > f_hi) {
        return Ok(Verdict::unstable(Reason::DeviceTrip, metrics));
    }

    let t_start = result.islanding_time_s.unwrap_or(0.0) + th.settle_s;
    let r_speed = decay_ratio(&envelope(&result.time, speed, t_start, th.window_s)?, th.amplitude_floor);
    let r_torque = decay_ratio(&envelope(&result.time, torque, t_start, th.window_s)?, th.amplitude_floor);
    let r = r_speed.max(r_torque);
    metrics.r_speed = Some(r_speed);
    metrics.r_torque = Some(r_torque);
    metrics.envelope_ratio = Some(r);

    if r > th.r_growing {
        return Ok(Verdict::unstable(Reason::GrowingOscillation, metrics));
    }
    if r > th.r_damped {
        return Ok(Verdict::unstable(Reason::SustainedOscillation, metrics));
    }
    if result.islanding_time_s.is_some() {
        match metrics.f_final_hz {
            Some(f) if (f - f_nom).abs() <= th.f_final_tol_hz => {}
            _ => return Ok(Verdict::unstable(Reason::FrequencyTrip, metrics)),
        }
    }
    Ok(Verdict::stable(metrics))
}
