//! Reduced-order grid-following PV unit.
//!
//! The converter follows the phase of its voltage source through a type-2 PLL and
//! injects active power at unity power factor. The injected power drops with the PLL
//! phase error; `phase_power_gain` adds a first-order sensitivity to that error
//! (a current-control frame that is rotated against the measured voltage), and output
//! is never allowed above the array power.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::netmodel::{Injection, InjectionEval};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvParams {
    /// Array output at the current penetration level, MW. Overwritten per sweep cell.
    pub p_max_mw: f64,
    /// PLL natural frequency, rad/s.
    pub pll_wn: f64,
    pub pll_zeta: f64,
    /// Converter current limit in pu of rated current (rated power at 1 pu voltage).
    pub i_max_pu: f64,
    /// Cycles without a usable source, or outside the ride-through band, before tripping.
    pub trip_delay_cycles: f64,
    /// Voltage ride-through band, pu.
    pub vt_window: [f64; 2],
    /// Frequency ride-through band, Hz.
    pub ft_window: [f64; 2],
    /// Output ramp after resynchronizing, pu of system base per second.
    pub ramp_rate_pu_s: f64,
    /// Delay between the genset coming online and the PV starting to resynchronize, s.
    pub resync_delay_s: f64,
    /// d(P/p_ref)/d(phase error) at lock, dimensionless.
    pub phase_power_gain: f64,
}

impl Default for PvParams {
    fn default() -> Self {
        PvParams {
            p_max_mw: 0.0,
            pll_wn: 25.0,
            pll_zeta: 0.35,
            i_max_pu: 1.2,
            trip_delay_cycles: 3.0,
            vt_window: [0.8, 1.2],
            ft_window: [57.0, 63.0],
            ramp_rate_pu_s: 0.5,
            resync_delay_s: 0.2,
            phase_power_gain: 4.5,
        }
    }
}

impl PvParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("pv.{field}"), msg))
            }
        };
        check(self.p_max_mw >= 0.0, "p_max_mw", "must be non-negative")?;
        check(self.pll_zeta > 0.0, "pll_zeta", "must be positive")?;
        check(self.pll_wn > 0.0, "pll_wn", "must be positive")?;
        check(self.i_max_pu > 0.0, "i_max_pu", "must be positive")?;
        check(self.trip_delay_cycles >= 0.0, "trip_delay_cycles", "must be non-negative")?;
        check(self.vt_window[0] < self.vt_window[1], "vt_window", "lower bound must be below upper")?;
        check(self.ft_window[0] < self.ft_window[1], "ft_window", "lower bound must be below upper")?;
        check(self.ramp_rate_pu_s > 0.0, "ramp_rate_pu_s", "must be positive")?;
        check(self.resync_delay_s >= 0.0, "resync_delay_s", "must be non-negative")?;
        check(self.phase_power_gain >= 0.0, "phase_power_gain", "must be non-negative")?;
        Ok(())
    }

    pub fn trip_delay_s(&self, f_nominal_hz: f64) -> f64 {
        self.trip_delay_cycles / f_nominal_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PvMode {
    SyncGrid,
    Offline,
    SyncDiesel,
    Ramping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncSource {
    Grid,
    Diesel,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvState {
    pub mode: PvMode,
    pub theta_pll: f64,
    /// PLL frequency, pu.
    pub omega_pll: f64,
    /// Active power command, pu of system base (ramps after resynchronization).
    pub p_cmd: f64,
    /// Last recorded injection, pu.
    pub p_out_pu: f64,
    pub source: SyncSource,
    /// Time spent continuously outside the ride-through band, s.
    pub excursion_s: f64,
    /// Set when the unit left service on a ride-through violation.
    pub tripped: bool,
    ramp_start: f64,
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PllDerivatives {
    pub theta: f64,
    pub omega: f64,
}

/// Instantaneous bus conditions seen by the converter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusConditions {
    pub v_pu: f64,
    pub f_hz: f64,
}

impl PvState {
    /// Locked to the grid at `theta_bus` and producing `p_pu`.
    pub fn locked_to_grid(theta_bus: f64, p_pu: f64) -> Self {
        PvState {
            mode: PvMode::SyncGrid,
            theta_pll: theta_bus,
            omega_pll: 1.0,
            p_cmd: p_pu,
            p_out_pu: p_pu,
            source: SyncSource::Grid,
            excursion_s: 0.0,
            tripped: false,
            ramp_start: 0.0,
        }
    }

    pub fn is_online(&self) -> bool {
        self.mode != PvMode::Offline
    }

    pub fn pll_derivatives(&self, theta_bus: f64, params: &PvParams, omega_s: f64) -> PllDerivatives {
        if !self.is_online() {
            return PllDerivatives::default();
        }
        let e = wrap_angle(theta_bus - self.theta_pll);
        PllDerivatives {
            theta: omega_s * (self.omega_pll - 1.0) + 2.0 * params.pll_zeta * params.pll_wn * e,
            omega: params.pll_wn * params.pll_wn * e / omega_s,
        }
    }

    /// The network-facing injection model for the current state.
    pub fn injection_model(&self, params: &PvParams, s_base_mva: f64) -> PvInjection {
        PvInjection {
            online: self.is_online(),
            p_cmd: self.p_cmd,
            theta_pll: self.theta_pll,
            i_max: params.i_max_pu * params.p_max_mw / s_base_mva,
            gain: params.phase_power_gain,
        }
    }

    /// `(P, Q)` in system pu at terminal voltage `v_term`.
    pub fn injection(&self, params: &PvParams, s_base_mva: f64, v_term: Complex64) -> (f64, f64) {
        let s = self.injection_model(params, s_base_mva).eval(v_term).s;
        (s.re, s.im)
    }

    /// Islanding: switch straight to the genset when it is already online, otherwise
    /// keep waiting on the lost grid until the trip delay expires.
    pub fn on_islanding(&mut self, genset_online: bool) {
        if self.mode == PvMode::SyncGrid && genset_online {
            self.mode = PvMode::SyncDiesel;
            self.source = SyncSource::Diesel;
        }
    }

    /// Drops offline because no voltage source is left to follow.
    pub fn lose_source(&mut self) {
        if self.mode == PvMode::SyncGrid {
            self.go_offline();
        }
    }

    fn go_offline(&mut self) {
        self.mode = PvMode::Offline;
        self.source = SyncSource::None;
        self.p_cmd = 0.0;
        self.p_out_pu = 0.0;
        self.excursion_s = 0.0;
    }

    /// Re-locks the PLL onto the genset bus and starts ramping from zero at `t`.
    pub fn begin_resync(&mut self, t: f64, theta_bus: f64, omega_bus: f64) {
        if self.mode != PvMode::Offline || self.tripped {
            return;
        }
        self.mode = PvMode::Ramping;
        self.source = SyncSource::Diesel;
        self.theta_pll = theta_bus;
        self.omega_pll = omega_bus;
        self.p_cmd = 0.0;
        self.ramp_start = t;
    }

    /// Power command at time `t` while ramping.
    pub fn ramp_command(&self, t: f64, params: &PvParams, s_base_mva: f64) -> f64 {
        let p_max = params.p_max_mw / s_base_mva;
        match self.mode {
            PvMode::Ramping => (params.ramp_rate_pu_s * (t - self.ramp_start)).clamp(0.0, p_max),
            _ => self.p_cmd,
        }
    }

    /// Advances the ramp to `t`; completes the resynchronization at full output.
    pub fn update_ramp(&mut self, t: f64, params: &PvParams, s_base_mva: f64) {
        if self.mode == PvMode::Ramping {
            self.p_cmd = self.ramp_command(t, params, s_base_mva);
            if self.p_cmd >= params.p_max_mw / s_base_mva {
                self.mode = PvMode::SyncDiesel;
            }
        }
    }

    /// Ride-through supervision over a step of length `dt`. Returns true when the unit
    /// trips on this step.
    pub fn supervise(&mut self, bus: BusConditions, params: &PvParams, f_nominal_hz: f64, dt: f64) -> bool {
        if !self.is_online() {
            return false;
        }
        let outside = bus.v_pu < params.vt_window[0]
            || bus.v_pu > params.vt_window[1]
            || bus.f_hz < params.ft_window[0]
            || bus.f_hz > params.ft_window[1];
        if !outside {
            self.excursion_s = 0.0;
            return false;
        }
        self.excursion_s += dt;
        if self.excursion_s >= params.trip_delay_s(f_nominal_hz) - 1e-12 {
            self.go_offline();
            self.tripped = true;
            return true;
        }
        false
    }
}

/// Network-facing PV injection for one solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvInjection {
    pub online: bool,
    pub p_cmd: f64,
    pub theta_pll: f64,
    /// Current limit, pu of system base.
    pub i_max: f64,
    pub gain: f64,
}

impl Injection for PvInjection {
    fn eval(&self, v: Complex64) -> InjectionEval {
        let zero = Complex64::new(0.0, 0.0);
        let vm = v.norm();
        if !self.online || vm == 0.0 {
            return InjectionEval {
                s: zero,
                ds_dvm: zero,
                ds_dva: zero,
            };
        }
        let e = wrap_angle(v.arg() - self.theta_pll);
        let shape = e.cos() + self.gain * e.sin();
        let (shape, dshape) = if shape >= 1.0 {
            (1.0, 0.0)
        } else {
            (shape, -e.sin() + self.gain * e.cos())
        };
        let phase_limited = self.p_cmd * shape;
        let current_limited = vm * self.i_max;
        let (p, dp_dvm, dp_dva) = if current_limited < phase_limited {
            (current_limited, self.i_max, 0.0)
        } else {
            (phase_limited, 0.0, self.p_cmd * dshape)
        };
        if p <= 0.0 {
            return InjectionEval {
                s: zero,
                ds_dvm: zero,
                ds_dva: zero,
            };
        }
        InjectionEval {
            s: Complex64::new(p, 0.0),
            ds_dvm: Complex64::new(dp_dvm, 0.0),
            ds_dva: Complex64::new(dp_dva, 0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genset::synchronous_speed;

    fn params(p_max_mw: f64) -> PvParams {
        PvParams {
            p_max_mw,
            ..PvParams::default()
        }
    }

    #[test]
    fn locked_pll_is_at_rest() {
        let st = PvState::locked_to_grid(0.3, 0.01);
        let d = st.pll_derivatives(0.3, &params(0.1), synchronous_speed(60.0));
        assert_eq!(d, PllDerivatives::default());
    }

    #[test]
    fn offline_injects_nothing() {
        let mut st = PvState::locked_to_grid(0.0, 0.01);
        st.lose_source();
        assert_eq!(st.mode, PvMode::Offline);
        assert_eq!(st.source, SyncSource::None);
        assert_eq!(st.injection(&params(0.1), 10.0, Complex64::new(1.0, 0.0)), (0.0, 0.0));
        assert_eq!(st.p_out_pu, 0.0);
    }

    #[test]
    fn locked_output_is_array_power() {
        let st = PvState::locked_to_grid(0.0, 0.1 / 10.0);
        let (p, q) = st.injection(&params(0.1), 10.0, Complex64::new(1.0, 0.0));
        assert!((p - 0.01).abs() < 1e-15);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn quadrature_error_gives_zero_power() {
        let cosine_only = PvParams {
            phase_power_gain: 0.0,
            ..params(0.1)
        };
        let st = PvState::locked_to_grid(0.0, 0.01);
        let (p, _) = st.injection(&cosine_only, 10.0, Complex64::from_polar(1.0, PI / 2.0));
        assert!(p.abs() < 1e-15);
        let (p, _) = st.injection(&cosine_only, 10.0, Complex64::from_polar(1.0, 2.5));
        assert_eq!(p, 0.0);
    }

    #[test]
    fn current_limit_binds_at_low_voltage() {
        let p = params(1.0);
        let st = PvState::locked_to_grid(0.0, 0.1);
        let (out, _) = st.injection(&p, 10.0, Complex64::new(0.5, 0.0));
        assert!((out - 0.5 * 1.2 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn phase_gain_never_exceeds_command() {
        let p = PvParams {
            phase_power_gain: 3.0,
            ..params(1.0)
        };
        let st = PvState::locked_to_grid(0.0, 0.1);
        for k in -40..=40 {
            let e = k as f64 * 0.05;
            let (out, _) = st.injection(&p, 10.0, Complex64::from_polar(1.0, e));
            assert!(out <= 0.1 + 1e-15);
            assert!(out >= 0.0);
        }
        let (lag, _) = st.injection(&p, 10.0, Complex64::from_polar(1.0, -0.01));
        assert!((lag - 0.1 * ((-0.01f64).cos() + 3.0 * (-0.01f64).sin())).abs() < 1e-15);
    }

    #[test]
    fn injection_partials_match_finite_differences() {
        let model = PvInjection {
            online: true,
            p_cmd: 0.1,
            theta_pll: 0.05,
            i_max: 0.2,
            gain: 2.0,
        };
        let (vm, va) = (1.0, -0.05);
        let h = 1e-7;
        let at = |m: f64, a: f64| model.eval(Complex64::from_polar(m, a)).s.re;
        let e = model.eval(Complex64::from_polar(vm, va));
        let fd_va = (at(vm, va + h) - at(vm, va - h)) / (2.0 * h);
        assert!((e.ds_dva.re - fd_va).abs() < 1e-6);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-3.5 * PI) - 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn islanding_transitions() {
        let mut follows = PvState::locked_to_grid(0.0, 0.01);
        follows.on_islanding(true);
        assert_eq!((follows.mode, follows.source), (PvMode::SyncDiesel, SyncSource::Diesel));

        let mut waits = PvState::locked_to_grid(0.0, 0.01);
        waits.on_islanding(false);
        assert_eq!(waits.mode, PvMode::SyncGrid);
        waits.lose_source();
        assert_eq!(waits.mode, PvMode::Offline);
        assert!(!waits.tripped);
    }

    #[test]
    fn resync_ramps_to_full_output() {
        let p = params(0.5);
        let mut st = PvState::locked_to_grid(0.0, 0.05);
        st.lose_source();
        st.begin_resync(3.3, 0.1, 1.0);
        assert_eq!(st.mode, PvMode::Ramping);
        assert_eq!(st.p_cmd, 0.0);
        st.update_ramp(3.35, &p, 10.0);
        assert!((st.p_cmd - 0.025).abs() < 1e-12);
        assert_eq!(st.mode, PvMode::Ramping);
        st.update_ramp(3.5, &p, 10.0);
        assert_eq!(st.p_cmd, 0.05);
        assert_eq!(st.mode, PvMode::SyncDiesel);
    }

    #[test]
    fn ride_through_trip_after_delay() {
        let p = params(0.5);
        let mut st = PvState::locked_to_grid(0.0, 0.05);
        st.on_islanding(true);
        let bad = BusConditions { v_pu: 1.0, f_hz: 63.5 };
        let good = BusConditions { v_pu: 1.0, f_hz: 60.0 };
        let dt = 1e-3;
        for _ in 0..49 {
            assert!(!st.supervise(bad, &p, 60.0, dt));
        }
        // A return to band resets the timer.
        assert!(!st.supervise(good, &p, 60.0, dt));
        assert_eq!(st.excursion_s, 0.0);
        let mut steps = 0;
        while !st.supervise(bad, &p, 60.0, dt) {
            steps += 1;
        }
        assert_eq!(steps, 49);
        assert!(st.tripped);
        assert_eq!(st.mode, PvMode::Offline);
        // Tripped units stay out.
        st.begin_resync(5.0, 0.0, 1.0);
        assert_eq!(st.mode, PvMode::Offline);
    }
}
