//! Diesel genset: classical machine behind transient reactance, droop governor with an
//! isochronous integral loop that is only active while islanded, and a first-order AVR.
//!
//! Electrical quantities handed to this module are on the machine's own MVA base.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const EQ_MIN: f64 = 0.5;
pub const EQ_MAX: f64 = 2.0;

/// Synchronous electrical speed in rad/s for `f_hz`.
pub fn synchronous_speed(f_hz: f64) -> f64 {
    2.0 * PI * f_hz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GensetParams {
    pub rated_mva: f64,
    /// Inertia constant, s.
    pub h: f64,
    /// Damping, pu torque per pu speed deviation.
    pub d: f64,
    /// Transient reactance, pu on the machine base.
    pub xd_t: f64,
    pub r_droop: f64,
    /// Governor/actuator time constant, s.
    pub tg: f64,
    /// Isochronous integral gain, 1/s.
    pub ki_iso: f64,
    pub ta: f64,
    pub ka: f64,
    /// Scheduled output while grid-connected, MW.
    pub p_ref_mw: f64,
    /// Delay between the islanding instant and a cold machine coming online, s.
    pub start_delay_s: f64,
}

impl Default for GensetParams {
    fn default() -> Self {
        GensetParams {
            rated_mva: 3.5,
            h: 0.75,
            d: 0.05,
            xd_t: 0.3,
            r_droop: 0.05,
            tg: 0.3,
            ki_iso: 20.0,
            ta: 0.5,
            ka: 50.0,
            p_ref_mw: 2.0,
            start_delay_s: 0.1,
        }
    }
}

impl GensetParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("genset.{field}"), msg))
            }
        };
        check(self.rated_mva > 0.0, "rated_mva", "must be positive")?;
        check(self.h > 0.0, "h", "must be positive")?;
        check(self.tg > 0.0, "tg", "must be positive")?;
        check(self.ta > 0.0, "ta", "must be positive")?;
        check(self.xd_t > 0.0, "xd_t", "must be positive")?;
        check(
            self.r_droop > 0.0 && self.r_droop <= 0.1,
            "r_droop",
            "must lie in (0, 0.1]",
        )?;
        check(self.start_delay_s >= 0.0, "start_delay_s", "must be non-negative")?;
        check(self.d >= 0.0, "d", "must be non-negative")?;
        check(self.ki_iso >= 0.0, "ki_iso", "must be non-negative")?;
        check(self.p_ref_mw >= 0.0, "p_ref_mw", "must be non-negative")?;
        Ok(())
    }

    /// Ratio converting machine-base pu to system-base pu.
    pub fn to_system(&self, s_base_mva: f64) -> f64 {
        self.rated_mva / s_base_mva
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GensetMode {
    Offline,
    Starting,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GensetState {
    pub mode: GensetMode,
    /// Rotor angle in the synchronous frame, rad.
    pub delta: f64,
    /// Rotor speed, pu.
    pub omega: f64,
    /// Mechanical torque, pu.
    pub tm: f64,
    pub x_iso: f64,
    /// Internal EMF magnitude, pu.
    pub eq: f64,
    /// Governor load reference, pu.
    pub p_set: f64,
    /// AVR voltage reference, pu.
    pub v_set: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GensetDerivatives {
    pub delta: f64,
    pub omega: f64,
    pub tm: f64,
    pub x_iso: f64,
    pub eq: f64,
}

impl GensetState {
    pub fn offline() -> Self {
        GensetState {
            mode: GensetMode::Offline,
            delta: 0.0,
            omega: 0.0,
            tm: 0.0,
            x_iso: 0.0,
            eq: 0.0,
            p_set: 0.0,
            v_set: 1.0,
        }
    }

    /// Machine already running at `p_set` with the EMF `emf` behind its reactance.
    pub fn online(emf: Complex64, p_set: f64, v_set: f64) -> Self {
        GensetState {
            mode: GensetMode::Online,
            delta: emf.arg(),
            omega: 1.0,
            tm: p_set,
            x_iso: 0.0,
            eq: emf.norm(),
            p_set,
            v_set,
        }
    }

    pub fn emf(&self) -> Complex64 {
        Complex64::from_polar(self.eq, self.delta)
    }

    /// Islanding starts a cold machine; anything else is left as is.
    pub fn on_islanding(&mut self) {
        if self.mode == GensetMode::Offline {
            self.mode = GensetMode::Starting;
        }
    }

    /// A starting machine reaches synchronous speed with zero torque, its rotor aligned
    /// with `bus_angle` and its EMF at the voltage reference.
    pub fn bring_online(&mut self, bus_angle: f64) {
        if self.mode != GensetMode::Starting {
            return;
        }
        self.mode = GensetMode::Online;
        self.delta = bus_angle;
        self.omega = 1.0;
        self.tm = 0.0;
        self.x_iso = 0.0;
        self.p_set = 0.0;
        self.eq = self.v_set.clamp(EQ_MIN, EQ_MAX);
    }

    /// Time derivatives of the machine states.
    ///
    /// `pe` is the electrical output on the machine base and `v_term` the terminal
    /// voltage magnitude. The AVR integrator is held at its limits.
    pub fn derivatives(
        &self,
        params: &GensetParams,
        pe: f64,
        v_term: f64,
        islanded: bool,
        omega_s: f64,
    ) -> Result<GensetDerivatives> {
        if self.mode != GensetMode::Online {
            return Err(Error::Contract(format!(
                "genset derivatives requested while {:?}",
                self.mode
            )));
        }
        let dw = self.omega - 1.0;
        let te = pe / self.omega;
        let mut deq = params.ka * (self.v_set - v_term) / params.ta;
        if (self.eq >= EQ_MAX && deq > 0.0) || (self.eq <= EQ_MIN && deq < 0.0) {
            deq = 0.0;
        }
        Ok(GensetDerivatives {
            delta: omega_s * dw,
            omega: (self.tm - te - params.d * dw) / (2.0 * params.h),
            tm: (self.p_set - dw / params.r_droop + self.x_iso - self.tm) / params.tg,
            x_iso: if islanded { -params.ki_iso * dw } else { 0.0 },
            eq: deq,
        })
    }

    /// Electrical torque for output `pe` (machine base).
    pub fn electrical_torque(&self, pe: f64) -> f64 {
        if self.mode == GensetMode::Online {
            pe / self.omega
        } else {
            0.0
        }
    }

    /// Power delivered at the terminal by the EMF behind `xd_t` (machine base).
    pub fn injection(&self, params: &GensetParams, v_term: Complex64) -> (f64, f64) {
        if self.mode != GensetMode::Online {
            return (0.0, 0.0);
        }
        let current = (self.emf() - v_term) / Complex64::new(0.0, params.xd_t);
        let s = v_term * current.conj();
        (s.re, s.im)
    }

    pub fn clamp_limits(&mut self) {
        if self.mode == GensetMode::Online {
            self.eq = self.eq.clamp(EQ_MIN, EQ_MAX);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn omega_s() -> f64 {
        synchronous_speed(60.0)
    }

    #[test]
    fn equilibrium_has_zero_derivatives() {
        let p = GensetParams::default();
        let st = GensetState::online(Complex64::from_polar(1.05, 0.2), 0.4, 1.0);
        let d = st.derivatives(&p, 0.4, 1.0, true, omega_s()).unwrap();
        assert_eq!(d, GensetDerivatives::default());
    }

    #[test]
    fn accelerating_torque() {
        let p = GensetParams {
            d: 0.0,
            h: 2.0,
            ..GensetParams::default()
        };
        let mut st = GensetState::online(Complex64::new(1.0, 0.0), 0.3, 1.0);
        st.tm = 0.3;
        let d = st.derivatives(&p, 0.2, 1.0, false, omega_s()).unwrap();
        assert!((d.omega - 0.025).abs() < 1e-15);
    }

    #[test]
    fn offline_machine_has_no_dynamics_or_output() {
        let p = GensetParams::default();
        let st = GensetState::offline();
        assert!(matches!(
            st.derivatives(&p, 0.0, 1.0, true, omega_s()),
            Err(Error::Contract(_))
        ));
        assert_eq!(st.injection(&p, Complex64::new(1.0, 0.0)), (0.0, 0.0));
        let mut starting = st;
        starting.on_islanding();
        assert_eq!(starting.mode, GensetMode::Starting);
        assert_eq!(starting.injection(&p, Complex64::new(1.0, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn two_source_power_transfer() {
        let p = GensetParams {
            xd_t: 0.3,
            ..GensetParams::default()
        };
        let st = GensetState::online(Complex64::from_polar(1.0, 0.1), 0.0, 1.0);
        let (pe, _) = st.injection(&p, Complex64::new(1.0, 0.0));
        assert!((pe - 0.1_f64.sin() / 0.3).abs() < 1e-12);
        assert!((pe - 0.3328).abs() < 1e-4);

        let aligned = GensetState::online(Complex64::from_polar(1.0, 0.3), 0.0, 1.0);
        let (p0, q0) = aligned.injection(&p, Complex64::from_polar(1.0, 0.3));
        assert!(p0.abs() < 1e-15 && q0.abs() < 1e-15);
    }

    #[test]
    fn cold_start_lifecycle() {
        let mut st = GensetState::offline();
        st.v_set = 0.98;
        st.bring_online(0.4);
        assert_eq!(st.mode, GensetMode::Offline, "only a starting machine can come online");
        st.on_islanding();
        st.bring_online(0.4);
        assert_eq!(st.mode, GensetMode::Online);
        assert_eq!((st.omega, st.tm, st.delta, st.eq), (1.0, 0.0, 0.4, 0.98));
    }

    #[test]
    fn load_step_decelerates() {
        let p = GensetParams::default();
        let st = GensetState::online(Complex64::new(1.0, 0.0), 0.5, 1.0);
        let d = st.derivatives(&p, 0.6, 1.0, true, omega_s()).unwrap();
        assert!(d.omega < 0.0);
    }

    #[test]
    fn avr_integrator_respects_limits() {
        let p = GensetParams::default();
        let mut st = GensetState::online(Complex64::new(EQ_MAX, 0.0), 0.2, 1.0);
        st.tm = 0.2;
        let d = st.derivatives(&p, 0.2, 0.5, true, omega_s()).unwrap();
        assert_eq!(d.eq, 0.0);
        st.eq = 3.0;
        st.clamp_limits();
        assert_eq!(st.eq, EQ_MAX);
    }

    #[test]
    fn isochronous_only_when_islanded() {
        let p = GensetParams::default();
        let mut st = GensetState::online(Complex64::new(1.0, 0.0), 0.5, 1.0);
        st.omega = 0.99;
        let grid = st.derivatives(&p, 0.5 * 0.99, 1.0, false, omega_s()).unwrap();
        let island = st.derivatives(&p, 0.5 * 0.99, 1.0, true, omega_s()).unwrap();
        assert_eq!(grid.x_iso, 0.0);
        assert!((island.x_iso - p.ki_iso * 0.01).abs() < 1e-12);
    }
}
