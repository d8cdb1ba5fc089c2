//! Fixed-step simulation of the genset + PV + feeder system across the islanding
//! transition.
//!
//! The differential states of both devices are stacked into one vector and advanced
//! with classical RK4; the algebraic network is re-solved at every stage. Discrete
//! events (islanding, cold-start completion, PV trip and resync) are stepped onto
//! exactly.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::{DieselStatus, EngineSettings, LoadLevel, NetworkConfig};
use crate::genset::{synchronous_speed, GensetMode, GensetParams, GensetState};
use crate::netmodel::{self, bus_flow, BusId, BusInjection, Network, NetworkSolution, Source, SolverOptions};
use crate::pvunit::{BusConditions, PvMode, PvParams, PvState};
use crate::stability::Thresholds;
use crate::sweep::SweepSettings;
use crate::{Error, Result};

/// Complete run configuration, as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub load: LoadLevel,
    pub diesel: DieselStatus,
    /// PV capacity as a fraction of the load.
    pub pv_fraction: f64,
    /// When false the feeder has no PV unit at all, whatever `pv_fraction` says.
    pub pv_installed: bool,
    pub engine: EngineSettings,
    pub network: NetworkConfig,
    pub genset: GensetParams,
    pub pv: PvParams,
    pub stability: Thresholds,
    pub sweep: SweepSettings,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            load: LoadLevel::default(),
            diesel: DieselStatus::default(),
            pv_fraction: 0.0,
            pv_installed: true,
            engine: EngineSettings::default(),
            network: NetworkConfig::default(),
            genset: GensetParams::default(),
            pv: PvParams::default(),
            stability: Thresholds::default(),
            sweep: SweepSettings::default(),
        }
    }
}

impl SimConfig {
    pub fn pv_capacity_mw(&self) -> f64 {
        self.load.mw() * self.pv_fraction
    }

    /// PV parameters with the array size set from the penetration level.
    pub fn resolved_pv(&self) -> PvParams {
        PvParams {
            p_max_mw: self.pv_capacity_mw(),
            ..self.pv
        }
    }

    /// A unit with zero capacity is still modelled; it injects nothing and never trips.
    fn pv_present(&self) -> bool {
        self.pv_installed
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.engine;
        if !(e.dt_s > 0.0 && e.dt_s <= 0.01) {
            return Err(Error::config("engine.dt_s", "must lie in (0, 0.01]"));
        }
        if !(e.t_end_s > 0.0) {
            return Err(Error::config("engine.t_end_s", "must be positive"));
        }
        if e.islanding && !(e.islanding_time_s >= 0.0 && e.islanding_time_s < e.t_end_s) {
            return Err(Error::config(
                "engine.islanding_time_s",
                "must lie in [0, t_end_s)",
            ));
        }
        if e.decimation == 0 {
            return Err(Error::config("engine.decimation", "must be at least 1"));
        }
        if !(e.solver_tol > 0.0) || e.solver_max_iter == 0 {
            return Err(Error::config("engine.solver_tol", "solver settings must be positive"));
        }
        if !(self.pv_fraction >= 0.0) {
            return Err(Error::config("pv_fraction", "must be non-negative"));
        }
        if !(self.load.mw() > 0.0) {
            return Err(Error::config("load", "must be positive"));
        }
        self.genset.validate()?;
        self.resolved_pv().validate()?;
        self.stability.validate()?;
        self.sweep.validate()?;
        let net = self.network.build(self.load.mw())?;
        for &bus in &e.record_buses {
            net.index_of(bus)
                .map_err(|_| Error::config("engine.record_buses", format!("unknown bus {bus}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Islanding,
    GensetOnline,
    PvTrip,
    PvResyncStart,
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_s: f64,
    pub kind: EventKind,
}

/// Event timeline implied by the configuration, sorted by time.
pub fn schedule_events(cfg: &SimConfig) -> Vec<Event> {
    let mut events = Vec::new();
    if !cfg.engine.islanding {
        return events;
    }
    let t_i = cfg.engine.islanding_time_s;
    events.push(Event {
        time_s: t_i,
        kind: EventKind::Islanding,
    });
    if cfg.diesel == DieselStatus::Off {
        let t_online = t_i + cfg.genset.start_delay_s;
        events.push(Event {
            time_s: t_online,
            kind: EventKind::GensetOnline,
        });
        if cfg.pv_present() {
            events.push(Event {
                time_s: t_i + cfg.pv.trip_delay_s(cfg.network.f_nominal_hz),
                kind: EventKind::PvTrip,
            });
            events.push(Event {
                time_s: t_online + cfg.pv.resync_delay_s,
                kind: EventKind::PvResyncStart,
            });
        }
    }
    // Stable sort keeps the causal order of coincident events.
    events.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    events
}

/// One classical fourth-order Runge-Kutta step of `dx/dt = f(t, x)`.
pub fn rk4_step<F>(mut f: F, t: f64, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * dt, &axpy(0.5 * dt, &k1))?;
    let k3 = f(t + 0.5 * dt, &axpy(0.5 * dt, &k2))?;
    let k4 = f(t + dt, &axpy(dt, &k3))?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    SolverDivergence,
    NumericOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TripFlags {
    /// PV left service on a ride-through violation.
    pub pv_ride_through: bool,
    pub pv_trip_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub data: Vec<f64>,
}

pub mod channels {
    pub const GEN_P: &str = "gen_p_mw";
    pub const GEN_Q: &str = "gen_q_mvar";
    pub const GEN_SPEED: &str = "gen_speed_pu";
    pub const GEN_TORQUE: &str = "gen_torque_pu";
    pub const PV_P: &str = "pv_p_mw";
    pub const PV_Q: &str = "pv_q_mvar";
    pub const GRID_P: &str = "grid_p_mw";
    pub const LOAD_P: &str = "load_p_mw";
    pub const LOSS_P: &str = "loss_p_mw";
    pub const PV_PLL_HZ: &str = "pv_pll_hz";
    pub const PV_BUS_V: &str = "pv_bus_v_pu";
    pub const GEN_ONLINE: &str = "gen_online";

    pub fn bus_p(bus: u32) -> String {
        format!("bus{bus}_p_mw")
    }

    pub fn bus_q(bus: u32) -> String {
        format!("bus{bus}_q_mvar")
    }
}

/// Recorded run. All channels share `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub time: Vec<f64>,
    pub channels: Vec<Channel>,
    pub genset_mode: GensetMode,
    pub pv_mode: Option<PvMode>,
    pub trips: TripFlags,
    pub termination: Termination,
    pub islanding_time_s: Option<f64>,
    pub t_end_s: f64,
    pub f_nominal_hz: f64,
}

impl SimResult {
    /// A completed result from pre-recorded channels (synthetic signals, parsed CSV).
    pub fn from_channels(
        time: Vec<f64>,
        channels: Vec<Channel>,
        islanding_time_s: Option<f64>,
        f_nominal_hz: f64,
    ) -> Self {
        let t_end_s = time.last().copied().unwrap_or(0.0);
        SimResult {
            time,
            channels,
            genset_mode: GensetMode::Online,
            pv_mode: None,
            trips: TripFlags::default(),
            termination: Termination::Completed,
            islanding_time_s,
            t_end_s,
            f_nominal_hz,
        }
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.data.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.channel(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing channel `{name}`")))
    }

    /// Power exported to the utility at the PCC, MW (negative when importing).
    pub fn pcc_export_mw(&self) -> Option<Vec<f64>> {
        self.channel(channels::GRID_P)
            .map(|g| g.iter().map(|p| -p).collect())
    }

    /// Index of the first sample at or after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.time.partition_point(|&x| x < t - 1e-9)
    }
}

const X_DELTA: usize = 0;
const X_OMEGA: usize = 1;
const X_TM: usize = 2;
const X_ISO: usize = 3;
const X_EQ: usize = 4;
const X_THETA_PLL: usize = 5;
const X_OMEGA_PLL: usize = 6;
const N_STATES: usize = 7;

/// Stage-level outcome of one algebraic solve.
struct Snapshot {
    sol: NetworkSolution,
    /// Position of the genset / grid sources in `sol.source_power`.
    gen_src: Option<usize>,
    grid_src: Option<usize>,
}

struct Simulator {
    cfg: SimConfig,
    net: Network,
    pv_params: PvParams,
    omega_s: f64,
    s_base: f64,
    gen_idx: usize,
    pv_idx: usize,
    opts: SolverOptions,
    grid_connected: bool,
    islanded: bool,
    genset: GensetState,
    pv: Option<PvState>,
    warm: Option<Vec<Complex64>>,
    trips: TripFlags,
    /// Last genset-bus angle seen while energized, used to align a cold start.
    last_gen_angle: f64,
}

impl Simulator {
    fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.network.build(cfg.load.mw())?;
        let s_base = net.s_base_mva();
        let gen_idx = net.index_of(cfg.network.genset_bus)?;
        let pv_idx = net.index_of(cfg.network.pv_bus)?;
        let pv_params = cfg.resolved_pv();
        let mut sim = Simulator {
            omega_s: synchronous_speed(net.f_nominal_hz()),
            net,
            pv_params,
            s_base,
            gen_idx,
            pv_idx,
            opts: SolverOptions {
                tol: cfg.engine.solver_tol,
                max_iter: cfg.engine.solver_max_iter,
            },
            grid_connected: true,
            islanded: false,
            genset: GensetState::offline(),
            pv: None,
            warm: None,
            trips: TripFlags::default(),
            last_gen_angle: 0.0,
            cfg: cfg.clone(),
        };
        sim.initialize()?;
        Ok(sim)
    }

    fn machine_ratio(&self) -> f64 {
        self.cfg.genset.to_system(self.s_base)
    }

    fn genset_impedance(&self) -> Complex64 {
        Complex64::new(0.0, self.cfg.genset.xd_t / self.machine_ratio())
    }

    /// Pre-islanding steady state: grid-connected power flow with the genset at its
    /// schedule and the PV at full output, then every controller reference set so the
    /// dynamic model sits exactly at rest.
    fn initialize(&mut self) -> Result<()> {
        let gen_bus = self.cfg.network.genset_bus;
        let pv_bus = self.cfg.network.pv_bus;
        let p_gen = if self.cfg.diesel == DieselStatus::On {
            self.cfg.genset.p_ref_mw / self.s_base
        } else {
            0.0
        };
        let p_pv = self.pv_params.p_max_mw / self.s_base;
        let gen_inj = Complex64::new(p_gen, 0.0);
        let pv_inj = Complex64::new(p_pv, 0.0);
        let grid = self.grid_source();
        let injections = [
            BusInjection {
                bus: gen_bus,
                model: &gen_inj,
            },
            BusInjection {
                bus: pv_bus,
                model: &pv_inj,
            },
        ];
        let pf = netmodel::solve(&self.net, &[grid], &injections, None, self.opts).map_err(|e| {
            Error::config("network", format!("infeasible initial power flow: {e}"))
        })?;
        let v_gen = pf.voltages[self.gen_idx];
        let v_pv = pf.voltages[self.pv_idx];
        self.last_gen_angle = v_gen.arg();

        if self.cfg.diesel == DieselStatus::On {
            let current = (gen_inj / v_gen).conj();
            let emf = v_gen + self.genset_impedance() * current;
            let p_set = p_gen / self.machine_ratio();
            self.genset = GensetState::online(emf, p_set, v_gen.norm());
        } else {
            self.genset = GensetState::offline();
            self.genset.v_set = v_gen.norm();
        }
        if self.cfg.pv_present() {
            self.pv = Some(PvState::locked_to_grid(v_pv.arg(), p_pv));
        }
        self.warm = Some(pf.voltages.clone());

        // Settle the references on the dynamic model's own solution.
        for _ in 0..4 {
            let snap = self.solve_at(0.0, &self.pack())?;
            let v_gen = snap.sol.voltages[self.gen_idx];
            if let Some(k) = snap.gen_src {
                let pe = snap.sol.source_power[k].re / self.machine_ratio();
                self.genset.tm = pe;
                self.genset.p_set = pe;
                self.genset.v_set = v_gen.norm();
            }
            if let Some(pv) = self.pv.as_mut() {
                pv.theta_pll = snap.sol.voltages[self.pv_idx].arg();
            }
            self.warm = Some(snap.sol.voltages.clone());
        }
        Ok(())
    }

    fn grid_source(&self) -> Source {
        Source::behind_impedance(
            self.cfg.network.pcc_bus,
            Complex64::new(self.cfg.network.grid_v_pu, 0.0),
            Complex64::new(0.0, self.cfg.network.grid_x_pu),
        )
    }

    fn pack(&self) -> Vec<f64> {
        let mut x = vec![0.0; N_STATES];
        x[X_DELTA] = self.genset.delta;
        x[X_OMEGA] = self.genset.omega;
        x[X_TM] = self.genset.tm;
        x[X_ISO] = self.genset.x_iso;
        x[X_EQ] = self.genset.eq;
        if let Some(pv) = &self.pv {
            x[X_THETA_PLL] = pv.theta_pll;
            x[X_OMEGA_PLL] = pv.omega_pll;
        }
        x
    }

    fn unpack(&mut self, x: &[f64]) {
        self.genset.delta = x[X_DELTA];
        self.genset.omega = x[X_OMEGA];
        self.genset.tm = x[X_TM];
        self.genset.x_iso = x[X_ISO];
        self.genset.eq = x[X_EQ];
        self.genset.clamp_limits();
        if let Some(pv) = self.pv.as_mut() {
            pv.theta_pll = x[X_THETA_PLL];
            pv.omega_pll = x[X_OMEGA_PLL];
        }
    }

    fn device_states(&self, x: &[f64]) -> (GensetState, Option<PvState>) {
        let mut g = self.genset;
        g.delta = x[X_DELTA];
        g.omega = x[X_OMEGA];
        g.tm = x[X_TM];
        g.x_iso = x[X_ISO];
        g.eq = x[X_EQ];
        let pv = self.pv.map(|mut p| {
            p.theta_pll = x[X_THETA_PLL];
            p.omega_pll = x[X_OMEGA_PLL];
            p
        });
        (g, pv)
    }

    /// Algebraic network solution for states `x` at time `t`.
    fn solve_at(&self, t: f64, x: &[f64]) -> Result<Snapshot> {
        self.solve_with(t, x, self.warm.as_deref())
    }

    fn solve_with(&self, t: f64, x: &[f64], warm: Option<&[Complex64]>) -> Result<Snapshot> {
        let (g, pv) = self.device_states(x);
        let mut sources = Vec::with_capacity(2);
        let mut grid_src = None;
        let mut gen_src = None;
        if self.grid_connected {
            grid_src = Some(sources.len());
            sources.push(self.grid_source());
        }
        if g.mode == GensetMode::Online {
            gen_src = Some(sources.len());
            sources.push(Source::behind_impedance(
                self.cfg.network.genset_bus,
                g.emf(),
                self.genset_impedance(),
            ));
        }
        let pv_model = pv.map(|mut p| {
            p.p_cmd = p.ramp_command(t, &self.pv_params, self.s_base);
            p.injection_model(&self.pv_params, self.s_base)
        });
        let injections: Vec<BusInjection<'_>> = pv_model
            .as_ref()
            .map(|m| BusInjection {
                bus: self.cfg.network.pv_bus,
                model: m,
            })
            .into_iter()
            .collect();
        let sol = if sources.is_empty() {
            NetworkSolution::dead(&self.net, injections.len(), 0)
        } else {
            netmodel::solve(&self.net, &sources, &injections, warm, self.opts)?
        };
        Ok(Snapshot {
            sol,
            gen_src,
            grid_src,
        })
    }

    fn derivatives(&self, x: &[f64], snap: &Snapshot) -> Result<Vec<f64>> {
        let (g, pv) = self.device_states(x);
        let mut dx = vec![0.0; N_STATES];
        if let Some(k) = snap.gen_src {
            let pe = snap.sol.source_power[k].re / self.machine_ratio();
            let v_term = snap.sol.voltages[self.gen_idx].norm();
            let d = g.derivatives(&self.cfg.genset, pe, v_term, self.islanded, self.omega_s)?;
            dx[X_DELTA] = d.delta;
            dx[X_OMEGA] = d.omega;
            dx[X_TM] = d.tm;
            dx[X_ISO] = d.x_iso;
            dx[X_EQ] = d.eq;
        }
        if let Some(pv) = pv {
            let v = snap.sol.voltages[self.pv_idx];
            if v.norm() > 0.0 {
                let d = pv.pll_derivatives(v.arg(), &self.pv_params, self.omega_s);
                dx[X_THETA_PLL] = d.theta;
                dx[X_OMEGA_PLL] = d.omega;
            }
        }
        Ok(dx)
    }

    fn integrate(&mut self, t: f64, dt: f64) -> Result<()> {
        let x = self.pack();
        let x_new = {
            let this = &*self;
            let mut warm = this.warm.clone();
            rk4_step(
                |ts, xs| {
                    let mut stage = this.solve_with(ts, xs, warm.as_deref())?;
                    let dx = this.derivatives(xs, &stage)?;
                    warm = Some(std::mem::take(&mut stage.sol.voltages));
                    Ok(dx)
                },
                t,
                &x,
                dt,
            )?
        };
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite state".into()));
        }
        self.unpack(&x_new);
        Ok(())
    }

    fn apply_event(&mut self, t: f64, kind: &EventKind) {
        match kind {
            EventKind::Islanding => {
                self.grid_connected = false;
                self.islanded = true;
                let online = self.genset.mode == GensetMode::Online;
                self.genset.on_islanding();
                if let Some(pv) = self.pv.as_mut() {
                    pv.on_islanding(online);
                }
            }
            EventKind::GensetOnline => {
                self.genset.bring_online(self.last_gen_angle);
            }
            EventKind::PvTrip => {
                if let Some(pv) = self.pv.as_mut() {
                    pv.lose_source();
                }
            }
            EventKind::PvResyncStart => {
                if self.genset.mode == GensetMode::Online {
                    let theta = self
                        .warm
                        .as_ref()
                        .map(|v| v[self.pv_idx].arg())
                        .unwrap_or(self.last_gen_angle);
                    let omega = self.genset.omega;
                    if let Some(pv) = self.pv.as_mut() {
                        pv.begin_resync(t, theta, omega);
                    }
                }
            }
            EventKind::Custom(_) => {}
        }
    }

    /// Re-solves at `t`, refreshes the warm start and bookkeeping, and returns the
    /// snapshot for recording.
    fn refresh(&mut self, t: f64) -> Result<Snapshot> {
        let snap = self.solve_at(t, &self.pack())?;
        if !snap.sol.is_dead() {
            self.warm = Some(snap.sol.voltages.clone());
            self.last_gen_angle = snap.sol.voltages[self.gen_idx].arg();
        }
        if let Some(pv) = self.pv.as_mut() {
            pv.p_out_pu = snap.sol.injection_power.first().map_or(0.0, |s| s.re);
        }
        Ok(snap)
    }
}

struct Recorder {
    names: Vec<String>,
    time: Vec<f64>,
    data: Vec<Vec<f64>>,
    record_buses: Vec<BusId>,
}

impl Recorder {
    fn new(record_buses: &[BusId]) -> Self {
        use channels::*;
        let mut names: Vec<String> = [GEN_P, GEN_Q, GEN_SPEED, GEN_TORQUE, PV_P, PV_Q]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for &b in record_buses {
            names.push(bus_p(b));
            names.push(bus_q(b));
        }
        for s in [GRID_P, LOAD_P, LOSS_P, PV_PLL_HZ, PV_BUS_V, GEN_ONLINE] {
            names.push(s.to_string());
        }
        let n = names.len();
        Recorder {
            names,
            time: Vec::new(),
            data: vec![Vec::new(); n],
            record_buses: record_buses.to_vec(),
        }
    }

    fn record(&mut self, t: f64, sim: &Simulator, snap: &Snapshot) -> Result<()> {
        let mw = sim.s_base;
        let sol = &snap.sol;
        let gen = snap.gen_src.map(|k| sol.source_power[k]).unwrap_or_default();
        let online = sim.genset.mode == GensetMode::Online;
        let pe_machine = gen.re / sim.machine_ratio();
        let pv_s = sol.injection_power.first().copied().unwrap_or_default();
        let grid = snap.grid_src.map(|k| sol.source_power[k]).unwrap_or_default();
        let mut row = vec![
            gen.re * mw,
            gen.im * mw,
            if online { sim.genset.omega } else { 0.0 },
            sim.genset.electrical_torque(pe_machine),
            pv_s.re * mw,
            pv_s.im * mw,
        ];
        for &b in &self.record_buses {
            let (p, q) = bus_flow(sol, &sim.net, b)?;
            row.push(p * mw);
            row.push(q * mw);
        }
        let pv_online = sim.pv.as_ref().is_some_and(|p| p.is_online());
        row.push(grid.re * mw);
        row.push(sol.total_load().re * mw);
        row.push(sol.losses.re * mw);
        row.push(if pv_online {
            sim.pv.as_ref().unwrap().omega_pll * sim.net.f_nominal_hz()
        } else {
            0.0
        });
        row.push(sol.voltages[sim.pv_idx].norm());
        row.push(if online { 1.0 } else { 0.0 });

        self.time.push(t);
        for (col, v) in self.data.iter_mut().zip(row) {
            col.push(v);
        }
        Ok(())
    }

    fn finish(self) -> (Vec<f64>, Vec<Channel>) {
        let channels = self
            .names
            .into_iter()
            .zip(self.data)
            .map(|(name, data)| Channel { name, data })
            .collect();
        (self.time, channels)
    }
}

/// Time of integration step `k`, computed without accumulating rounding error.
fn step_time(k: usize, dt: f64) -> f64 {
    let per_second = 1.0 / dt;
    if (per_second - per_second.round()).abs() < 1e-9 {
        k as f64 / per_second.round()
    } else {
        k as f64 * dt
    }
}

/// Runs one simulation from the pre-islanding steady state to `t_end_s`.
pub fn run(cfg: &SimConfig) -> Result<SimResult> {
    let mut sim = Simulator::new(cfg)?;
    let events = schedule_events(cfg);
    let dt = cfg.engine.dt_s;
    let n_steps = (cfg.engine.t_end_s / dt).round() as usize;
    let eps = 1e-9;
    let mut next_event = 0;
    let mut rec = Recorder::new(&cfg.engine.record_buses);
    let mut termination = Termination::Completed;

    let apply_due = |sim: &mut Simulator, next: &mut usize, t: f64| -> bool {
        let mut fired = false;
        while *next < events.len() && events[*next].time_s <= t + eps {
            sim.apply_event(t, &events[*next].kind);
            *next += 1;
            fired = true;
        }
        fired
    };

    apply_due(&mut sim, &mut next_event, 0.0);
    let mut snap = sim.refresh(0.0)?;
    rec.record(0.0, &sim, &snap)?;

    'steps: for k in 0..n_steps {
        let t0 = step_time(k, dt);
        let t1 = step_time(k + 1, dt);
        let mut t = t0;
        // Split the step on events strictly inside it.
        while next_event < events.len() && events[next_event].time_s < t1 - eps {
            let te = events[next_event].time_s.max(t);
            if te > t + eps {
                if let Err(e) = sim.integrate(t, te - t) {
                    termination = classify_failure(&e);
                    break 'steps;
                }
                t = te;
            }
            apply_due(&mut sim, &mut next_event, t);
            if let Err(e) = sim.refresh(t) {
                termination = classify_failure(&e);
                break 'steps;
            }
        }
        if let Err(e) = sim.integrate(t, t1 - t) {
            termination = classify_failure(&e);
            break;
        }
        apply_due(&mut sim, &mut next_event, t1);
        if let Some(pv) = sim.pv.as_mut() {
            pv.update_ramp(t1, &sim.pv_params, sim.s_base);
        }
        snap = match sim.refresh(t1) {
            Ok(s) => s,
            Err(e) => {
                termination = classify_failure(&e);
                break;
            }
        };
        // Ride-through supervision on the energized bus.
        if !snap.sol.is_dead() {
            let f_nom = sim.net.f_nominal_hz();
            let v_pv = snap.sol.voltages[sim.pv_idx].norm();
            let tripped = match sim.pv.as_mut() {
                Some(pv) if sim.pv_params.p_max_mw > 0.0 => {
                    let cond = BusConditions {
                        v_pu: v_pv,
                        f_hz: pv.omega_pll * f_nom,
                    };
                    pv.supervise(cond, &sim.pv_params, f_nom, t1 - t0)
                }
                _ => false,
            };
            if tripped {
                sim.trips.pv_ride_through = true;
                sim.trips.pv_trip_time_s = Some(t1);
                snap = match sim.refresh(t1) {
                    Ok(s) => s,
                    Err(e) => {
                        termination = classify_failure(&e);
                        break;
                    }
                };
            }
        }
        if (k + 1) % cfg.engine.decimation == 0 {
            rec.record(t1, &sim, &snap)?;
        }
    }

    let (time, channels) = rec.finish();
    Ok(SimResult {
        time,
        channels,
        genset_mode: sim.genset.mode,
        pv_mode: sim.pv.map(|p| p.mode),
        trips: sim.trips,
        termination,
        islanding_time_s: cfg.engine.islanding.then_some(cfg.engine.islanding_time_s),
        t_end_s: cfg.engine.t_end_s,
        f_nominal_hz: cfg.network.f_nominal_hz,
    })
}

fn classify_failure(e: &Error) -> Termination {
    match e {
        Error::SolverDivergence { .. } => Termination::SolverDivergence,
        _ => Termination::NumericOverflow,
    }
}
