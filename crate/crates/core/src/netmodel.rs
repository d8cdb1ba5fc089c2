//! Per-unit radial feeder model and the quasi-static phasor network solve.
//!
//! Dynamic devices couple into the network in two ways:
//!
//! - voltage sources ([`Source`]): either stiff (zero impedance, the bus voltage is
//!   fixed) or an EMF behind a series impedance, which is folded into the admittance
//!   matrix as a Norton equivalent;
//! - voltage-dependent power injections ([`Injection`]), evaluated at the solved bus
//!   voltage together with their partial derivatives so Newton's method keeps
//!   quadratic convergence.
//!
//! Loads are ZIP loads attached to the [`Network`] itself.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type BusId = u32;

/// Reactance substituted for branches entered with zero series impedance.
pub const MIN_BRANCH_REACTANCE: f64 = 1e-6;

const STIFF_IMPEDANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: BusId,
    pub nominal_kv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r_pu: f64,
    pub x_pu: f64,
}

impl Branch {
    fn admittance(&self) -> Complex64 {
        let z = Complex64::new(self.r_pu, self.x_pu);
        if z.norm() < 1e-9 {
            Complex64::new(0.0, MIN_BRANCH_REACTANCE).inv()
        } else {
            z.inv()
        }
    }
}

/// Voltage dependence of a load as constant-impedance, constant-current and
/// constant-power fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipWeights {
    pub z: f64,
    pub i: f64,
    pub p: f64,
}

impl Default for ZipWeights {
    fn default() -> Self {
        ZipWeights {
            z: 0.0,
            i: 0.0,
            p: 1.0,
        }
    }
}

impl ZipWeights {
    pub fn factor(&self, vm: f64) -> f64 {
        self.z * vm * vm + self.i * vm + self.p
    }

    fn dfactor(&self, vm: f64) -> f64 {
        2.0 * self.z * vm + self.i
    }

    fn validate(&self) -> Result<()> {
        if self.z < 0.0 || self.i < 0.0 || self.p < 0.0 {
            return Err(Error::config("zip", "weights must be non-negative"));
        }
        if (self.z + self.i + self.p - 1.0).abs() > 1e-9 {
            return Err(Error::config("zip", "weights must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: BusId,
    pub p_mw: f64,
    pub q_mvar: f64,
    pub zip: ZipWeights,
}

/// Validated radial feeder. Immutable once built.
#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    loads: Vec<LoadSpec>,
    s_base_mva: f64,
    f_nominal_hz: f64,
    pcc_bus: BusId,
    index: HashMap<BusId, usize>,
    children: Vec<Vec<usize>>,
    /// Per-bus aggregated load in pu: (P, Q, zip) entries.
    bus_loads: Vec<Vec<(f64, f64, ZipWeights)>>,
    ybus: DMatrix<Complex64>,
}

pub fn to_per_unit(value_mw: f64, s_base_mva: f64) -> Result<f64> {
    if !(s_base_mva > 0.0) {
        return Err(Error::config("s_base_mva", "must be positive"));
    }
    Ok(value_mw / s_base_mva)
}

impl Network {
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        loads: Vec<LoadSpec>,
        s_base_mva: f64,
        f_nominal_hz: f64,
        pcc_bus: BusId,
    ) -> Result<Self> {
        if !(s_base_mva > 0.0) {
            return Err(Error::config("network.s_base_mva", "must be positive"));
        }
        if !(f_nominal_hz > 0.0) {
            return Err(Error::config("network.f_nominal_hz", "must be positive"));
        }
        if buses.is_empty() {
            return Err(Error::config("network.buses", "at least one bus is required"));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (k, b) in buses.iter().enumerate() {
            if !(b.nominal_kv > 0.0) {
                return Err(Error::config(
                    "network.buses",
                    format!("bus {} has non-positive nominal_kv", b.id),
                ));
            }
            if index.insert(b.id, k).is_some() {
                return Err(Error::config(
                    "network.buses",
                    format!("duplicate bus id {}", b.id),
                ));
            }
        }
        let n = buses.len();
        let lookup = |id: BusId, field: &str| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::config(field, format!("unknown bus {id}")))
        };
        let root = lookup(pcc_bus, "network.pcc_bus")?;

        if branches.len() + 1 != n {
            return Err(Error::config(
                "network.branches",
                format!(
                    "a radial feeder with {n} buses needs {} branches, found {}",
                    n - 1,
                    branches.len()
                ),
            ));
        }
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            if br.from_bus == br.to_bus {
                return Err(Error::config(
                    "network.branches",
                    format!("branch {k} connects bus {} to itself", br.from_bus),
                ));
            }
            if br.x_pu < 0.0 || br.r_pu < 0.0 {
                return Err(Error::config(
                    "network.branches",
                    format!("branch {k} has negative impedance"),
                ));
            }
            let f = lookup(br.from_bus, "network.branches")?;
            let t = lookup(br.to_bus, "network.branches")?;
            adjacency[f].push((t, k));
            adjacency[t].push((f, k));
        }

        // Orient the tree away from the PCC.
        let mut children = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(u) = stack.pop() {
            for &(v, k) in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    children[u].push(k);
                    stack.push(v);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::config(
                "network.branches",
                format!("bus {} is not connected to the PCC", buses[k].id),
            ));
        }

        let mut bus_loads = vec![Vec::new(); n];
        for ld in &loads {
            let k = lookup(ld.bus, "network.loads")?;
            if ld.p_mw < 0.0 {
                return Err(Error::config(
                    "network.loads",
                    format!("load at bus {} has negative p_mw", ld.bus),
                ));
            }
            ld.zip.validate().map_err(|_| {
                Error::config(
                    "network.loads",
                    format!("load at bus {} has invalid zip weights", ld.bus),
                )
            })?;
            bus_loads[k].push((ld.p_mw / s_base_mva, ld.q_mvar / s_base_mva, ld.zip));
        }

        let mut ybus = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for br in &branches {
            let (f, t) = (index[&br.from_bus], index[&br.to_bus]);
            let y = br.admittance();
            ybus[(f, f)] += y;
            ybus[(t, t)] += y;
            ybus[(f, t)] -= y;
            ybus[(t, f)] -= y;
        }

        Ok(Network {
            buses,
            branches,
            loads,
            s_base_mva,
            f_nominal_hz,
            pcc_bus,
            index,
            children,
            bus_loads,
            ybus,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn loads(&self) -> &[LoadSpec] {
        &self.loads
    }

    pub fn s_base_mva(&self) -> f64 {
        self.s_base_mva
    }

    pub fn f_nominal_hz(&self) -> f64 {
        self.f_nominal_hz
    }

    pub fn pcc_bus(&self) -> BusId {
        self.pcc_bus
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn index_of(&self, bus: BusId) -> Result<usize> {
        self.index
            .get(&bus)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bus {bus}")))
    }

    /// Total nominal load in pu (at 1.0 pu voltage).
    pub fn nominal_load(&self) -> Complex64 {
        self.bus_loads
            .iter()
            .flatten()
            .map(|&(p, q, _)| Complex64::new(p, q))
            .sum()
    }

    /// Same feeder with every load scaled by `factor`.
    pub fn with_scaled_loads(&self, factor: f64) -> Result<Network> {
        let loads = self
            .loads
            .iter()
            .map(|l| LoadSpec {
                p_mw: l.p_mw * factor,
                q_mvar: l.q_mvar * factor,
                ..*l
            })
            .collect();
        Network::new(
            self.buses.clone(),
            self.branches.clone(),
            loads,
            self.s_base_mva,
            self.f_nominal_hz,
            self.pcc_bus,
        )
    }

    fn load_at(&self, k: usize, vm: f64) -> (Complex64, Complex64) {
        let mut s = Complex64::new(0.0, 0.0);
        let mut ds = Complex64::new(0.0, 0.0);
        for &(p, q, zip) in &self.bus_loads[k] {
            let base = Complex64::new(p, q);
            s += base * zip.factor(vm);
            ds += base * zip.dfactor(vm);
        }
        (s, ds)
    }
}

/// A voltage source attached to a bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub bus: BusId,
    pub emf: Complex64,
    /// Series impedance in pu; zero makes the bus voltage equal to `emf`.
    pub impedance: Complex64,
}

impl Source {
    pub fn stiff(bus: BusId, voltage: Complex64) -> Self {
        Source {
            bus,
            emf: voltage,
            impedance: Complex64::new(0.0, 0.0),
        }
    }

    pub fn behind_impedance(bus: BusId, emf: Complex64, impedance: Complex64) -> Self {
        Source {
            bus,
            emf,
            impedance,
        }
    }

    fn is_stiff(&self) -> bool {
        self.impedance.norm() < STIFF_IMPEDANCE
    }
}

/// Injected complex power and its partial derivatives with respect to the bus voltage
/// magnitude and angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionEval {
    pub s: Complex64,
    pub ds_dvm: Complex64,
    pub ds_dva: Complex64,
}

pub trait Injection {
    fn eval(&self, v: Complex64) -> InjectionEval;
}

/// Constant complex power.
impl Injection for Complex64 {
    fn eval(&self, _v: Complex64) -> InjectionEval {
        InjectionEval {
            s: *self,
            ds_dvm: Complex64::new(0.0, 0.0),
            ds_dva: Complex64::new(0.0, 0.0),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BusInjection<'a> {
    pub bus: BusId,
    pub model: &'a dyn Injection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    /// Complex power entering the branch at its `from_bus` end.
    pub from: Complex64,
    /// Complex power entering the branch at its `to_bus` end.
    pub to: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSolution {
    /// Bus voltages in network bus order.
    pub voltages: Vec<Complex64>,
    pub branch_flows: Vec<BranchFlow>,
    /// Power consumed by loads, per bus.
    pub load_power: Vec<Complex64>,
    /// Power delivered by each injection, in input order.
    pub injection_power: Vec<Complex64>,
    /// Power delivered by each source into its bus, in input order.
    pub source_power: Vec<Complex64>,
    pub losses: Complex64,
    pub iterations: usize,
}

impl NetworkSolution {
    /// De-energized network: every voltage, flow and power is zero.
    pub fn dead(net: &Network, n_injections: usize, n_sources: usize) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        NetworkSolution {
            voltages: vec![zero; net.bus_count()],
            branch_flows: vec![BranchFlow { from: zero, to: zero }; net.branches.len()],
            load_power: vec![zero; net.bus_count()],
            injection_power: vec![zero; n_injections],
            source_power: vec![zero; n_sources],
            losses: zero,
            iterations: 0,
        }
    }

    pub fn voltage(&self, net: &Network, bus: BusId) -> Result<Complex64> {
        Ok(self.voltages[net.index_of(bus)?])
    }

    pub fn is_dead(&self) -> bool {
        self.voltages.iter().all(|v| v.norm() == 0.0)
    }

    pub fn total_load(&self) -> Complex64 {
        self.load_power.iter().sum()
    }

    /// Combined power of all sources (the slack injection for a single stiff source).
    pub fn slack_injection(&self) -> Complex64 {
        self.source_power.iter().sum()
    }
}

/// Power carried through `bus` toward the load side: the sum of the flows leaving on
/// downstream branches plus the load consumed at the bus itself.
pub fn bus_flow(sol: &NetworkSolution, net: &Network, bus: BusId) -> Result<(f64, f64)> {
    let k = net.index_of(bus)?;
    let mut s = sol.load_power[k];
    for &br in &net.children[k] {
        let branch = &net.branches[br];
        let flow = sol.branch_flows[br];
        s += if net.index[&branch.from_bus] == k {
            flow.from
        } else {
            flow.to
        };
    }
    Ok((s.re, s.im))
}

/// Solves the network with a single stiff slack source and constant power injections.
pub fn solve_network(
    net: &Network,
    injections: &[(BusId, Complex64)],
    slack: (BusId, Complex64),
) -> Result<NetworkSolution> {
    let bound: Vec<BusInjection<'_>> = injections
        .iter()
        .map(|(bus, s)| BusInjection {
            bus: *bus,
            model: s as &dyn Injection,
        })
        .collect();
    solve(
        net,
        &[Source::stiff(slack.0, slack.1)],
        &bound,
        None,
        SolverOptions::default(),
    )
}

/// Newton-Raphson in polar form on every bus not pinned by a stiff source.
pub fn solve(
    net: &Network,
    sources: &[Source],
    injections: &[BusInjection<'_>],
    warm_start: Option<&[Complex64]>,
    opts: SolverOptions,
) -> Result<NetworkSolution> {
    let n = net.bus_count();
    if sources.is_empty() {
        return Err(Error::InvalidArgument(
            "network solve needs at least one voltage source".into(),
        ));
    }

    let mut ybus = net.ybus.clone();
    let mut i_src = vec![Complex64::new(0.0, 0.0); n];
    let mut fixed: Vec<Option<Complex64>> = vec![None; n];
    for src in sources {
        let k = net.index_of(src.bus)?;
        if src.is_stiff() {
            if fixed[k].is_some() {
                return Err(Error::InvalidArgument(format!(
                    "two stiff sources at bus {}",
                    src.bus
                )));
            }
            fixed[k] = Some(src.emf);
        } else {
            let y = src.impedance.inv();
            ybus[(k, k)] += y;
            i_src[k] += src.emf * y;
        }
    }
    let inj_idx: Vec<usize> = injections
        .iter()
        .map(|inj| net.index_of(inj.bus))
        .collect::<Result<_>>()?;

    let unknown: Vec<usize> = (0..n).filter(|&k| fixed[k].is_none()).collect();
    let m = unknown.len();

    let flat = if sources[0].emf.norm() > 0.0 {
        sources[0].emf
    } else {
        Complex64::new(1.0, 0.0)
    };
    let mut v: Vec<Complex64> = match warm_start {
        Some(w) if w.len() == n && w.iter().all(|x| x.is_finite() && x.norm() > 0.0) => w.to_vec(),
        _ => vec![flat; n],
    };
    for k in 0..n {
        if let Some(e) = fixed[k] {
            v[k] = e;
        }
    }

    let mut s_spec = vec![Complex64::new(0.0, 0.0); n];
    let mut ds_dvm = vec![Complex64::new(0.0, 0.0); n];
    let mut ds_dva = vec![Complex64::new(0.0, 0.0); n];
    let mut current = vec![Complex64::new(0.0, 0.0); n];
    let mut mismatch = vec![Complex64::new(0.0, 0.0); n];

    let mut iterations = 0;
    loop {
        // Specified net injection (devices minus loads) and its derivatives.
        for k in 0..n {
            let vm = v[k].norm();
            let (s_load, ds_load) = net.load_at(k, vm);
            s_spec[k] = -s_load;
            ds_dvm[k] = -ds_load;
            ds_dva[k] = Complex64::new(0.0, 0.0);
        }
        for (inj, &k) in injections.iter().zip(&inj_idx) {
            let e = inj.model.eval(v[k]);
            s_spec[k] += e.s;
            ds_dvm[k] += e.ds_dvm;
            ds_dva[k] += e.ds_dva;
        }
        for i in 0..n {
            let mut acc = -i_src[i];
            for j in 0..n {
                acc += ybus[(i, j)] * v[j];
            }
            current[i] = acc;
            mismatch[i] = v[i] * current[i].conj() - s_spec[i];
        }
        let worst = unknown
            .iter()
            .map(|&k| mismatch[k].re.abs().max(mismatch[k].im.abs()))
            .fold(0.0_f64, f64::max);
        if !worst.is_finite() {
            return Err(Error::SolverDivergence {
                iterations,
                mismatch: worst,
            });
        }
        if worst < opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::SolverDivergence {
                iterations,
                mismatch: worst,
            });
        }

        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        let mut rhs = DVector::<f64>::zeros(2 * m);
        for (a, &i) in unknown.iter().enumerate() {
            rhs[a] = -mismatch[i].re;
            rhs[m + a] = -mismatch[i].im;
            for (b, &j) in unknown.iter().enumerate() {
                let vn_j = v[j] / v[j].norm();
                let mut d_va = Complex64::i() * v[i] * (-(ybus[(i, j)] * v[j])).conj();
                let mut d_vm = v[i] * (ybus[(i, j)] * vn_j).conj();
                if i == j {
                    d_va += Complex64::i() * v[i] * current[i].conj() - ds_dva[i];
                    d_vm += current[i].conj() * vn_j - ds_dvm[i];
                }
                jac[(a, b)] = d_va.re;
                jac[(a, m + b)] = d_vm.re;
                jac[(m + a, b)] = d_va.im;
                jac[(m + a, m + b)] = d_vm.im;
            }
        }
        let dx = jac.lu().solve(&rhs).ok_or(Error::SolverDivergence {
            iterations,
            mismatch: worst,
        })?;
        for (b, &j) in unknown.iter().enumerate() {
            let va = v[j].arg() + dx[b];
            let vm = v[j].norm() + dx[m + b];
            v[j] = Complex64::from_polar(vm, va);
        }
        iterations += 1;
    }

    // Assemble flows and device powers at the solved voltages.
    let mut branch_flows = Vec::with_capacity(net.branches.len());
    let mut losses = Complex64::new(0.0, 0.0);
    for br in &net.branches {
        let (f, t) = (net.index[&br.from_bus], net.index[&br.to_bus]);
        let i_ft = (v[f] - v[t]) * br.admittance();
        let from = v[f] * i_ft.conj();
        let to = v[t] * (-i_ft).conj();
        losses += from + to;
        branch_flows.push(BranchFlow { from, to });
    }
    let load_power = (0..n).map(|k| net.load_at(k, v[k].norm()).0).collect();
    let injection_power = injections
        .iter()
        .zip(&inj_idx)
        .map(|(inj, &k)| inj.model.eval(v[k]).s)
        .collect();
    let source_power = sources
        .iter()
        .map(|src| {
            let k = net.index[&src.bus];
            if src.is_stiff() {
                mismatch[k]
            } else {
                v[k] * ((src.emf - v[k]) / src.impedance).conj()
            }
        })
        .collect();

    Ok(NetworkSolution {
        voltages: v,
        branch_flows,
        load_power,
        injection_power,
        source_power,
        losses,
        iterations,
    })
}
