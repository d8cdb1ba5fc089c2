//! Configuration file loading.
//!
//! The configuration is a TOML document. Every field has a default, so an empty file
//! describes the low-load, diesel-ON, zero-PV case on the five-bus feeder. Unknown keys
//! are rejected.
//!
//! ```toml
//! load = "HIGH"          # "LOW" (1 MW), "HIGH" (2.8 MW) or a number in MW
//! diesel = "OFF"
//! pv_fraction = 0.3
//!
//! [engine]
//! t_end_s = 10.0
//! dt_s = 0.001
//!
//! [genset]
//! h = 1.2
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::engine::SimConfig;
use crate::netmodel::{Branch, Bus, BusId, LoadSpec, Network, ZipWeights};
use crate::{Error, Result};

pub const LOW_LOAD_MW: f64 = 1.0;
pub const HIGH_LOAD_MW: f64 = 2.8;

/// Microgrid demand level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadLevel {
    Low,
    High,
    Mw(f64),
}

impl LoadLevel {
    pub fn mw(&self) -> f64 {
        match self {
            LoadLevel::Low => LOW_LOAD_MW,
            LoadLevel::High => HIGH_LOAD_MW,
            LoadLevel::Mw(v) => *v,
        }
    }
}

impl Default for LoadLevel {
    fn default() -> Self {
        LoadLevel::Low
    }
}

impl fmt::Display for LoadLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadLevel::Low => write!(f, "LOW"),
            LoadLevel::High => write!(f, "HIGH"),
            LoadLevel::Mw(v) => write!(f, "{v} MW"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LoadLevelRepr {
    Named(String),
    Mw(f64),
}

impl Serialize for LoadLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LoadLevel::Low => LoadLevelRepr::Named("LOW".into()),
            LoadLevel::High => LoadLevelRepr::Named("HIGH".into()),
            LoadLevel::Mw(v) => LoadLevelRepr::Mw(*v),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LoadLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match LoadLevelRepr::deserialize(d)? {
            LoadLevelRepr::Named(s) => match s.to_ascii_uppercase().as_str() {
                "LOW" => Ok(LoadLevel::Low),
                "HIGH" => Ok(LoadLevel::High),
                other => Err(serde::de::Error::custom(format!(
                    "load must be LOW, HIGH or a number of MW, got `{other}`"
                ))),
            },
            LoadLevelRepr::Mw(v) => Ok(LoadLevel::Mw(v)),
        }
    }
}

/// Whether the diesel genset is running before islanding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DieselStatus {
    #[default]
    #[serde(rename = "ON", alias = "on")]
    On,
    #[serde(rename = "OFF", alias = "off")]
    Off,
}

impl fmt::Display for DieselStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DieselStatus::On => "ON",
            DieselStatus::Off => "OFF",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSettings {
    pub t_end_s: f64,
    pub dt_s: f64,
    pub islanding_time_s: f64,
    /// When false no islanding event is scheduled and the run stays grid-connected.
    pub islanding: bool,
    pub record_buses: Vec<BusId>,
    /// Record every n-th integration step.
    pub decimation: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            t_end_s: 10.0,
            dt_s: 1e-3,
            islanding_time_s: 3.0,
            islanding: true,
            record_buses: vec![104],
            decimation: 10,
            solver_tol: 1e-8,
            solver_max_iter: 30,
        }
    }
}

/// One load point; its demand is `share` of the scenario load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadShare {
    pub bus: BusId,
    pub share: f64,
    #[serde(default = "default_power_factor")]
    pub power_factor: f64,
    #[serde(default)]
    pub zip: ZipWeights,
}

fn default_power_factor() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    pub f_nominal_hz: f64,
    pub pcc_bus: BusId,
    pub genset_bus: BusId,
    pub pv_bus: BusId,
    /// Utility source behind its Thevenin reactance at the PCC.
    pub grid_v_pu: f64,
    pub grid_x_pu: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub loads: Vec<LoadShare>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let ids = [101, 102, 103, 104, 105];
        NetworkConfig {
            s_base_mva: 10.0,
            v_base_kv: 13.8,
            f_nominal_hz: 60.0,
            pcc_bus: 101,
            genset_bus: 103,
            pv_bus: 103,
            grid_v_pu: 1.0,
            grid_x_pu: 0.02,
            buses: ids
                .iter()
                .map(|&id| Bus {
                    id,
                    nominal_kv: 13.8,
                })
                .collect(),
            branches: ids
                .windows(2)
                .map(|w| Branch {
                    from_bus: w[0],
                    to_bus: w[1],
                    r_pu: 0.01,
                    x_pu: 0.05,
                })
                .collect(),
            loads: [104, 105]
                .iter()
                .map(|&bus| LoadShare {
                    bus,
                    share: 0.5,
                    power_factor: default_power_factor(),
                    zip: ZipWeights::default(),
                })
                .collect(),
        }
    }
}

impl NetworkConfig {
    /// Builds the feeder carrying `load_mw` of total demand.
    pub fn build(&self, load_mw: f64) -> Result<Network> {
        let mut loads = Vec::with_capacity(self.loads.len());
        for l in &self.loads {
            if l.share < 0.0 {
                return Err(Error::config("network.loads", "share must be non-negative"));
            }
            if !(l.power_factor > 0.0 && l.power_factor <= 1.0) {
                return Err(Error::config("network.loads", "power_factor must lie in (0, 1]"));
            }
            let p_mw = l.share * load_mw;
            let q_mvar = p_mw * (1.0 / (l.power_factor * l.power_factor) - 1.0).max(0.0).sqrt();
            loads.push(LoadSpec {
                bus: l.bus,
                p_mw,
                q_mvar,
                zip: l.zip,
            });
        }
        let net = Network::new(
            self.buses.clone(),
            self.branches.clone(),
            loads,
            self.s_base_mva,
            self.f_nominal_hz,
            self.pcc_bus,
        )?;
        for (field, bus) in [("network.genset_bus", self.genset_bus), ("network.pv_bus", self.pv_bus)] {
            net.index_of(bus)
                .map_err(|_| Error::config(field, format!("unknown bus {bus}")))?;
        }
        if !(self.grid_x_pu > 0.0) {
            return Err(Error::config("network.grid_x_pu", "must be positive"));
        }
        Ok(net)
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse {
            line,
            message: e.message().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical TOML text of a resolved configuration.
pub fn render_config(cfg: &SimConfig) -> String {
    toml::to_string(cfg).expect("configuration is always serializable")
}

/// Short content hash identifying a resolved parameter set.
pub fn parameter_hash(cfg: &SimConfig) -> String {
    let digest = Sha256::digest(render_config(cfg).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
