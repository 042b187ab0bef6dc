//! Network case data: parsing, admittance assembly, and power-flow voltage profiles.

mod admittance;
mod parse;
mod powerflow;
mod profile;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use admittance::{build_admittance, AdmittanceModel, BranchEnds};
pub use parse::{emit_case, parse_case, parse_case_json, to_case_json};
pub use powerflow::{bus_injections, solve_power_flow, PowerFlowOptions, PowerFlowSolution};
pub use profile::{load_profile, save_profile, VoltageProfile};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Pq,
    Pv,
    Slack,
}

impl BusKind {
    pub(crate) fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            1 => Some(BusKind::Pq),
            2 => Some(BusKind::Pv),
            3 => Some(BusKind::Slack),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Slack => 3,
        }
    }
}

/// Bus record. Demands and shunts are kept in the case file's units (MW, MVAr).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    pub v_mag_setpoint: f64,
    pub v_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub total_charging_b: f64,
    /// Off-nominal tap magnitude; a zero in the source file is stored as 1.
    pub tap_ratio: f64,
    pub phase_shift_deg: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub p_output: f64,
    pub v_setpoint: f64,
    pub in_service: bool,
}

/// A validated network case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub gens: Vec<Generator>,
}

impl NetworkCase {
    /// Checks the structural invariants and returns the case.
    pub fn validated(self) -> Result<Self> {
        if !(self.base_mva > 0.0) {
            return Err(Error::InvalidCase(format!(
                "baseMVA must be positive, got {}",
                self.base_mva
            )));
        }
        if self.buses.is_empty() {
            return Err(Error::InvalidCase("case has no buses".into()));
        }
        let mut seen = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if seen.insert(b.id, i).is_some() {
                return Err(Error::DuplicateBus(b.id));
            }
        }
        let slacks: Vec<u32> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        match slacks.len() {
            0 => return Err(Error::NoSlack),
            1 => {}
            _ => return Err(Error::MultipleSlack(slacks)),
        }
        for (k, br) in self.branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !seen.contains_key(&end) {
                    return Err(Error::UnknownBus {
                        element: format!("branch {} ({}-{})", k + 1, br.from, br.to),
                        bus: end,
                    });
                }
            }
            if br.from == br.to {
                return Err(Error::InvalidCase(format!(
                    "branch {} connects bus {} to itself",
                    k + 1,
                    br.from
                )));
            }
            if br.r < 0.0 {
                return Err(Error::InvalidCase(format!(
                    "branch {}-{} has negative resistance",
                    br.from, br.to
                )));
            }
        }
        for g in &self.gens {
            if !seen.contains_key(&g.bus) {
                return Err(Error::UnknownBus {
                    element: "generator".into(),
                    bus: g.bus,
                });
            }
        }
        Ok(self)
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    /// Number of in-service branches.
    pub fn n_branch(&self) -> usize {
        self.branches.iter().filter(|b| b.in_service).count()
    }

    /// Internal (0-based) index of a bus id.
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus_index_or_err(&self, id: u32) -> Result<usize> {
        self.bus_index(id).ok_or(Error::UnknownBus {
            element: "request".into(),
            bus: id,
        })
    }

    pub fn bus_ids(&self) -> Vec<u32> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Active demand of bus `k` in per unit.
    pub fn p_demand_pu(&self, k: usize) -> f64 {
        self.buses[k].p_demand / self.base_mva
    }

    pub fn q_demand_pu(&self, k: usize) -> f64 {
        self.buses[k].q_demand / self.base_mva
    }

    /// In-service branches in file order; this order defines branch rows everywhere.
    pub fn active_branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.in_service)
    }

    pub fn active_gens(&self) -> impl Iterator<Item = &Generator> {
        self.gens.iter().filter(|g| g.in_service)
    }
}

/// Reads a case file, choosing the matrix or structured format from its content.
pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkCase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        parse_case_json(&text)
    } else {
        parse_case(&text)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    /// Slack bus 1 feeding PQ bus 2 through a lossless x=0.1 line.
    pub const TWO_BUS: &str = "\
baseMVA = 100;
bus = [
  1 3 0 0 0 0 1 1 0;
  2 1 0 0 0 0 1 1 0;
];
gen = [
  1 0 0 0 0 1 100 1;
];
branch = [
  1 2 0 0.1 0 0 0 0 0 0 1;
];
";
}
