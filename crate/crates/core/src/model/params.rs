use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::topology::{FlowKind, HpvTopology, SubsystemSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LakeParams {
    /// Surface area, m².
    pub area: f64,
    /// Steady water depth, m.
    pub depth: f64,
    /// Allowed level band around the steady depth, m.
    pub level_band: f64,
    /// Conductance of the passive duct to the next lake of the same subsystem, m²/s.
    #[serde(default)]
    pub link_to_next: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachParams {
    pub length: f64,
    pub width: f64,
    /// Steady depth at the dam, m.
    pub depth: f64,
    /// Linear friction rate on cell-to-cell flow, 1/s.
    pub friction: f64,
    pub cells: usize,
    /// Allowed band for the level at the dam, m.
    pub level_band: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflowParams {
    /// Position of the reach among the reach subsystems, zero-based.
    pub reach: usize,
    /// Level node receiving the inflow; 0 is the upstream end.
    pub node: usize,
    /// m³/s.
    pub flow: f64,
}

/// Power and box data for one manipulated flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Turbine coefficient, MW per (m³/s · m).
    pub k_turbine: f64,
    /// Pump coefficient for reversible ducts.
    #[serde(default)]
    pub k_pump: Option<f64>,
    /// Steady head across the flow, m.
    pub head: f64,
    /// Absolute bounds in m³/s; a reversible duct pumps when negative.
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpvParams {
    pub gravity: f64,
    pub sampling_time: f64,
    pub lakes: Vec<LakeParams>,
    pub reaches: Vec<ReachParams>,
    pub inflows: Vec<InflowParams>,
    pub flows: Vec<FlowParams>,
    pub reduced_orders: Vec<usize>,
}

fn reach(length: f64, width: f64, depth: f64) -> ReachParams {
    ReachParams {
        length,
        width,
        depth,
        friction: 5e-3,
        cells: 20,
        level_band: 0.6,
    }
}

fn dam(head: f64, q_ss: f64) -> FlowParams {
    FlowParams {
        k_turbine: 0.0085,
        k_pump: None,
        head,
        lower: 0.8 * q_ss,
        upper: 1.2 * q_ss,
    }
}

impl Default for HpvParams {
    fn default() -> Self {
        let lake = |area: f64, link: Option<f64>| LakeParams {
            area,
            depth: 10.0,
            level_band: 2.0,
            link_to_next: link,
        };
        let turbine = FlowParams {
            k_turbine: 0.0085,
            k_pump: None,
            head: 140.0,
            lower: 0.0,
            upper: 40.0,
        };
        let duct = FlowParams {
            k_turbine: 0.0082,
            k_pump: Some(0.0112),
            head: 120.0,
            lower: -30.0,
            upper: 30.0,
        };
        Self {
            gravity: 9.81,
            sampling_time: 1800.0,
            lakes: vec![lake(3.0e6, Some(20.0)), lake(2.0e6, None), lake(2.5e6, None)],
            reaches: vec![
                reach(10_000.0, 100.0, 5.0),
                reach(9_000.0, 110.0, 5.5),
                reach(11_000.0, 100.0, 5.0),
                reach(10_000.0, 120.0, 6.0),
                reach(9_500.0, 100.0, 5.0),
                reach(12_000.0, 110.0, 6.0),
            ],
            inflows: vec![
                InflowParams { reach: 0, node: 0, flow: 80.0 },
                InflowParams { reach: 2, node: 10, flow: 20.0 },
            ],
            flows: vec![
                dam(20.0, 80.0),
                dam(22.0, 80.0),
                dam(18.0, 100.0),
                dam(24.0, 100.0),
                dam(20.0, 100.0),
                dam(25.0, 100.0),
                turbine.clone(),
                FlowParams { head: 130.0, ..turbine },
                duct.clone(),
                FlowParams { head: 110.0, ..duct },
            ],
            reduced_orders: vec![2, 1, 5, 5, 5, 5, 5, 4],
        }
    }
}

impl HpvParams {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks counts against the topology and signs of every physical quantity.
    pub fn check(&self, topology: &HpvTopology) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let n_lakes: usize = topology
            .subsystems
            .iter()
            .map(|s| match s {
                SubsystemSpec::Lakes { lakes, .. } => lakes.len(),
                SubsystemSpec::Reach { .. } => 0,
            })
            .sum();
        let n_reaches = topology
            .subsystems
            .iter()
            .filter(|s| matches!(s, SubsystemSpec::Reach { .. }))
            .count();
        if self.lakes.len() != n_lakes {
            return bad(format!("expected {n_lakes} lakes, got {}", self.lakes.len()));
        }
        if self.reaches.len() != n_reaches {
            return bad(format!("expected {n_reaches} reaches, got {}", self.reaches.len()));
        }
        if self.flows.len() != topology.num_inputs() {
            return bad(format!("expected {} flows, got {}", topology.num_inputs(), self.flows.len()));
        }
        if self.reduced_orders.len() != topology.num_subsystems() {
            return bad("one reduced order per subsystem required".into());
        }
        if !(self.gravity > 0.0 && self.sampling_time > 0.0) {
            return bad("gravity and sampling time must be positive".into());
        }
        for (i, l) in self.lakes.iter().enumerate() {
            if !(l.area > 0.0 && l.depth > 0.0 && l.level_band > 0.0) {
                return bad(format!("lake {i}: area, depth and band must be positive"));
            }
            if matches!(l.link_to_next, Some(k) if k <= 0.0) {
                return bad(format!("lake {i}: link conductance must be positive"));
            }
        }
        for (i, r) in self.reaches.iter().enumerate() {
            if !(r.length > 0.0 && r.width > 0.0 && r.depth > 0.0 && r.friction > 0.0 && r.level_band > 0.0)
            {
                return bad(format!("reach {i}: geometry and friction must be positive"));
            }
            if r.cells == 0 {
                return bad(format!("reach {i}: at least one cell required"));
            }
        }
        for f in &self.inflows {
            match self.reaches.get(f.reach) {
                Some(r) if f.node <= r.cells && f.flow >= 0.0 => {}
                _ => return bad(format!("inflow into reach {} node {} is invalid", f.reach, f.node)),
            }
        }
        for (p, spec) in self.flows.iter().zip(&topology.flows) {
            if !(p.k_turbine > 0.0 && p.head > 0.0 && p.lower < p.upper) {
                return bad(format!("{}: coefficient, head and bounds invalid", spec.name));
            }
            if spec.kind == FlowKind::Reversible {
                match p.k_pump {
                    Some(k) if k > 0.0 => {}
                    _ => return bad(format!("{}: reversible duct needs a positive pump coefficient", spec.name)),
                }
            }
        }
        Ok(())
    }
}
