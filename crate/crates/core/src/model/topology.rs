use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage attached to one subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsystemSpec {
    /// Lakes joined in sequence by passive ducts.
    Lakes { name: String, lakes: Vec<String> },
    /// A river reach closed by a dam.
    Reach { name: String, reach: String, dam: String },
}

impl SubsystemSpec {
    pub fn name(&self) -> &str {
        match self {
            SubsystemSpec::Lakes { name, .. } | SubsystemSpec::Reach { name, .. } => name,
        }
    }
}

/// Where a flow leaves or enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum Endpoint {
    Lake { subsystem: usize, lake: usize },
    ReachStart { subsystem: usize },
    ReachEnd { subsystem: usize },
    /// Fixed-level downstream sink.
    Outside,
}

impl Endpoint {
    pub fn subsystem(&self) -> Option<usize> {
        match *self {
            Endpoint::Lake { subsystem, .. }
            | Endpoint::ReachStart { subsystem }
            | Endpoint::ReachEnd { subsystem } => Some(subsystem),
            Endpoint::Outside => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Dam,
    Turbine,
    /// Pump/turbine duct; positive flow runs from `from` to `to`.
    Reversible,
}

/// A manipulated flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub name: String,
    pub owner: usize,
    pub kind: FlowKind,
    pub from: Endpoint,
    pub to: Endpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub subsystems: Vec<SubsystemSpec>,
    pub flows: Vec<FlowSpec>,
}

/// Validated plant layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpvTopology {
    pub subsystems: Vec<SubsystemSpec>,
    pub flows: Vec<FlowSpec>,
    pub neighborhoods: Vec<BTreeSet<usize>>,
}

impl HpvTopology {
    pub fn num_subsystems(&self) -> usize {
        self.subsystems.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.flows.len()
    }

    /// Names of the measured outputs: every lake level and every reach-end level.
    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for s in &self.subsystems {
            if let SubsystemSpec::Lakes { lakes, .. } = s {
                names.extend(lakes.iter().map(|l| format!("h_{l}")));
            }
        }
        for s in &self.subsystems {
            if let SubsystemSpec::Reach { reach, .. } = s {
                names.push(format!("h_{reach}"));
            }
        }
        names
    }

    pub fn input_names(&self) -> Vec<String> {
        self.flows.iter().map(|f| f.name.clone()).collect()
    }

    pub fn owned_inputs(&self, i: usize) -> Vec<usize> {
        (0..self.flows.len()).filter(|&f| self.flows[f].owner == i).collect()
    }
}

fn lakes_subsystem(name: &str, lakes: &[&str]) -> SubsystemSpec {
    SubsystemSpec::Lakes {
        name: name.into(),
        lakes: lakes.iter().map(|s| s.to_string()).collect(),
    }
}

fn reach_subsystem(i: usize) -> SubsystemSpec {
    SubsystemSpec::Reach {
        name: format!("S{}", i + 2),
        reach: format!("R{i}"),
        dam: format!("D{i}"),
    }
}

/// The eight-subsystem valley: two lake subsystems feeding a chain of six reaches.
pub fn default_topology_config() -> TopologyConfig {
    let mut subsystems = vec![lakes_subsystem("S1", &["L1", "L2"]), lakes_subsystem("S2", &["L3"])];
    subsystems.extend((1..=6).map(reach_subsystem));
    let reach = |r: usize| r + 1; // R_r lives in subsystem index r + 1
    let mut flows = Vec::new();
    for d in 1..=6 {
        flows.push(FlowSpec {
            name: format!("q_D{d}"),
            owner: reach(d),
            kind: FlowKind::Dam,
            from: Endpoint::ReachEnd { subsystem: reach(d) },
            to: if d < 6 {
                Endpoint::ReachStart { subsystem: reach(d + 1) }
            } else {
                Endpoint::Outside
            },
        });
    }
    flows.push(FlowSpec {
        name: "q_T1".into(),
        owner: 0,
        kind: FlowKind::Turbine,
        from: Endpoint::Lake { subsystem: 0, lake: 0 },
        to: Endpoint::ReachStart { subsystem: reach(2) },
    });
    flows.push(FlowSpec {
        name: "q_T2".into(),
        owner: 1,
        kind: FlowKind::Turbine,
        from: Endpoint::Lake { subsystem: 1, lake: 0 },
        to: Endpoint::ReachStart { subsystem: reach(5) },
    });
    flows.push(FlowSpec {
        name: "q_C1".into(),
        owner: 0,
        kind: FlowKind::Reversible,
        from: Endpoint::Lake { subsystem: 0, lake: 0 },
        to: Endpoint::ReachStart { subsystem: reach(1) },
    });
    flows.push(FlowSpec {
        name: "q_C2".into(),
        owner: 1,
        kind: FlowKind::Reversible,
        from: Endpoint::Lake { subsystem: 1, lake: 0 },
        to: Endpoint::ReachStart { subsystem: reach(4) },
    });
    TopologyConfig { subsystems, flows }
}

/// Validates a layout and derives its coupling graph: a flow links its
/// owner with every subsystem it touches.
pub fn build_topology(config: &TopologyConfig) -> Result<HpvTopology> {
    let m = config.subsystems.len();
    if m == 0 {
        return Err(Error::InvalidParameter("topology has no subsystems".into()));
    }
    let bad = |msg: String| Err(Error::InvalidParameter(msg));
    for s in &config.subsystems {
        if let SubsystemSpec::Lakes { name, lakes } = s {
            if lakes.is_empty() {
                return bad(format!("subsystem {name} has no lakes"));
            }
        }
    }
    let mut neighborhoods: Vec<BTreeSet<usize>> = (0..m).map(|i| BTreeSet::from([i])).collect();
    for f in &config.flows {
        if f.owner >= m {
            return bad(format!("flow {} has unknown owner {}", f.name, f.owner));
        }
        for e in [f.from, f.to] {
            match e {
                Endpoint::Outside => {}
                Endpoint::Lake { subsystem, lake } => match config.subsystems.get(subsystem) {
                    Some(SubsystemSpec::Lakes { lakes, .. }) if lake < lakes.len() => {}
                    _ => return bad(format!("flow {} attaches to a missing lake", f.name)),
                },
                Endpoint::ReachStart { subsystem } | Endpoint::ReachEnd { subsystem } => {
                    match config.subsystems.get(subsystem) {
                        Some(SubsystemSpec::Reach { .. }) => {}
                        _ => return bad(format!("flow {} attaches to a missing reach", f.name)),
                    }
                }
            }
            if let Some(j) = e.subsystem() {
                neighborhoods[f.owner].insert(j);
                neighborhoods[j].insert(f.owner);
            }
        }
        if f.from == f.to {
            return bad(format!("flow {} starts and ends at the same place", f.name));
        }
    }
    Ok(HpvTopology {
        subsystems: config.subsystems.clone(),
        flows: config.flows.clone(),
        neighborhoods,
    })
}

pub fn default_topology() -> HpvTopology {
    build_topology(&default_topology_config()).expect("default topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_based(n: &BTreeSet<usize>) -> BTreeSet<usize> {
        n.iter().map(|i| i + 1).collect()
    }

    #[test]
    fn default_neighborhoods() {
        let t = default_topology();
        let expect: [&[usize]; 8] = [
            &[1, 3, 4],
            &[2, 6, 7],
            &[3, 1, 4],
            &[4, 1, 3, 5],
            &[5, 4, 6],
            &[6, 2, 7, 5],
            &[7, 2, 6, 8],
            &[8, 7],
        ];
        for (i, e) in expect.iter().enumerate() {
            assert_eq!(one_based(&t.neighborhoods[i]), e.iter().copied().collect(), "N_{}", i + 1);
        }
        assert_eq!(t.num_inputs(), 10);
        assert_eq!(t.output_names().len(), 9);
    }

    #[test]
    fn two_reach_chain() {
        let cfg = TopologyConfig {
            subsystems: vec![reach_subsystem(1), reach_subsystem(2)],
            flows: vec![
                FlowSpec {
                    name: "q_D1".into(),
                    owner: 0,
                    kind: FlowKind::Dam,
                    from: Endpoint::ReachEnd { subsystem: 0 },
                    to: Endpoint::ReachStart { subsystem: 1 },
                },
                FlowSpec {
                    name: "q_D2".into(),
                    owner: 1,
                    kind: FlowKind::Dam,
                    from: Endpoint::ReachEnd { subsystem: 1 },
                    to: Endpoint::Outside,
                },
            ],
        };
        let t = build_topology(&cfg).unwrap();
        assert_eq!(t.neighborhoods[0], BTreeSet::from([0, 1]));
    }

    #[test]
    fn malformed_config_rejected() {
        let mut cfg = default_topology_config();
        cfg.flows[0].owner = 42;
        assert!(build_topology(&cfg).is_err());
        let mut cfg = default_topology_config();
        cfg.flows[6].from = Endpoint::Lake { subsystem: 0, lake: 7 };
        assert!(build_topology(&cfg).is_err());
    }
}
