use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::plant::{HpvModel, InputChannel};
use crate::model::topology::FlowKind;

/// Handles to the two channels that replace one reversible duct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuctChannels {
    pub flow: usize,
    pub owner: usize,
    pub turbine: usize,
    pub pump: usize,
}

fn split_columns(b: &DMatrix<f64>, order: &[(usize, f64)]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(b.nrows(), order.len());
    for (c, &(src, sign)) in order.iter().enumerate() {
        out.set_column(c, &(b.column(src) * sign));
    }
    out
}

/// Replaces every reversible duct input by a turbine channel (the original
/// column) and a pump channel (the negated column), both nonnegative.
/// Channels keep their order; the new pairs go last.
pub fn augment_virtual_flows(model: &HpvModel) -> Result<(HpvModel, Vec<DuctChannels>)> {
    let mut order: Vec<(usize, f64)> = Vec::new();
    let mut channels: Vec<InputChannel> = Vec::new();
    let mut pending = Vec::new();
    for (c, ch) in model.inputs.iter().enumerate() {
        let reversible = model.topology.flows[ch.flow].kind == FlowKind::Reversible;
        if reversible && ch.sign == 1.0 && ch.lower < 0.0 {
            pending.push(c);
        } else {
            order.push((c, 1.0));
            channels.push(ch.clone());
        }
    }
    let mut pairs = Vec::new();
    for c in pending {
        let ch = &model.inputs[c];
        if ch.steady != 0.0 {
            return Err(Error::InvalidParameter(format!("{} must be idle at steady state", ch.name)));
        }
        let turbine = channels.len();
        order.push((c, 1.0));
        channels.push(InputChannel {
            name: format!("{}T", ch.name),
            sign: 1.0,
            lower: 0.0,
            upper: ch.upper,
            ..ch.clone()
        });
        order.push((c, -1.0));
        channels.push(InputChannel {
            name: format!("{}P", ch.name),
            sign: -1.0,
            lower: 0.0,
            upper: -ch.lower,
            ..ch.clone()
        });
        pairs.push(DuctChannels { flow: ch.flow, owner: ch.owner, turbine, pump: turbine + 1 });
    }
    let mut out = model.clone();
    out.inputs = channels;
    for s in &mut out.subsystems {
        s.continuous.b = split_columns(&s.continuous.b, &order);
        if let Some(d) = s.discrete.as_mut() {
            d.b = split_columns(&d.b, &order);
        }
        if let Some(r) = s.reduced.as_mut() {
            r.system.b = split_columns(&r.system.b, &order);
        }
    }
    Ok((out, pairs))
}

/// Coefficient on a level deviation of subsystem `subsystem`, output row `output`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTerm {
    pub subsystem: usize,
    pub output: usize,
    pub coeff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputTerm {
    pub channel: usize,
    pub coeff: f64,
}

/// Affine power of one subsystem: `offset + Σ level terms · Δy + Σ input terms · Δu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemPower {
    pub levels: Vec<LevelTerm>,
    pub inputs: Vec<InputTerm>,
    /// Steady-state power, MW.
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerMap {
    pub subsystems: Vec<SubsystemPower>,
}

impl PowerMap {
    pub fn steady_powers(&self) -> Vec<f64> {
        self.subsystems.iter().map(|s| s.offset).collect()
    }

    pub fn steady_total(&self) -> f64 {
        self.steady_powers().iter().sum()
    }

    /// Linearized power of every subsystem from output deviations and
    /// input deviations.
    pub fn evaluate(&self, y_dev: &[DVector<f64>], u_dev: &DVector<f64>) -> Vec<f64> {
        self.subsystems
            .iter()
            .map(|s| {
                s.offset
                    + s.levels.iter().map(|t| t.coeff * y_dev[t.subsystem][t.output]).sum::<f64>()
                    + s.inputs.iter().map(|t| t.coeff * u_dev[t.channel]).sum::<f64>()
            })
            .collect()
    }
}

fn head_deviation(model: &HpvModel, flow: usize, y_dev: &[DVector<f64>]) -> f64 {
    let spec = &model.topology.flows[flow];
    let level = |e| HpvModel::level_row(e).map_or(0.0, |(j, r)| y_dev[j][r]);
    level(spec.from) - level(spec.to)
}

/// Power of every subsystem, MW, from the bilinear law `k · q · Δx`.
/// Reversible ducts use the turbine coefficient on positive flow and the
/// pump coefficient on negative flow; split channels use their own.
pub fn nonlinear_power(model: &HpvModel, y_dev: &[DVector<f64>], u: &DVector<f64>) -> Vec<f64> {
    let mut p = vec![0.0; model.topology.num_subsystems()];
    for (c, ch) in model.inputs.iter().enumerate() {
        let fp = &model.params.flows[ch.flow];
        let head = fp.head + head_deviation(model, ch.flow, y_dev);
        let q = ch.sign * u[c];
        let k = if q >= 0.0 { fp.k_turbine } else { fp.k_pump.unwrap_or(fp.k_turbine) };
        p[ch.owner] += k * q * head;
    }
    p
}

/// First-order expansion of the power law around the steady state.
/// Reversible ducts must already be split into virtual flows.
pub fn linearize_power(model: &HpvModel) -> Result<PowerMap> {
    let m = model.topology.num_subsystems();
    let mut out: Vec<SubsystemPower> =
        (0..m).map(|_| SubsystemPower { levels: Vec::new(), inputs: Vec::new(), offset: 0.0 }).collect();
    for (c, ch) in model.inputs.iter().enumerate() {
        let spec = &model.topology.flows[ch.flow];
        let fp = &model.params.flows[ch.flow];
        let k = if ch.sign >= 0.0 {
            fp.k_turbine
        } else {
            fp.k_pump
                .ok_or_else(|| Error::InvalidParameter(format!("{} has no pump coefficient", ch.name)))?
        };
        if spec.kind == FlowKind::Reversible && ch.lower < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "{} changes direction; split it into virtual flows first",
                ch.name
            )));
        }
        let s = &mut out[ch.owner];
        let q_ss = ch.sign * ch.steady;
        s.offset += k * q_ss * fp.head;
        s.inputs.push(InputTerm { channel: c, coeff: ch.sign * k * fp.head });
        if q_ss != 0.0 {
            for (e, sign) in [(spec.from, 1.0), (spec.to, -1.0)] {
                if let Some((j, r)) = HpvModel::level_row(e) {
                    s.levels.push(LevelTerm { subsystem: j, output: r, coeff: sign * k * q_ss });
                }
            }
        }
    }
    Ok(PowerMap { subsystems: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::HpvParams;
    use crate::model::plant::synthesize_linear_model;
    use crate::model::topology::default_topology;

    fn augmented() -> (HpvModel, Vec<DuctChannels>) {
        let m = synthesize_linear_model(&default_topology(), &HpvParams::default()).unwrap();
        augment_virtual_flows(&m).unwrap()
    }

    #[test]
    fn augmentation_shape() {
        let (m, pairs) = augmented();
        assert_eq!(m.num_inputs(), 12);
        assert_eq!(pairs.len(), 2);
        let names: Vec<&str> = m.inputs.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(&names[8..], &["q_C1T", "q_C1P", "q_C2T", "q_C2P"]);
        for p in &pairs {
            for s in &m.subsystems {
                let t = s.continuous.b.column(p.turbine).into_owned();
                let q = s.continuous.b.column(p.pump).into_owned();
                assert_eq!(t, -q);
            }
        }
    }

    #[test]
    fn virtual_flow_signs_and_steady_power() {
        let (m, pairs) = augmented();
        let pm = linearize_power(&m).unwrap();
        let s1 = &pm.subsystems[0];
        let coeff = |c: usize| s1.inputs.iter().find(|t| t.channel == c).unwrap().coeff;
        assert!(coeff(pairs[0].turbine) > 0.0);
        assert!(coeff(pairs[0].pump) < 0.0);
        assert_eq!(pm.subsystems[0].offset, 0.0);
        let d3 = &m.params.flows[2];
        assert_eq!(pm.subsystems[4].offset, d3.k_turbine * 100.0 * d3.head);
        let total = pm.steady_total();
        assert!(total > 80.0 && total < 130.0, "{total}");
    }

    #[test]
    fn unsplit_duct_rejected() {
        let m = synthesize_linear_model(&default_topology(), &HpvParams::default()).unwrap();
        assert!(linearize_power(&m).is_err());
    }
}
