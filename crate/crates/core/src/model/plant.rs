use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::HpvParams;
use crate::model::topology::{Endpoint, FlowKind, HpvTopology, SubsystemSpec};
use crate::serde_util;

/// `(A, B, C)` triple. `B` spans every plant input channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub c: DMatrix<f64>,
}

impl StateSpace {
    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    /// Output sequence for a step on input column `j`, starting at rest.
    pub fn step_response(&self, j: usize, steps: usize) -> Vec<DVector<f64>> {
        let mut x = DVector::zeros(self.states());
        let b = self.b.column(j).into_owned();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = &self.a * x + &b;
            out.push(&self.c * &x);
        }
        out
    }
}

/// Balanced-truncation result: `x_r = T x`, `x ≈ T_inv x_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    pub system: StateSpace,
    #[serde(with = "serde_util::matrix")]
    pub t: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub t_inv: DMatrix<f64>,
    /// Hankel singular values of the stable part, descending.
    pub hankel_singular_values: Vec<f64>,
    /// Retained integrator modes.
    pub integrators: usize,
}

impl ReducedModel {
    pub fn order(&self) -> usize {
        self.system.states()
    }
}

/// One plant input as seen by the controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputChannel {
    pub name: String,
    /// Index into the topology flow list.
    pub flow: usize,
    /// Contribution of this channel to the physical flow.
    pub sign: f64,
    pub owner: usize,
    pub lower: f64,
    pub upper: f64,
    pub steady: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemModel {
    pub index: usize,
    pub name: String,
    pub state_names: Vec<String>,
    /// Outputs: measured levels first, then levels used only by power maps.
    pub output_names: Vec<String>,
    pub measured: usize,
    pub continuous: StateSpace,
    pub discrete: Option<StateSpace>,
    pub reduced: Option<ReducedModel>,
    #[serde(with = "serde_util::vector")]
    pub x_ss: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub y_ss: DVector<f64>,
    /// Absolute bounds on the measured outputs, m.
    pub y_bounds: Vec<(f64, f64)>,
    /// Storage area attached to each state, zero for flow states.
    pub storage: Vec<f64>,
}

impl SubsystemModel {
    pub fn states(&self) -> usize {
        self.continuous.states()
    }

    pub fn discrete(&self) -> Result<&StateSpace> {
        self.discrete
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("{} is not discretized", self.name)))
    }

    pub fn reduced(&self) -> Result<&ReducedModel> {
        self.reduced
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("{} is not reduced", self.name)))
    }

    /// Measured rows of `c`.
    pub fn measured_rows(c: &DMatrix<f64>, measured: usize) -> DMatrix<f64> {
        c.rows(0, measured).into_owned()
    }
}

/// The whole valley in deviation variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpvModel {
    pub topology: HpvTopology,
    pub params: HpvParams,
    pub subsystems: Vec<SubsystemModel>,
    pub inputs: Vec<InputChannel>,
}

impl HpvModel {
    pub fn total_states(&self) -> usize {
        self.subsystems.iter().map(|s| s.states()).sum()
    }

    pub fn total_reduced_states(&self) -> usize {
        self.subsystems
            .iter()
            .map(|s| s.reduced.as_ref().map_or(0, |r| r.order()))
            .sum()
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_measured(&self) -> usize {
        self.subsystems.iter().map(|s| s.measured).sum()
    }

    pub fn owned_inputs(&self, i: usize) -> Vec<usize> {
        (0..self.inputs.len()).filter(|&c| self.inputs[c].owner == i).collect()
    }

    /// Steady value of every input channel.
    pub fn steady_inputs(&self) -> DVector<f64> {
        DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|c| c.steady))
    }

    /// Physical flows from channel values.
    pub fn net_flows(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(self.topology.num_inputs());
        for (c, ch) in self.inputs.iter().enumerate() {
            q[ch.flow] += ch.sign * u[c];
        }
        q
    }

    /// Row of subsystem `j`'s output vector holding the level at `e`.
    pub fn level_row(e: Endpoint) -> Option<(usize, usize)> {
        match e {
            Endpoint::Lake { subsystem, lake } => Some((subsystem, lake)),
            Endpoint::ReachEnd { subsystem } => Some((subsystem, 0)),
            Endpoint::ReachStart { subsystem } => Some((subsystem, 1)),
            Endpoint::Outside => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Steady flow of every topology flow: ducts idle, dams pass everything that
/// enters their reach.
fn steady_flows(topology: &HpvTopology, params: &HpvParams, reach_of: &[Option<usize>]) -> Result<Vec<f64>> {
    let nf = topology.num_inputs();
    let mut q = vec![0.0; nf];
    for _ in 0..=nf {
        let mut changed = false;
        for f in 0..nf {
            if topology.flows[f].kind != FlowKind::Dam {
                continue;
            }
            let Endpoint::ReachEnd { subsystem } = topology.flows[f].from else {
                return Err(Error::InvalidParameter(format!(
                    "dam {} must leave a reach end",
                    topology.flows[f].name
                )));
            };
            let r = reach_of[subsystem].expect("validated reach");
            let mut total: f64 = params.inflows.iter().filter(|i| i.reach == r).map(|i| i.flow).sum();
            for g in 0..nf {
                if topology.flows[g].to == (Endpoint::ReachStart { subsystem }) {
                    total += q[g];
                }
            }
            if total != q[f] {
                q[f] = total;
                changed = true;
            }
        }
        if !changed {
            return Ok(q);
        }
    }
    Err(Error::InvalidParameter("dam chain contains a cycle".into()))
}

/// Linear mass-balance model of every subsystem around its steady state.
///
/// Reaches are chains of level nodes joined by cell flows obeying
/// `q̇ = κ (h_up − h_down) − f q`; lakes are integrators joined by passive
/// ducts. Subsystems interact only through the manipulated flows.
pub fn synthesize_linear_model(topology: &HpvTopology, params: &HpvParams) -> Result<HpvModel> {
    params.check(topology)?;
    let m = topology.num_subsystems();
    let nf = topology.num_inputs();
    let mut reach_of = vec![None; m];
    let mut lake_of = vec![None; m];
    let (mut nr, mut nl) = (0, 0);
    for (i, s) in topology.subsystems.iter().enumerate() {
        match s {
            SubsystemSpec::Reach { .. } => {
                reach_of[i] = Some(nr);
                nr += 1;
            }
            SubsystemSpec::Lakes { lakes, .. } => {
                lake_of[i] = Some(nl);
                nl += lakes.len();
            }
        }
    }
    let q_ss = steady_flows(topology, params, &reach_of)?;
    let g = params.gravity;

    let mut subsystems = Vec::with_capacity(m);
    for (i, spec) in topology.subsystems.iter().enumerate() {
        let sub = match spec {
            SubsystemSpec::Lakes { name, lakes } => {
                let first = lake_of[i].unwrap();
                let n = lakes.len();
                let mut a = DMatrix::zeros(n, n);
                let areas: Vec<f64> = (0..n).map(|l| params.lakes[first + l].area).collect();
                for l in 0..n.saturating_sub(1) {
                    let k = params.lakes[first + l].link_to_next.unwrap_or(0.0);
                    a[(l, l)] -= k / areas[l];
                    a[(l, l + 1)] += k / areas[l];
                    a[(l + 1, l + 1)] -= k / areas[l + 1];
                    a[(l + 1, l)] += k / areas[l + 1];
                }
                let mut b = DMatrix::zeros(n, nf);
                for (f, flow) in topology.flows.iter().enumerate() {
                    if let Endpoint::Lake { subsystem, lake } = flow.from {
                        if subsystem == i {
                            b[(lake, f)] -= 1.0 / areas[lake];
                        }
                    }
                    if let Endpoint::Lake { subsystem, lake } = flow.to {
                        if subsystem == i {
                            b[(lake, f)] += 1.0 / areas[lake];
                        }
                    }
                }
                let x_ss = DVector::from_fn(n, |l, _| params.lakes[first + l].depth);
                SubsystemModel {
                    index: i,
                    name: name.clone(),
                    state_names: lakes.iter().map(|l| format!("h_{l}")).collect(),
                    output_names: lakes.iter().map(|l| format!("h_{l}")).collect(),
                    measured: n,
                    continuous: StateSpace { a, b, c: DMatrix::identity(n, n) },
                    discrete: None,
                    reduced: None,
                    y_ss: x_ss.clone(),
                    x_ss,
                    y_bounds: (0..n)
                        .map(|l| {
                            let p = &params.lakes[first + l];
                            (p.depth - p.level_band, p.depth + p.level_band)
                        })
                        .collect(),
                    storage: areas,
                }
            }
            SubsystemSpec::Reach { name, reach, .. } => {
                let r = reach_of[i].unwrap();
                let p = &params.reaches[r];
                let c = p.cells;
                let n = 2 * c + 1;
                let dz = p.length / c as f64;
                let kappa = g * p.width * p.depth / dz;
                let node_area: Vec<f64> = (0..=c)
                    .map(|j| if j == 0 || j == c { 0.5 } else { 1.0 } * p.width * dz)
                    .collect();
                // states: h_0..h_c, then q_1..q_c (q_l joins node l-1 to node l)
                let h = |j: usize| j;
                let q = |l: usize| c + l;
                let mut a = DMatrix::zeros(n, n);
                for l in 1..=c {
                    a[(h(l - 1), q(l))] -= 1.0 / node_area[l - 1];
                    a[(h(l), q(l))] += 1.0 / node_area[l];
                    a[(q(l), h(l - 1))] += kappa;
                    a[(q(l), h(l))] -= kappa;
                    a[(q(l), q(l))] -= p.friction;
                }
                let mut b = DMatrix::zeros(n, nf);
                for (f, flow) in topology.flows.iter().enumerate() {
                    for (e, sign) in [(flow.from, -1.0), (flow.to, 1.0)] {
                        match e {
                            Endpoint::ReachStart { subsystem } if subsystem == i => {
                                b[(h(0), f)] += sign / node_area[0];
                            }
                            Endpoint::ReachEnd { subsystem } if subsystem == i => {
                                b[(h(c), f)] += sign / node_area[c];
                            }
                            _ => {}
                        }
                    }
                }
                // steady link flows and levels, built from the dam upstream
                let mut link = vec![0.0; c + 1];
                let mut running: f64 = topology
                    .flows
                    .iter()
                    .enumerate()
                    .filter(|(_, fl)| fl.to == (Endpoint::ReachStart { subsystem: i }))
                    .map(|(f, _)| q_ss[f])
                    .sum();
                for l in 1..=c {
                    running += params
                        .inflows
                        .iter()
                        .filter(|inf| inf.reach == r && inf.node == l - 1)
                        .map(|inf| inf.flow)
                        .sum::<f64>();
                    link[l] = running;
                }
                let mut x_ss = DVector::zeros(n);
                x_ss[h(c)] = p.depth;
                for l in (1..=c).rev() {
                    x_ss[h(l - 1)] = x_ss[h(l)] + p.friction * link[l] / kappa;
                    x_ss[q(l)] = link[l];
                }
                let mut cm = DMatrix::zeros(2, n);
                cm[(0, h(c))] = 1.0;
                cm[(1, h(0))] = 1.0;
                let y_ss = DVector::from_vec(vec![x_ss[h(c)], x_ss[h(0)]]);
                let mut state_names: Vec<String> = (0..=c).map(|j| format!("h_{reach}_{j}")).collect();
                state_names.extend((1..=c).map(|l| format!("q_{reach}_{l}")));
                let mut storage = node_area.clone();
                storage.extend(std::iter::repeat_n(0.0, c));
                SubsystemModel {
                    index: i,
                    name: name.clone(),
                    state_names,
                    output_names: vec![format!("h_{reach}"), format!("h_{reach}_start")],
                    measured: 1,
                    continuous: StateSpace { a, b, c: cm },
                    discrete: None,
                    reduced: None,
                    x_ss,
                    y_ss,
                    y_bounds: vec![(p.depth - p.level_band, p.depth + p.level_band)],
                    storage,
                }
            }
        };
        subsystems.push(sub);
    }

    let inputs = topology
        .flows
        .iter()
        .enumerate()
        .map(|(f, spec)| InputChannel {
            name: spec.name.clone(),
            flow: f,
            sign: 1.0,
            owner: spec.owner,
            lower: params.flows[f].lower,
            upper: params.flows[f].upper,
            steady: q_ss[f],
        })
        .collect();
    for (f, spec) in topology.flows.iter().enumerate() {
        let p = &params.flows[f];
        if !(p.lower <= q_ss[f] && q_ss[f] <= p.upper) {
            return Err(Error::InvalidParameter(format!(
                "{}: steady flow {} lies outside its bounds",
                spec.name, q_ss[f]
            )));
        }
    }
    Ok(HpvModel {
        topology: topology.clone(),
        params: params.clone(),
        subsystems,
        inputs,
    })
}

/// Exact zero-order hold of `(A, B)` through the exponential of the
/// augmented matrix `[[A, B], [0, 0]]·T_s`.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = aug.exp();
    let mut ad = e.view((0, 0), (n, n)).into_owned();
    let mut bd = e.view((0, n), (n, m)).into_owned();
    // keep exact zeros where the continuous input has no path
    for j in 0..m {
        if b.column(j).iter().all(|v| *v == 0.0) {
            bd.column_mut(j).fill(0.0);
        }
    }
    if a.iter().all(|v| *v == 0.0) {
        ad = DMatrix::identity(n, n);
    }
    (ad, bd)
}

/// Discretizes every subsystem with sampling time `ts` seconds.
pub fn discretize_zoh(model: &HpvModel, ts: f64) -> Result<HpvModel> {
    if !(ts > 0.0) {
        return Err(Error::InvalidParameter("sampling time must be positive".into()));
    }
    let mut out = model.clone();
    for s in &mut out.subsystems {
        let (ad, bd) = zoh(&s.continuous.a, &s.continuous.b, ts);
        s.discrete = Some(StateSpace { a: ad, b: bd, c: s.continuous.c.clone() });
        s.reduced = None;
    }
    out.params.sampling_time = ts;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::topology::default_topology;
    use approx::assert_relative_eq;

    fn default_model() -> HpvModel {
        synthesize_linear_model(&default_topology(), &HpvParams::default()).unwrap()
    }

    #[test]
    fn default_dimensions() {
        let m = default_model();
        assert_eq!(m.total_states(), 249);
        assert_eq!(m.num_inputs(), 10);
        assert_eq!(m.num_measured(), 9);
    }

    #[test]
    fn some_input_blocks_are_zero() {
        let m = default_model();
        let zero_pairs = m
            .subsystems
            .iter()
            .flat_map(|s| (0..m.topology.num_subsystems()).map(move |j| (s, j)))
            .filter(|(s, j)| {
                m.owned_inputs(*j)
                    .iter()
                    .all(|&c| s.continuous.b.column(c).iter().all(|v| *v == 0.0))
            })
            .count();
        assert!(zero_pairs > 0);
    }

    #[test]
    fn steady_state_is_equilibrium_of_the_flows() {
        let m = default_model();
        let q: Vec<f64> = m.inputs.iter().map(|c| c.steady).collect();
        assert_eq!(&q[..6], &[80.0, 80.0, 100.0, 100.0, 100.0, 100.0]);
        assert!(q[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_and_integrator_zoh() {
        let a = DMatrix::from_element(1, 1, -0.3);
        let b = DMatrix::from_element(1, 1, 2.0);
        let (ad, bd) = zoh(&a, &b, 1.5);
        assert_relative_eq!(ad[(0, 0)], (-0.45f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(bd[(0, 0)], 2.0 * (1.0 - (-0.45f64).exp()) / 0.3, epsilon = 1e-13);
        let (ad, bd) = zoh(&DMatrix::zeros(2, 2), &DMatrix::from_row_slice(2, 1, &[1.0, -2.0]), 4.0);
        assert_eq!(ad, DMatrix::identity(2, 2));
        assert_relative_eq!(bd, DMatrix::from_row_slice(2, 1, &[4.0, -8.0]), epsilon = 1e-14);
    }

    #[test]
    fn zoh_keeps_input_pattern() {
        let m = discretize_zoh(&default_model(), 1800.0).unwrap();
        for s in &m.subsystems {
            let d = s.discrete.as_ref().unwrap();
            for j in 0..m.num_inputs() {
                let cont_zero = s.continuous.b.column(j).iter().all(|v| *v == 0.0);
                let disc_zero = d.b.column(j).iter().all(|v| *v == 0.0);
                assert_eq!(cont_zero, disc_zero);
            }
        }
    }
}
