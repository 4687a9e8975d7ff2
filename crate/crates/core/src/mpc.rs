//! Assembly of the power-tracking MPC problem in partitioned form.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bnb::{build_relaxed_cost, VirtualFlowPair};
use crate::error::{Error, Result};
use crate::model::{HpvTopology, Pipeline};
use crate::problem::PartitionedQP;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// One tracking term on the total power.
    GlobalRef,
    /// Each subsystem tracks a fixed share of the total.
    LocRefStat,
    /// Fixed shares adjusted by exchanges between neighbors.
    LocRefDyn,
    /// Fixed shares, no coupling information at all.
    Decentralized,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::GlobalRef,
        Scheme::LocRefDyn,
        Scheme::LocRefStat,
        Scheme::Decentralized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::GlobalRef => "global-ref",
            Scheme::LocRefStat => "loc-ref-stat",
            Scheme::LocRefDyn => "loc-ref-dyn",
            Scheme::Decentralized => "decentralized",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme '{s}'")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    /// State weight on reduced coordinates.
    pub q: f64,
    /// Input weight, per (m³/s)².
    pub r: f64,
    /// Weight on absolute power tracking error, per MW.
    pub gamma: f64,
    /// Weight on exchanged reference shifts, per MW².
    pub rho_delta: f64,
    /// Cross-penalty between turbine and pump parts of a duct.
    pub alpha: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            q: 1e-2,
            r: 1e-3,
            gamma: 10.0,
            rho_delta: 1e-4,
            alpha: 0.5,
        }
    }
}

/// Closed-loop experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcScenario {
    pub horizon: usize,
    pub sampling_time: f64,
    pub weights: Weights,
    pub scheme: Scheme,
    /// Total power reference per sample, MW; repeats periodically.
    pub reference: Vec<f64>,
    /// Tightening of the output boxes inside the controller, m.
    pub output_backoff: f64,
    pub steps: usize,
    pub seed: u64,
    /// Process noise bound as a fraction of `|x_ss|`.
    pub process_noise: f64,
    /// Measurement noise bound, m.
    pub measurement_noise: f64,
    /// Solver stopping tolerance on scaled residuals.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MpcScenario {
    fn default() -> Self {
        Self {
            horizon: 10,
            sampling_time: 1800.0,
            weights: Weights::default(),
            scheme: Scheme::LocRefDyn,
            reference: Vec::new(),
            output_backoff: 0.1,
            steps: 48,
            seed: 0,
            process_noise: 0.01,
            measurement_noise: 0.03,
            tolerance: 1e-3,
            max_iterations: 5000,
        }
    }
}

impl MpcScenario {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        let w = &self.weights;
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.sampling_time > 0.0) {
            return bad("sampling time must be positive");
        }
        if !(w.q >= 0.0 && w.r > 0.0 && w.gamma > 0.0 && w.rho_delta > 0.0) {
            return bad("weights need q >= 0 and r, gamma, rho_delta > 0");
        }
        if !(w.alpha > 0.0 && w.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.output_backoff >= 0.0 && self.process_noise >= 0.0 && self.measurement_noise >= 0.0) {
            return bad("backoff and noise bounds must be nonnegative");
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return bad("tolerance and iteration cap must be positive");
        }
        if self.reference.iter().any(|v| !v.is_finite()) {
            return bad("reference contains non-finite values");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `horizon` reference values starting at sample `t`, wrapping around.
    pub fn reference_window(&self, t: usize) -> Result<Vec<f64>> {
        if self.reference.is_empty() {
            return Err(Error::InvalidParameter("scenario has no reference".into()));
        }
        let n = self.reference.len();
        Ok((0..self.horizon).map(|k| self.reference[(t + k) % n]).collect())
    }
}

/// Daily profile with a night trough and a morning peak, spanning ±`swing`
/// around `steady`, sampled every `sampling_time` seconds.
pub fn default_reference(steady: f64, swing: f64, sampling_time: f64) -> Vec<f64> {
    const KNOTS: [(f64, f64); 9] = [
        (0.0, -0.5),
        (3.0, -1.0),
        (6.0, -0.6),
        (9.0, 0.6),
        (12.0, 1.0),
        (15.0, 0.5),
        (18.0, 0.9),
        (21.0, 0.2),
        (24.0, -0.5),
    ];
    let samples = (86_400.0 / sampling_time).round().max(1.0) as usize;
    (0..samples)
        .map(|s| {
            let h = s as f64 * sampling_time / 3600.0;
            let w = KNOTS.windows(2).find(|w| h >= w[0].0 && h <= w[1].0).unwrap_or(&KNOTS[7..9]);
            let t = (h - w[0].0) / (w[1].0 - w[0].0);
            let shape = w[0].1 + t * (w[1].1 - w[0].1);
            steady * (1.0 + swing * shape)
        })
        .collect()
}

/// Reads a `time, MW` table, header optional.
pub fn reference_from_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let Some(v) = rec.get(1) else {
            return Err(Error::InvalidParameter("reference rows need two columns".into()));
        };
        match v.parse::<f64>() {
            Ok(x) => out.push(x),
            Err(_) if out.is_empty() => continue,
            Err(_) => return Err(Error::InvalidParameter(format!("bad reference value '{v}'"))),
        }
    }
    Ok(out)
}

/// `p_i_ref(k) = p_ref(k) · s_i / Σ s`; the last subsystem absorbs rounding
/// so the shares add up exactly.
pub fn static_division(p_ref: &[f64], steady_powers: &[f64]) -> Result<Vec<Vec<f64>>> {
    let total: f64 = steady_powers.iter().sum();
    if total == 0.0 || !total.is_finite() || steady_powers.is_empty() {
        return Err(Error::InvalidParameter("total steady power is zero".into()));
    }
    let m = steady_powers.len();
    let mut out = vec![vec![0.0; p_ref.len()]; m];
    for (k, &p) in p_ref.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..m - 1 {
            out[i][k] = p * steady_powers[i] / total;
            acc += out[i][k];
        }
        out[m - 1][k] = p - acc;
    }
    Ok(out)
}

/// Who manages the reference exchange on each link: the lower index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeStructure {
    pub managed: Vec<Vec<usize>>,
    pub neighborhoods: Vec<BTreeSet<usize>>,
}

impl ExchangeStructure {
    /// Subsystems that manage a link to `i`.
    pub fn managers_of(&self, i: usize) -> Vec<usize> {
        (0..self.managed.len()).filter(|&j| self.managed[j].contains(&i)).collect()
    }
}

pub fn build_exchange_structure(topology: &HpvTopology) -> ExchangeStructure {
    exchange_from_neighborhoods(&topology.neighborhoods)
}

pub fn exchange_from_neighborhoods(neighborhoods: &[BTreeSet<usize>]) -> ExchangeStructure {
    ExchangeStructure {
        managed: neighborhoods
            .iter()
            .enumerate()
            .map(|(i, n)| n.iter().copied().filter(|&j| j > i).collect())
            .collect(),
        neighborhoods: neighborhoods.to_vec(),
    }
}

/// Local references after applying the exchanges `delta[(i, j)][k]`.
pub fn adjusted_references(
    structure: &ExchangeStructure,
    p_i_ref: &[Vec<f64>],
    delta: &BTreeMap<(usize, usize), Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = p_i_ref.to_vec();
    for (i, managed) in structure.managed.iter().enumerate() {
        for &j in managed {
            let d = delta
                .get(&(i, j))
                .ok_or_else(|| Error::InvalidParameter(format!("missing exchange for link ({i}, {j})")))?;
            for (k, &v) in d.iter().enumerate().take(out[i].len()) {
                out[i][k] += v;
                out[j][k] -= v;
            }
        }
    }
    Ok(out)
}

/// Largest deviation of the adjusted local references from the total.
pub fn reference_preservation_check(
    structure: &ExchangeStructure,
    p_i_ref: &[Vec<f64>],
    delta: &BTreeMap<(usize, usize), Vec<f64>>,
    p_ref: &[f64],
) -> Result<f64> {
    let adj = adjusted_references(structure, p_i_ref, delta)?;
    Ok(p_ref
        .iter()
        .enumerate()
        .map(|(k, &p)| (adj.iter().map(|r| r[k]).sum::<f64>() - p).abs())
        .fold(0.0, f64::max))
}

/// Location of every decision variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcLayout {
    pub horizon: usize,
    pub scheme: Scheme,
    pub states: Vec<usize>,
    /// Owned input channels per subsystem.
    pub inputs: Vec<Vec<usize>>,
    /// Managed exchange partners per subsystem.
    pub deltas: Vec<Vec<usize>>,
}

impl MpcLayout {
    pub fn stride(&self, i: usize) -> usize {
        self.states[i] + self.inputs[i].len() + self.deltas[i].len()
    }

    pub fn size(&self, i: usize) -> usize {
        self.horizon * self.stride(i)
    }

    pub fn state(&self, i: usize, k: usize) -> usize {
        k * self.stride(i)
    }

    pub fn input(&self, i: usize, k: usize, pos: usize) -> usize {
        k * self.stride(i) + self.states[i] + pos
    }

    pub fn delta(&self, i: usize, k: usize, pos: usize) -> usize {
        k * self.stride(i) + self.states[i] + self.inputs[i].len() + pos
    }

    /// Input deviations of every channel at step `k`.
    pub fn input_vector(&self, x: &[DVector<f64>], k: usize, channels: usize) -> DVector<f64> {
        let mut u = DVector::zeros(channels);
        for (i, own) in self.inputs.iter().enumerate() {
            for (pos, &c) in own.iter().enumerate() {
                u[c] = x[i][self.input(i, k, pos)];
            }
        }
        u
    }

    pub fn state_vector(&self, x: &[DVector<f64>], i: usize, k: usize) -> DVector<f64> {
        x[i].rows(self.state(i, k), self.states[i]).into_owned()
    }

    /// Exchanges `δ_ij(k)` by link.
    pub fn exchanges(&self, x: &[DVector<f64>]) -> BTreeMap<(usize, usize), Vec<f64>> {
        let mut out = BTreeMap::new();
        for (i, partners) in self.deltas.iter().enumerate() {
            for (pos, &j) in partners.iter().enumerate() {
                out.insert((i, j), (0..self.horizon).map(|k| x[i][self.delta(i, k, pos)]).collect());
            }
        }
        out
    }
}

/// A built MPC problem.
#[derive(Clone, Debug)]
pub struct MpcProblem {
    pub qp: PartitionedQP,
    pub pairs: Vec<VirtualFlowPair>,
    pub layout: MpcLayout,
    /// Local references before exchanges, per subsystem and step.
    pub local_references: Vec<Vec<f64>>,
    pub exchange: ExchangeStructure,
}

fn add_block(map: &mut BTreeMap<(usize, usize), DMatrix<f64>>, key: (usize, usize), rows: usize, cols: usize) -> &mut DMatrix<f64> {
    map.entry(key).or_insert_with(|| DMatrix::zeros(rows, cols))
}

/// Builds the sparse horizon problem in deviation variables.
///
/// Per subsystem and step the variables are the reduced state, the owned
/// input deviations and, for the exchange scheme, the managed reference
/// shifts. Dynamics become equality rows, boxes become inequality rows and
/// power tracking becomes one-norm rows.
pub fn build_qp(pipe: &Pipeline, scenario: &MpcScenario, x_hat: &[DVector<f64>], reference: &[f64]) -> Result<MpcProblem> {
    scenario.check()?;
    let model = &pipe.model;
    let m = model.subsystems.len();
    let n_h = scenario.horizon;
    if reference.len() != n_h {
        return Err(Error::Dimension(format!("reference has {} values, horizon is {n_h}", reference.len())));
    }
    if x_hat.len() != m {
        return Err(Error::Dimension("one state estimate per subsystem required".into()));
    }
    let w = &scenario.weights;
    let scheme = scenario.scheme;
    let exchange = build_exchange_structure(&model.topology);
    let states: Vec<usize> = model.subsystems.iter().map(|s| s.reduced.as_ref().map_or(0, |r| r.order())).collect();
    for (i, s) in model.subsystems.iter().enumerate() {
        s.reduced()?;
        if x_hat[i].len() != states[i] {
            return Err(Error::Dimension(format!("estimate for {} has wrong length", s.name)));
        }
    }
    let layout = MpcLayout {
        horizon: n_h,
        scheme,
        states: states.clone(),
        inputs: (0..m).map(|i| model.owned_inputs(i)).collect(),
        deltas: if scheme == Scheme::LocRefDyn { exchange.managed.clone() } else { vec![Vec::new(); m] },
    };
    for ch in &model.inputs {
        if ch.lower > ch.upper {
            return Err(Error::InvalidParameter(format!("{} has lower bound above upper bound", ch.name)));
        }
    }
    for s in &model.subsystems {
        for (o, &(lo, hi)) in s.y_bounds.iter().enumerate() {
            if lo + scenario.output_backoff > hi - scenario.output_backoff {
                return Err(Error::InvalidParameter(format!(
                    "{} output {o}: tightened bounds are empty",
                    s.name
                )));
            }
        }
    }

    // cost
    let mut pairs = Vec::new();
    let mut quad = Vec::with_capacity(m);
    for i in 0..m {
        let mut h = DMatrix::zeros(layout.size(i), layout.size(i));
        for k in 0..n_h {
            for s in 0..states[i] {
                let v = layout.state(i, k) + s;
                h[(v, v)] = 2.0 * w.q.max(1e-9);
            }
            for pos in 0..layout.inputs[i].len() {
                let v = layout.input(i, k, pos);
                h[(v, v)] = 2.0 * w.r;
            }
            for pos in 0..layout.deltas[i].len() {
                let v = layout.delta(i, k, pos);
                h[(v, v)] = 2.0 * w.rho_delta;
            }
            for d in pipe.ducts.iter().filter(|d| d.owner == i) {
                let pt = layout.inputs[i].iter().position(|&c| c == d.turbine).expect("owned turbine");
                let pp = layout.inputs[i].iter().position(|&c| c == d.pump).expect("owned pump");
                let (vt, vp) = (layout.input(i, k, pt), layout.input(i, k, pp));
                let blk = build_relaxed_cost(w.r, w.r, w.alpha)? * 2.0;
                h[(vt, vt)] = blk[(0, 0)];
                h[(vt, vp)] = blk[(0, 1)];
                h[(vp, vt)] = blk[(1, 0)];
                h[(vp, vp)] = blk[(1, 1)];
                pairs.push(VirtualFlowPair {
                    subsystem: i,
                    step: k,
                    turbine: vt,
                    pump: vp,
                    r_turbine: w.r,
                    r_pump: w.r,
                    alpha: w.alpha,
                });
            }
        }
        quad.push(h);
    }
    let lin = (0..m).map(|i| DVector::zeros(layout.size(i))).collect();
    let mut qp = PartitionedQP::new(quad, lin, w.gamma);

    let owner_pos = |c: usize| -> (usize, usize) {
        let o = model.inputs[c].owner;
        (o, layout.inputs[o].iter().position(|&x| x == c).expect("owned channel"))
    };

    for i in 0..m {
        let red = model.subsystems[i].reduced()?;
        let r = states[i];
        let size_i = layout.size(i);
        // initial condition and dynamics
        let rows = n_h * r;
        let mut rhs = DVector::zeros(rows);
        rhs.rows_mut(0, r).copy_from(&x_hat[i]);
        {
            let blk = add_block(&mut qp.eq_blocks, (i, i), rows, size_i);
            for s in 0..r {
                blk[(s, layout.state(i, 0) + s)] = 1.0;
            }
            for k in 0..n_h.saturating_sub(1) {
                let row0 = (k + 1) * r;
                for s in 0..r {
                    blk[(row0 + s, layout.state(i, k + 1) + s)] = 1.0;
                    for t in 0..r {
                        blk[(row0 + s, layout.state(i, k) + t)] = -red.system.a[(s, t)];
                    }
                }
            }
        }
        for c in 0..model.num_inputs() {
            if red.system.b.column(c).iter().all(|v| *v == 0.0) {
                continue;
            }
            let (j, pos) = owner_pos(c);
            let size_j = layout.size(j);
            let blk = add_block(&mut qp.eq_blocks, (i, j), rows, size_j);
            for k in 0..n_h.saturating_sub(1) {
                let row0 = (k + 1) * r;
                for s in 0..r {
                    blk[(row0 + s, layout.input(j, k, pos))] -= red.system.b[(s, c)];
                }
            }
        }
        if rows > 0 {
            qp.eq_rhs[i] = rhs;
        } else {
            qp.eq_blocks.remove(&(i, i));
        }

        // input and output boxes
        let sub = &model.subsystems[i];
        let nu = layout.inputs[i].len();
        let ny = sub.measured;
        let rows = n_h * 2 * nu + n_h.saturating_sub(1) * 2 * ny;
        if rows > 0 {
            let mut blk = DMatrix::zeros(rows, size_i);
            let mut d = DVector::zeros(rows);
            let mut row = 0;
            for k in 0..n_h {
                for (pos, &c) in layout.inputs[i].iter().enumerate() {
                    let ch = &model.inputs[c];
                    let v = layout.input(i, k, pos);
                    blk[(row, v)] = 1.0;
                    d[row] = ch.upper - ch.steady;
                    blk[(row + 1, v)] = -1.0;
                    d[row + 1] = ch.steady - ch.lower;
                    row += 2;
                }
            }
            for k in 1..n_h {
                for o in 0..ny {
                    let (lo, hi) = sub.y_bounds[o];
                    let y0 = sub.y_ss[o];
                    for s in 0..r {
                        let cv = red.system.c[(o, s)];
                        blk[(row, layout.state(i, k) + s)] = cv;
                        blk[(row + 1, layout.state(i, k) + s)] = -cv;
                    }
                    d[row] = hi - scenario.output_backoff - y0;
                    d[row + 1] = y0 - (lo + scenario.output_backoff);
                    row += 2;
                }
            }
            qp.ineq_blocks.insert((i, i), blk);
            qp.ineq_rhs[i] = d;
        }
    }

    // power tracking rows
    let steady = pipe.power.steady_powers();
    let power_terms = |owner: usize, i: usize, k: usize, row: usize, rows: usize, qp: &mut PartitionedQP| {
        let sp = &pipe.power.subsystems[i];
        for t in &sp.levels {
            let j = t.subsystem;
            let red = &model.subsystems[j].reduced.as_ref().expect("reduced").system;
            let size_j = layout.size(j);
            let blk = add_block(&mut qp.onenorm_blocks, (owner, j), rows, size_j);
            for s in 0..states[j] {
                blk[(row, layout.state(j, k) + s)] += t.coeff * red.c[(t.output, s)];
            }
        }
        for t in &sp.inputs {
            let (j, pos) = owner_pos(t.channel);
            let size_j = layout.size(j);
            let blk = add_block(&mut qp.onenorm_blocks, (owner, j), rows, size_j);
            blk[(row, layout.input(j, k, pos))] += t.coeff;
        }
    };
    let mut local_references = vec![vec![0.0; n_h]; m];
    match scheme {
        Scheme::GlobalRef => {
            let total_steady: f64 = steady.iter().sum();
            let mut count = vec![0usize; m];
            let owner_of = |k: usize| k % m;
            for k in 0..n_h {
                count[owner_of(k)] += 1;
            }
            let mut next = vec![0usize; m];
            for o in 0..m {
                if count[o] > 0 {
                    qp.onenorm_offset[o] = DVector::zeros(count[o]);
                }
            }
            for k in 0..n_h {
                let o = owner_of(k);
                let row = next[o];
                next[o] += 1;
                for i in 0..m {
                    power_terms(o, i, k, row, count[o], &mut qp);
                }
                qp.onenorm_offset[o][row] = reference[k] - total_steady;
            }
            for i in 0..m {
                let share = steady[i] / total_steady;
                for k in 0..n_h {
                    local_references[i][k] = reference[k] * share;
                }
            }
        }
        Scheme::LocRefStat | Scheme::LocRefDyn | Scheme::Decentralized => {
            let shares = static_division(reference, &steady)?;
            for i in 0..m {
                qp.onenorm_offset[i] = DVector::zeros(n_h);
                for k in 0..n_h {
                    power_terms(i, i, k, k, n_h, &mut qp);
                    qp.onenorm_offset[i][k] = shares[i][k] - steady[i];
                }
                local_references[i] = shares[i].clone();
            }
            if scheme == Scheme::LocRefDyn {
                for i in 0..m {
                    for (pos, &j) in layout.deltas[i].iter().enumerate() {
                        let size_i = layout.size(i);
                        for k in 0..n_h {
                            // p̂_i − δ_ij − ref_i and p̂_j + δ_ij − ref_j
                            add_block(&mut qp.onenorm_blocks, (i, i), n_h, size_i)[(k, layout.delta(i, k, pos))] -= 1.0;
                            add_block(&mut qp.onenorm_blocks, (j, i), n_h, size_i)[(k, layout.delta(i, k, pos))] += 1.0;
                        }
                    }
                }
            }
        }
    }
    qp.onenorm_blocks.retain(|_, b| b.iter().any(|v| *v != 0.0));
    qp.eq_blocks.retain(|&(i, j), b| i == j || b.iter().any(|v| *v != 0.0));

    if scheme == Scheme::Decentralized {
        for map in [&mut qp.eq_blocks, &mut qp.ineq_blocks, &mut qp.onenorm_blocks] {
            map.retain(|&(i, j), _| i == j);
        }
    }
    Ok(MpcProblem { qp, pairs, layout, local_references, exchange })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnb::two_phase_solve;
    use crate::model::default_pipeline;
    use crate::problem::{compute_neighborhoods, validate_problem, RowKind};
    use crate::solver::SolverOptions;
    use std::sync::OnceLock;

    fn pipe() -> &'static Pipeline {
        static P: OnceLock<Pipeline> = OnceLock::new();
        P.get_or_init(|| default_pipeline().unwrap())
    }

    fn zero_estimates(p: &Pipeline) -> Vec<DVector<f64>> {
        p.model.subsystems.iter().map(|s| DVector::zeros(s.reduced().unwrap().order())).collect()
    }

    fn scenario(scheme: Scheme, horizon: usize) -> MpcScenario {
        MpcScenario { scheme, horizon, ..MpcScenario::default() }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        let err = "central".parse::<Scheme>().unwrap_err().to_string();
        assert!(err.contains("unknown scheme"), "{err}");
    }

    #[test]
    fn static_division_examples() {
        let d = static_division(&[80.0], &[5.0; 8]).unwrap();
        assert!(d.iter().all(|r| r[0] == 10.0));
        let d = static_division(&[100.0, 40.0], &[10.0, 30.0]).unwrap();
        assert_eq!(d[0], vec![25.0, 10.0]);
        assert_eq!(d[1], vec![75.0, 30.0]);
        assert!(static_division(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn exchange_structure_of_default_topology() {
        let ex = build_exchange_structure(&pipe().model.topology);
        assert_eq!(ex.managed[0], vec![2, 3]);
        assert_eq!(ex.managed[6], vec![7]);
        assert!(ex.managed[7].is_empty());
        assert_eq!(ex.managers_of(7), vec![6]);
        assert_eq!(ex.managers_of(3), vec![0, 2]);
    }

    #[test]
    fn two_node_chain_preserves_reference() {
        let nb = vec![BTreeSet::from([1]), BTreeSet::from([0])];
        let ex = exchange_from_neighborhoods(&nb);
        assert_eq!(ex.managed, vec![vec![1], vec![]]);
        let refs = vec![vec![30.0, 30.0], vec![70.0, 70.0]];
        let total = [100.0, 100.0];
        let zero = BTreeMap::from([((0, 1), vec![0.0, 0.0])]);
        assert_eq!(reference_preservation_check(&ex, &refs, &zero, &total).unwrap(), 0.0);
        let five = BTreeMap::from([((0, 1), vec![5.0, -2.0])]);
        let adj = adjusted_references(&ex, &refs, &five).unwrap();
        assert_eq!(adj, vec![vec![35.0, 28.0], vec![65.0, 72.0]]);
        assert_eq!(reference_preservation_check(&ex, &refs, &five, &total).unwrap(), 0.0);
        assert!(adjusted_references(&ex, &refs, &BTreeMap::new()).is_err());
    }

    #[test]
    fn reference_profile_and_window() {
        let r = default_reference(100.0, 0.3, 1800.0);
        assert_eq!(r.len(), 48);
        let (lo, hi) = r.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((lo - 70.0).abs() < 1e-9 && (hi - 130.0).abs() < 1e-9);
        let sc = MpcScenario { reference: r.clone(), ..MpcScenario::default() };
        let w = sc.reference_window(45).unwrap();
        assert_eq!(w[3], r[0]);
    }

    #[test]
    fn reference_csv_with_header() {
        let text = "time, MW\n0, 90.5\n1800, 91\n";
        assert_eq!(reference_from_csv(text.as_bytes()).unwrap(), vec![90.5, 91.0]);
        assert!(reference_from_csv("0, 1\n1, x\n".as_bytes()).is_err());
    }

    #[test]
    fn scenario_rejects_bad_weights() {
        let mut sc = MpcScenario { reference: vec![1.0], ..MpcScenario::default() };
        sc.weights.alpha = 1.0;
        assert!(sc.check().is_err());
        sc.weights.alpha = 0.5;
        sc.weights.rho_delta = 0.0;
        assert!(sc.check().is_err());
    }

    #[test]
    fn every_scheme_builds_a_valid_problem() {
        let p = pipe();
        let steady = p.power.steady_total();
        let m = p.model.subsystems.len();
        let mut seen = BTreeMap::new();
        for scheme in Scheme::ALL {
            let prob = build_qp(p, &scenario(scheme, m), &zero_estimates(p), &vec![steady; m]).unwrap();
            assert!(validate_problem(&prob.qp).is_valid(), "{scheme}");
            let nb = compute_neighborhoods(&prob.qp);
            match scheme {
                Scheme::GlobalRef => assert!(nb.iter().all(|n| n.len() == m)),
                Scheme::LocRefDyn => {
                    let sizes: Vec<usize> = nb.iter().map(|n| n.len()).collect();
                    assert_eq!(sizes, vec![3, 3, 3, 4, 3, 4, 4, 2]);
                }
                Scheme::Decentralized => assert!(nb.iter().all(|n| n.len() == 1)),
                Scheme::LocRefStat => {}
            }
            seen.insert(scheme.name(), nb);
        }
        assert_eq!(seen[Scheme::LocRefStat.name()], seen[Scheme::LocRefDyn.name()]);
    }

    #[test]
    fn steady_state_is_the_optimum() {
        let p = pipe();
        let steady = p.power.steady_total();
        for scheme in [Scheme::GlobalRef, Scheme::LocRefDyn] {
            let prob = build_qp(p, &scenario(scheme, 1), &zero_estimates(p), &[steady]).unwrap();
            let out = two_phase_solve(&prob.qp, &prob.pairs, None, &SolverOptions::default(), 1e-6).unwrap();
            let worst = out.x.iter().map(|x| x.amax()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "{scheme}: {worst}");
        }
    }

    #[test]
    fn equality_rows_reproduce_reduced_dynamics() {
        let p = pipe();
        let n_h = 4;
        let x0: Vec<DVector<f64>> = zero_estimates(p)
            .iter()
            .enumerate()
            .map(|(i, x)| DVector::from_fn(x.len(), |s, _| 0.01 * (i + s) as f64))
            .collect();
        let prob = build_qp(p, &scenario(Scheme::LocRefStat, n_h), &x0, &[p.power.steady_total(); 4]).unwrap();
        let lay = &prob.layout;
        let nu = p.model.num_inputs();
        let u: Vec<DVector<f64>> = (0..n_h).map(|k| DVector::from_fn(nu, |c, _| ((c * 7 + k * 3) % 5) as f64 - 2.0)).collect();
        // independent forward simulation of the reduced models
        let mut x: Vec<DVector<f64>> = (0..p.model.subsystems.len()).map(|i| DVector::zeros(lay.size(i))).collect();
        for (i, s) in p.model.subsystems.iter().enumerate() {
            let sys = &s.reduced().unwrap().system;
            let mut xi = x0[i].clone();
            for k in 0..n_h {
                x[i].rows_mut(lay.state(i, k), xi.len()).copy_from(&xi);
                for (pos, &c) in lay.inputs[i].iter().enumerate() {
                    x[i][lay.input(i, k, pos)] = u[k][c];
                }
                xi = &sys.a * &xi + &sys.b * &u[k];
            }
        }
        let res = prob.qp.residual(RowKind::Eq, &x);
        let worst = res.iter().map(|r| r.amax()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
        assert_eq!(lay.input_vector(&x, 2, nu), u[2]);
    }
}
