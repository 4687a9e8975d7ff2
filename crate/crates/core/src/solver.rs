//! Distributed accelerated dual gradient method.
//!
//! Every subsystem is an [`AgentState`] that owns its slice of the problem
//! and talks to its neighbors only through a [`Network`]. One iteration is
//! four synchronous phases: local primal update, primal exchange, local
//! projected dual step, dual exchange. The termination test is a global
//! monitoring reduction and is not counted as neighbor traffic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{Cholesky, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, CsrBlock};
use crate::network::{Network, NetworkStats};
use crate::problem::{
    compute_neighborhoods, lipschitz_constant, validate_problem, DualPoint, PartitionedQP, RowKind,
    RowScaling,
};
use crate::serde_util;

/// Composite termination test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub eq_tol: f64,
    pub ineq_tol: f64,
    pub dual_change_tol: f64,
    pub window: usize,
    pub max_iterations: usize,
    /// Run exactly this many iterations and ignore the tolerances.
    pub fixed_iterations: Option<usize>,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            eq_tol: 1e-3,
            ineq_tol: 1e-3,
            dual_change_tol: 1e-6,
            window: 10,
            max_iterations: 5000,
            fixed_iterations: None,
        }
    }
}

impl StoppingRule {
    pub fn fixed(iterations: usize) -> Self {
        Self {
            fixed_iterations: Some(iterations),
            ..Self::default()
        }
    }

    pub fn cap(&self) -> usize {
        self.fixed_iterations.unwrap_or(self.max_iterations)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub stop: StoppingRule,
    /// Rescale equality and inequality rows to unit ∞-norm before iterating.
    pub scale_rows: bool,
    /// Precomputed Lipschitz constant of the (scaled, if enabled) problem.
    pub lipschitz: Option<f64>,
    /// Keep every iterate for equivalence checks.
    pub record_trajectory: bool,
    /// Run the agents of a round on the rayon pool.
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            stop: StoppingRule::default(),
            scale_rows: true,
            lipschitz: None,
            record_trajectory: false,
            parallel: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIterations,
    FixedIterations,
}

/// Iterates of one round, in the coordinates the solver runs in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    #[serde(with = "serde_util::vectors")]
    pub x: Vec<DVector<f64>>,
    pub dual: DualPoint,
}

/// Pins imposed by the two-phase complementarity handling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityCertificate {
    pub phases: usize,
    pub pinned: Vec<PinnedFlow>,
    pub max_product: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnedFlow {
    pub subsystem: usize,
    pub step: usize,
    pub variable: usize,
    pub pump: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    #[serde(with = "serde_util::vectors")]
    pub x: Vec<DVector<f64>>,
    #[serde(with = "serde_util::vectors")]
    pub x_aux: Vec<DVector<f64>>,
    pub dual: DualPoint,
    pub iterations: usize,
    pub termination: Termination,
    pub lipschitz: f64,
    pub dual_history: Vec<f64>,
    pub eq_residual_history: Vec<f64>,
    pub ineq_residual_history: Vec<f64>,
    /// Neighbor traffic of each primal or dual exchange round.
    pub messages_per_round: Vec<u64>,
    pub scalars_per_round: Vec<u64>,
    pub network: NetworkStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<ComplementarityCertificate>,
    #[serde(skip)]
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

impl SolveOutcome {
    pub fn stacked_x(&self) -> DVector<f64> {
        crate::linalg::stack(&self.x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per iteration: dual value, residuals and neighbor traffic.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "iteration",
            "dual_value",
            "eq_residual",
            "ineq_residual",
            "messages",
            "scalars",
        ])?;
        for k in 0..self.iterations {
            // two exchange rounds per iteration
            let msgs: u64 = self.messages_per_round.iter().skip(2 * k).take(2).sum();
            let scal: u64 = self.scalars_per_round.iter().skip(2 * k).take(2).sum();
            wr.write_record([
                k.to_string(),
                format!("{:e}", self.dual_history[k]),
                format!("{:e}", self.eq_residual_history[k]),
                format!("{:e}", self.ineq_residual_history[k]),
                msgs.to_string(),
                scal.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Extrapolation weight `(k − 1)/(k + 2)`.
pub fn acceleration_weight(k: usize) -> f64 {
    (k as f64 - 1.0) / (k as f64 + 2.0)
}

/// Blocks of one family that touch a given neighbor.
#[derive(Clone, Debug, Default)]
struct NeighborBlocks {
    blocks: [Option<CsrBlock>; 3],
}

fn kind_index(kind: RowKind) -> usize {
    match kind {
        RowKind::Eq => 0,
        RowKind::Ineq => 1,
        RowKind::OneNorm => 2,
    }
}

/// Everything subsystem `i` knows about the problem.
#[derive(Clone, Debug)]
pub struct LocalProblem {
    pub index: usize,
    pub neighbors: BTreeSet<usize>,
    chol: Cholesky<f64, Dyn>,
    /// Explicit `H_i⁻¹` when it is sparse enough to beat the triangular solves.
    inv: Option<CsrBlock>,
    quad: CsrBlock,
    lin: DVector<f64>,
    /// `B_ji` for `j ∈ N_i`, used in the primal update.
    incoming: BTreeMap<usize, NeighborBlocks>,
    /// `B_ij` for `j ∈ N_i`, used in the dual update.
    outgoing: BTreeMap<usize, NeighborBlocks>,
    rhs: [DVector<f64>; 3],
    gamma: f64,
    step: f64,
}

impl LocalProblem {
    pub fn new(qp: &PartitionedQP, i: usize, neighbors: BTreeSet<usize>, lipschitz: f64) -> Result<Self> {
        let chol = Cholesky::new(qp.quad_blocks[i].clone())
            .ok_or_else(|| Error::Singular(format!("H_{}", i + 1)))?;
        let mut incoming = BTreeMap::new();
        let mut outgoing = BTreeMap::new();
        for &j in &neighbors {
            let mut inc = NeighborBlocks::default();
            let mut out = NeighborBlocks::default();
            for kind in RowKind::ALL {
                let bl = qp.blocks(kind);
                inc.blocks[kind_index(kind)] = bl.get(&(j, i)).map(CsrBlock::from_dense);
                out.blocks[kind_index(kind)] = bl.get(&(i, j)).map(CsrBlock::from_dense);
            }
            incoming.insert(j, inc);
            outgoing.insert(j, out);
        }
        let n = qp.quad_blocks[i].nrows();
        let inv = CsrBlock::from_dense(&chol.inverse());
        let inv = (inv.nnz() * 4 <= n * n).then_some(inv);
        Ok(Self {
            index: i,
            neighbors,
            chol,
            inv,
            quad: CsrBlock::from_dense(&qp.quad_blocks[i]),
            lin: qp.lin_cost[i].clone(),
            incoming,
            outgoing,
            rhs: [
                qp.eq_rhs[i].clone(),
                qp.ineq_rhs[i].clone(),
                qp.onenorm_offset[i].clone(),
            ],
            gamma: qp.gamma,
            step: if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 },
        })
    }

    pub fn n(&self) -> usize {
        self.lin.len()
    }

    pub fn dual_len(&self) -> usize {
        self.rhs.iter().map(|r| r.len()).sum()
    }

    /// `−H_i⁻¹(g_i + Σ_j B_jiᵀ y_j)`, summed over neighbors in ascending
    /// order and kinds in `λ, μ, ν` order.
    fn primal_kernel<'a, F>(&self, mut duals_of: F) -> Result<DVector<f64>>
    where
        F: FnMut(usize) -> Option<[&'a [f64]; 3]>,
    {
        let mut w = self.lin.clone();
        for (&j, nb) in &self.incoming {
            let duals = duals_of(j).ok_or(Error::MissingNeighbor {
                agent: self.index,
                neighbor: j,
            })?;
            for (blk, y) in nb.blocks.iter().zip(duals) {
                if let Some(b) = blk {
                    b.tr_mul_acc(y, w.as_mut_slice());
                }
            }
        }
        let mut x = match &self.inv {
            Some(inv) => {
                let mut x = DVector::zeros(w.len());
                inv.mul_acc(w.as_slice(), x.as_mut_slice());
                x
            }
            None => self.chol.solve(&w),
        };
        x.neg_mut();
        Ok(x)
    }

    /// `Σ_j B_ij x̄_j − rhs_i` for each family.
    fn row_residuals<'a, F>(&self, mut xbar_of: F) -> Result<[DVector<f64>; 3]>
    where
        F: FnMut(usize) -> Option<&'a [f64]>,
    {
        let mut r = [
            DVector::zeros(self.rhs[0].len()),
            DVector::zeros(self.rhs[1].len()),
            DVector::zeros(self.rhs[2].len()),
        ];
        for (&j, nb) in &self.outgoing {
            if nb.blocks.iter().all(|b| b.is_none()) {
                continue;
            }
            let xj = xbar_of(j).ok_or(Error::MissingNeighbor {
                agent: self.index,
                neighbor: j,
            })?;
            for (blk, rk) in nb.blocks.iter().zip(r.iter_mut()) {
                if let Some(b) = blk {
                    b.mul_acc(xj, rk.as_mut_slice());
                }
            }
        }
        for (rk, rhs) in r.iter_mut().zip(&self.rhs) {
            *rk -= rhs;
        }
        Ok(r)
    }
}

/// One subsystem's iterates.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub local: LocalProblem,
    pub k: usize,
    pub x: DVector<f64>,
    pub x_prev: DVector<f64>,
    pub xbar: DVector<f64>,
    /// Current duals `[λ_i, μ_i, ν_i]`.
    pub dual: [DVector<f64>; 3],
    pub dual_prev: [DVector<f64>; 3],
    /// Residuals `Σ_j B_ij x̄_j − rhs_i` from the last dual update.
    pub residual: [DVector<f64>; 3],
    /// Residuals at `x^k`, recovered from the `x̄` residuals through the
    /// affine extrapolation (exact from `k = 1` on, where the weight is zero).
    pub residual_x: [DVector<f64>; 3],
}

impl AgentState {
    pub fn cold(local: LocalProblem) -> Self {
        let n = local.n();
        let dual = [
            DVector::zeros(local.rhs[0].len()),
            DVector::zeros(local.rhs[1].len()),
            DVector::zeros(local.rhs[2].len()),
        ];
        Self {
            k: 0,
            x: DVector::zeros(n),
            x_prev: DVector::zeros(n),
            xbar: DVector::zeros(n),
            residual: dual.clone(),
            residual_x: dual.clone(),
            dual_prev: dual.clone(),
            dual,
            local,
        }
    }

    /// Warm start: `x⁻¹` and `λ⁰ = λ⁻¹` from a previous solution; `k` restarts at 0.
    pub fn warm(local: LocalProblem, x: DVector<f64>, dual: [DVector<f64>; 3]) -> Result<Self> {
        let mut s = Self::cold(local);
        if x.len() != s.x.len() || dual.iter().zip(&s.dual).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Dimension(format!(
                "warm start does not match subsystem {}",
                s.local.index + 1
            )));
        }
        s.x_prev = x.clone();
        s.x = x;
        s.dual_prev = dual.clone();
        s.dual = dual;
        Ok(s)
    }

    pub fn index(&self) -> usize {
        self.local.index
    }

    /// Step 1: primal minimizer from neighbor duals and its extrapolation.
    pub fn local_primal_update(
        &mut self,
        neighbor_duals: &BTreeMap<usize, [DVector<f64>; 3]>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let i = self.index();
        let own = &self.dual;
        let x = self.local.primal_kernel(|j| {
            let d = if j == i { Some(own) } else { neighbor_duals.get(&j) };
            d.map(|d| [d[0].as_slice(), d[1].as_slice(), d[2].as_slice()])
        })?;
        self.commit_primal(x);
        Ok((self.x.clone(), self.xbar.clone()))
    }

    fn commit_primal(&mut self, x: DVector<f64>) {
        let w = acceleration_weight(self.k);
        let xbar = &x + (&x - &self.x_prev) * w;
        self.x = x;
        self.xbar = xbar;
    }

    /// Step 3: projected, extrapolated dual gradient step from neighbor
    /// extrapolated primals.
    pub fn local_dual_update(
        &mut self,
        neighbor_primals: &BTreeMap<usize, DVector<f64>>,
    ) -> Result<[DVector<f64>; 3]> {
        let i = self.index();
        let own = &self.xbar;
        let r = self.local.row_residuals(|j| {
            if j == i {
                Some(own.as_slice())
            } else {
                neighbor_primals.get(&j).map(|v| v.as_slice())
            }
        })?;
        self.commit_dual(r);
        Ok(self.dual.clone())
    }

    fn commit_dual(&mut self, r: [DVector<f64>; 3]) {
        let w = acceleration_weight(self.k);
        let step = self.local.step;
        let gamma = self.local.gamma;
        let mut next: [DVector<f64>; 3] = [
            DVector::zeros(0),
            DVector::zeros(0),
            DVector::zeros(0),
        ];
        for c in 0..3 {
            let mut v = &self.dual[c] + (&self.dual[c] - &self.dual_prev[c]) * w + &r[c] * step;
            match c {
                1 => v.apply(|e| *e = e.max(0.0)),
                2 => v.apply(|e| *e = e.max(-gamma).min(gamma)),
                _ => {}
            }
            next[c] = v;
        }
        self.dual_prev = std::mem::replace(&mut self.dual, next);
        self.x_prev = self.x.clone();
        if self.k == 0 {
            self.residual_x = r.clone();
        } else {
            for (rx, rb) in self.residual_x.iter_mut().zip(&r) {
                *rx = (rb + &*rx * w) / (1.0 + w);
            }
        }
        self.residual = r;
        self.k += 1;
    }

    /// This agent's share of the negative dual function at the current
    /// pre-update duals: `½x_iᵀH_ix_i + rhs_iᵀy_i`.
    fn dual_value_share(&self) -> f64 {
        let x = &self.x;
        let mut hx = DVector::zeros(x.len());
        self.local.quad.mul_acc(x.as_slice(), hx.as_mut_slice());
        let mut f = 0.5 * x.dot(&hx);
        for (rhs, d) in self.local.rhs.iter().zip(&self.dual) {
            f += rhs.dot(d);
        }
        f
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(self.xbar.iter()).all(|v| v.is_finite())
            && self.dual.iter().all(|d| d.iter().all(|v| v.is_finite()))
    }
}

/// Global quantities gathered once per iteration.
struct Monitor {
    history: Vec<f64>,
    eq: Vec<f64>,
    ineq: Vec<f64>,
}

impl Monitor {
    fn new() -> Self {
        Self {
            history: Vec::new(),
            eq: Vec::new(),
            ineq: Vec::new(),
        }
    }

    /// Records iteration `k` and reports whether the stopping rule fired.
    fn record(&mut self, f: f64, eq: f64, ineq: f64, rule: &StoppingRule, unconstrained: bool) -> bool {
        self.history.push(f);
        self.eq.push(eq);
        self.ineq.push(ineq);
        if rule.fixed_iterations.is_some() {
            return false;
        }
        if unconstrained {
            return true;
        }
        let k = self.history.len() - 1;
        if k < rule.window {
            return false;
        }
        let change = (f - self.history[k - rule.window]).abs();
        eq <= rule.eq_tol && ineq <= rule.ineq_tol && change < rule.dual_change_tol * f.abs().max(1.0)
    }
}

/// Prepared problem: optional row scaling, neighborhoods and step size.
struct Prepared {
    qp: PartitionedQP,
    scaling: Option<RowScaling>,
    neighborhoods: Vec<BTreeSet<usize>>,
    lipschitz: f64,
}

fn prepare(qp: &PartitionedQP, opts: &SolverOptions) -> Result<Prepared> {
    validate_problem(qp).into_result()?;
    let (work, scaling) = if opts.scale_rows {
        let (s, f) = qp.row_scaled();
        (s, Some(f))
    } else {
        (qp.clone(), None)
    };
    let lipschitz = match opts.lipschitz {
        Some(l) => l,
        None => lipschitz_constant(&work)?,
    };
    if !(lipschitz.is_finite() && lipschitz >= 0.0) {
        return Err(Error::InvalidParameter(format!("Lipschitz constant {lipschitz}")));
    }
    Ok(Prepared {
        neighborhoods: compute_neighborhoods(&work),
        qp: work,
        scaling,
        lipschitz,
    })
}

fn warm_parts(
    prep: &Prepared,
    warm: Option<&SolveOutcome>,
) -> Result<Option<(Vec<DVector<f64>>, DualPoint)>> {
    let Some(w) = warm else { return Ok(None) };
    if !w.dual.conforms_to(&prep.qp) || w.x.len() != prep.qp.num_subsystems() {
        return Err(Error::Dimension("warm start does not match problem".into()));
    }
    let dual = match &prep.scaling {
        Some(s) => s.scale_dual(&w.dual),
        None => w.dual.clone(),
    };
    Ok(Some((w.x.clone(), dual)))
}

fn build_agents(prep: &Prepared, warm: Option<(Vec<DVector<f64>>, DualPoint)>) -> Result<Vec<AgentState>> {
    let m = prep.qp.num_subsystems();
    (0..m)
        .map(|i| {
            let local = LocalProblem::new(&prep.qp, i, prep.neighborhoods[i].clone(), prep.lipschitz)?;
            match &warm {
                None => Ok(AgentState::cold(local)),
                Some((x, d)) => AgentState::warm(
                    local,
                    x[i].clone(),
                    [d.lambda[i].clone(), d.mu[i].clone(), d.nu[i].clone()],
                ),
            }
        })
        .collect()
}

fn dual_of_agents(agents: &[AgentState], pick_prev: bool) -> DualPoint {
    let get = |a: &AgentState, c: usize| {
        if pick_prev {
            a.dual_prev[c].clone()
        } else {
            a.dual[c].clone()
        }
    };
    DualPoint {
        lambda: agents.iter().map(|a| get(a, 0)).collect(),
        mu: agents.iter().map(|a| get(a, 1)).collect(),
        nu: agents.iter().map(|a| get(a, 2)).collect(),
    }
}

fn finish(
    original: &PartitionedQP,
    prep: &Prepared,
    x: Vec<DVector<f64>>,
    dual_scaled: DualPoint,
    monitor: Monitor,
    termination: Termination,
    net: Option<&Network>,
    trajectory: Option<Vec<TrajectoryPoint>>,
) -> SolveOutcome {
    let dual = match &prep.scaling {
        Some(s) => s.unscale_dual(&dual_scaled),
        None => dual_scaled,
    };
    let x_aux = original.residual(RowKind::OneNorm, &x);
    let (messages_per_round, scalars_per_round, network) = match net {
        Some(n) => (
            n.per_round().iter().map(|t| t.messages).collect(),
            n.per_round().iter().map(|t| t.scalars).collect(),
            n.stats(),
        ),
        None => (Vec::new(), Vec::new(), NetworkStats::default()),
    };
    SolveOutcome {
        iterations: monitor.history.len(),
        x,
        x_aux,
        dual,
        termination,
        lipschitz: prep.lipschitz,
        dual_history: monitor.history,
        eq_residual_history: monitor.eq,
        ineq_residual_history: monitor.ineq,
        messages_per_round,
        scalars_per_round,
        network,
        certificate: None,
        trajectory,
    }
}

fn residual_norms(res: &[[DVector<f64>; 3]]) -> (f64, f64) {
    let mut eq = 0.0f64;
    let mut ineq = 0.0f64;
    for r in res {
        eq = eq.max(inf_norm(r[0].as_slice()));
        ineq = ineq.max(r[1].iter().fold(0.0f64, |m, v| m.max(*v)));
    }
    (eq, ineq)
}

/// Runs the distributed method with explicit message passing.
pub fn run_rounds(qp: &PartitionedQP, warm: Option<&SolveOutcome>, opts: &SolverOptions) -> Result<SolveOutcome> {
    let prep = prepare(qp, opts)?;
    let warm = warm_parts(&prep, warm)?;
    let mut agents = build_agents(&prep, warm)?;
    let mut net = Network::new(prep.neighborhoods.clone());
    let m = agents.len();
    let unconstrained = prep.qp.total_dual() == 0;
    let cap = opts.stop.cap();
    let mut monitor = Monitor::new();
    let mut trajectory = opts.record_trajectory.then(Vec::new);
    // Initial neighbor duals are zero or were already exchanged at the end
    // of the previous solve, so no traffic is needed here.
    let mut dual_inbox: Vec<BTreeMap<usize, [DVector<f64>; 3]>> = (0..m)
        .map(|i| {
            prep.neighborhoods[i]
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (j, agents[j].dual.clone()))
                .collect()
        })
        .collect();
    let mut termination = Termination::MaxIterations;

    for k in 0..cap {
        // Step 1
        let primal_results: Vec<Result<()>> = map_agents(&mut agents, opts.parallel, |a| {
            let inbox = &dual_inbox[a.index()];
            a.local_primal_update(inbox).map(|_| ())
        });
        primal_results.into_iter().collect::<Result<Vec<_>>>()?;
        if let Some(t) = trajectory.as_mut() {
            t.push(TrajectoryPoint {
                x: agents.iter().map(|a| a.x.clone()).collect(),
                dual: dual_of_agents(&agents, false),
            });
        }
        // Step 2
        for a in &agents {
            for &j in &prep.neighborhoods[a.index()] {
                if j != a.index() {
                    net.send(a.index(), j, a.xbar.as_slice().to_vec())?;
                }
            }
        }
        let primal_inbox: Vec<BTreeMap<usize, DVector<f64>>> = net
            .deliver()
            .into_iter()
            .map(|ib| ib.into_iter().map(|(j, v)| (j, DVector::from_vec(v))).collect())
            .collect();
        // Monitoring reduction at the pre-update duals.
        let f: f64 = agents.iter().map(|a| a.dual_value_share()).sum();
        let x_k: Vec<DVector<f64>> = agents.iter().map(|a| a.x.clone()).collect();
        let dual_k = dual_of_agents(&agents, false);
        // Step 3
        let dual_results: Vec<Result<()>> = map_agents(&mut agents, opts.parallel, |a| {
            let inbox = &primal_inbox[a.index()];
            a.local_dual_update(inbox).map(|_| ())
        });
        dual_results.into_iter().collect::<Result<Vec<_>>>()?;
        if let Some(bad) = agents.iter().find(|a| !a.is_finite()) {
            return Err(Error::Diverged {
                iteration: k,
                detail: format!("non-finite iterate in subsystem {}", bad.index() + 1),
            });
        }
        let residuals: Vec<[DVector<f64>; 3]> = agents.iter().map(|a| a.residual_x.clone()).collect();
        let (eq, ineq) = residual_norms(&residuals);
        if !f.is_finite() {
            return Err(Error::Diverged {
                iteration: k,
                detail: "non-finite dual value".into(),
            });
        }
        let stop = monitor.record(f, eq, ineq, &opts.stop, unconstrained);
        if stop || k + 1 == cap {
            termination = if stop {
                Termination::Tolerance
            } else if opts.stop.fixed_iterations.is_some() {
                Termination::FixedIterations
            } else {
                Termination::MaxIterations
            };
            return Ok(finish(qp, &prep, x_k, dual_k, monitor, termination, Some(&net), trajectory));
        }
        // Step 4
        dual_inbox = exchange_duals(&agents, &mut net)?;
    }
    debug_assert!(m == 0 || cap == 0);
    let x: Vec<DVector<f64>> = agents.iter().map(|a| a.x.clone()).collect();
    let d = dual_of_agents(&agents, false);
    Ok(finish(qp, &prep, x, d, monitor, termination, Some(&net), trajectory))
}

fn map_agents<F>(agents: &mut [AgentState], parallel: bool, f: F) -> Vec<Result<()>>
where
    F: Fn(&mut AgentState) -> Result<()> + Sync + Send,
{
    if parallel {
        agents.par_iter_mut().map(|a| f(a)).collect()
    } else {
        agents.iter_mut().map(f).collect()
    }
}

fn exchange_duals(agents: &[AgentState], net: &mut Network) -> Result<Vec<BTreeMap<usize, [DVector<f64>; 3]>>> {
    for a in agents {
        let i = a.index();
        let payload: Vec<f64> = a.dual.iter().flat_map(|d| d.iter().copied()).collect();
        for &j in net.neighbors(i).clone().iter() {
            if j != i {
                net.send(i, j, payload.clone())?;
            }
        }
    }
    let sizes: Vec<[usize; 3]> = agents
        .iter()
        .map(|a| [a.dual[0].len(), a.dual[1].len(), a.dual[2].len()])
        .collect();
    Ok(net
        .deliver()
        .into_iter()
        .map(|ib| {
            ib.into_iter()
                .map(|(j, v)| {
                    let [q, r, _] = sizes[j];
                    (
                        j,
                        [
                            DVector::from_column_slice(&v[..q]),
                            DVector::from_column_slice(&v[q..q + r]),
                            DVector::from_column_slice(&v[q + r..]),
                        ],
                    )
                })
                .collect()
        })
        .collect())
}

/// The same iteration executed with all data in one place and no message
/// passing. Shares the arithmetic kernels with [`run_rounds`].
pub fn centralized_reference_run(
    qp: &PartitionedQP,
    warm: Option<&SolveOutcome>,
    opts: &SolverOptions,
) -> Result<SolveOutcome> {
    let prep = prepare(qp, opts)?;
    let warm = warm_parts(&prep, warm)?;
    let mut agents = build_agents(&prep, warm)?;
    let unconstrained = prep.qp.total_dual() == 0;
    let cap = opts.stop.cap();
    let mut monitor = Monitor::new();
    let mut trajectory = opts.record_trajectory.then(Vec::new);
    let m = agents.len();

    for k in 0..cap {
        let duals: Vec<[DVector<f64>; 3]> = agents.iter().map(|a| a.dual.clone()).collect();
        for a in agents.iter_mut() {
            let x = a
                .local
                .primal_kernel(|j| duals.get(j).map(|d| [d[0].as_slice(), d[1].as_slice(), d[2].as_slice()]))?;
            a.commit_primal(x);
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(TrajectoryPoint {
                x: agents.iter().map(|a| a.x.clone()).collect(),
                dual: dual_of_agents(&agents, false),
            });
        }
        let xbar: Vec<DVector<f64>> = agents.iter().map(|a| a.xbar.clone()).collect();
        let f: f64 = agents.iter().map(|a| a.dual_value_share()).sum();
        let x_k: Vec<DVector<f64>> = agents.iter().map(|a| a.x.clone()).collect();
        let dual_k = dual_of_agents(&agents, false);
        for a in agents.iter_mut() {
            let r = a.local.row_residuals(|j| xbar.get(j).map(|v| v.as_slice()))?;
            a.commit_dual(r);
        }
        if agents.iter().any(|a| !a.is_finite()) || !f.is_finite() {
            return Err(Error::Diverged {
                iteration: k,
                detail: "non-finite iterate".into(),
            });
        }
        let residuals: Vec<[DVector<f64>; 3]> = agents.iter().map(|a| a.residual_x.clone()).collect();
        let (eq, ineq) = residual_norms(&residuals);
        let stop = monitor.record(f, eq, ineq, &opts.stop, unconstrained);
        if stop || k + 1 == cap {
            let termination = if stop {
                Termination::Tolerance
            } else if opts.stop.fixed_iterations.is_some() {
                Termination::FixedIterations
            } else {
                Termination::MaxIterations
            };
            return Ok(finish(qp, &prep, x_k, dual_k, monitor, termination, None, trajectory));
        }
    }
    debug_assert!(m == 0 || cap == 0);
    let x: Vec<DVector<f64>> = agents.iter().map(|a| a.x.clone()).collect();
    let d = dual_of_agents(&agents, false);
    Ok(finish(qp, &prep, x, d, monitor, Termination::MaxIterations, None, trajectory))
}
