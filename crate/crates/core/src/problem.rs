//! Partitioned strongly convex QP with a 1-norm penalty:
//!
//! ```text
//! minimize    ½ xᵀH x + gᵀx + γ‖x_a‖₁
//! subject to  A x = b,   C x ≤ d,   x_a = P x − p
//! ```
//!
//! `x` is split into `M` subsystem blocks, `H` is block diagonal and
//! `A`, `C`, `P` are stored as maps from `(row subsystem, column subsystem)`
//! to dense blocks. Everything the distributed solver needs to reason about
//! the centralized problem (neighborhoods, the dual Lipschitz constant, the
//! negative dual function and a KKT oracle) lives here.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, inf_norm};
use crate::serde_util::{self, matrix_from_rows, matrix_to_rows};

pub type BlockMap = BTreeMap<(usize, usize), DMatrix<f64>>;

/// Which of the three constraint families a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowKind {
    Eq,
    Ineq,
    OneNorm,
}

impl RowKind {
    pub const ALL: [RowKind; 3] = [RowKind::Eq, RowKind::Ineq, RowKind::OneNorm];

    fn letter(self) -> char {
        match self {
            RowKind::Eq => 'A',
            RowKind::Ineq => 'C',
            RowKind::OneNorm => 'P',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "QpDocument", try_from = "QpDocument")]
pub struct PartitionedQP {
    pub partition: Vec<usize>,
    pub quad_blocks: Vec<DMatrix<f64>>,
    pub lin_cost: Vec<DVector<f64>>,
    pub eq_blocks: BlockMap,
    pub eq_rhs: Vec<DVector<f64>>,
    pub ineq_blocks: BlockMap,
    pub ineq_rhs: Vec<DVector<f64>>,
    pub onenorm_blocks: BlockMap,
    pub onenorm_offset: Vec<DVector<f64>>,
    pub gamma: f64,
}

impl PartitionedQP {
    /// An unconstrained problem with the given cost blocks.
    pub fn new(quad_blocks: Vec<DMatrix<f64>>, lin_cost: Vec<DVector<f64>>, gamma: f64) -> Self {
        let partition: Vec<usize> = quad_blocks.iter().map(|h| h.nrows()).collect();
        let m = partition.len();
        Self {
            partition,
            quad_blocks,
            lin_cost,
            eq_blocks: BlockMap::new(),
            eq_rhs: vec![DVector::zeros(0); m],
            ineq_blocks: BlockMap::new(),
            ineq_rhs: vec![DVector::zeros(0); m],
            onenorm_blocks: BlockMap::new(),
            onenorm_offset: vec![DVector::zeros(0); m],
            gamma,
        }
    }

    pub fn num_subsystems(&self) -> usize {
        self.partition.len()
    }

    pub fn blocks(&self, kind: RowKind) -> &BlockMap {
        match kind {
            RowKind::Eq => &self.eq_blocks,
            RowKind::Ineq => &self.ineq_blocks,
            RowKind::OneNorm => &self.onenorm_blocks,
        }
    }

    pub fn blocks_mut(&mut self, kind: RowKind) -> &mut BlockMap {
        match kind {
            RowKind::Eq => &mut self.eq_blocks,
            RowKind::Ineq => &mut self.ineq_blocks,
            RowKind::OneNorm => &mut self.onenorm_blocks,
        }
    }

    pub fn rhs(&self, kind: RowKind) -> &[DVector<f64>] {
        match kind {
            RowKind::Eq => &self.eq_rhs,
            RowKind::Ineq => &self.ineq_rhs,
            RowKind::OneNorm => &self.onenorm_offset,
        }
    }

    pub fn rhs_mut(&mut self, kind: RowKind) -> &mut Vec<DVector<f64>> {
        match kind {
            RowKind::Eq => &mut self.eq_rhs,
            RowKind::Ineq => &mut self.ineq_rhs,
            RowKind::OneNorm => &mut self.onenorm_offset,
        }
    }

    /// Number of rows of `kind` owned by subsystem `i`.
    pub fn rows(&self, kind: RowKind, i: usize) -> usize {
        self.rhs(kind)[i].len()
    }

    pub fn total_primal(&self) -> usize {
        self.partition.iter().sum()
    }

    pub fn total_rows(&self, kind: RowKind) -> usize {
        self.rhs(kind).iter().map(|v| v.len()).sum()
    }

    pub fn total_dual(&self) -> usize {
        RowKind::ALL.iter().map(|&k| self.total_rows(k)).sum()
    }

    /// Cholesky factors of every `H_i`.
    pub fn factor_cost(&self) -> Result<Vec<Cholesky<f64, Dyn>>> {
        self.quad_blocks
            .iter()
            .enumerate()
            .map(|(i, h)| {
                Cholesky::new(h.clone()).ok_or_else(|| Error::Singular(format!("H_{}", i + 1)))
            })
            .collect()
    }

    /// `out_i = Σ_j B_ij x_j` for the block family `kind`.
    pub fn mul_rows(&self, kind: RowKind, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = (0..self.num_subsystems())
            .map(|i| DVector::zeros(self.rows(kind, i)))
            .collect();
        for (&(i, j), blk) in self.blocks(kind) {
            out[i] += blk * &x[j];
        }
        out
    }

    /// `out_j = Σ_i B_ijᵀ v_i` for the block family `kind`.
    pub fn mul_cols_t(&self, kind: RowKind, v: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.partition.iter().map(|&n| DVector::zeros(n)).collect();
        for (&(i, j), blk) in self.blocks(kind) {
            out[j] += blk.tr_mul(&v[i]);
        }
        out
    }

    /// Per-subsystem `B x − rhs` for the block family `kind`.
    pub fn residual(&self, kind: RowKind, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut r = self.mul_rows(kind, x);
        for (ri, rhs) in r.iter_mut().zip(self.rhs(kind)) {
            *ri -= rhs;
        }
        r
    }

    /// Dense stacked constraint matrix `[A; C; P]` (kind-major row order).
    pub fn stacked_constraints(&self) -> DMatrix<f64> {
        let col_off = offsets(&self.partition);
        let mut g = DMatrix::zeros(self.total_dual(), self.total_primal());
        let mut row_base = 0;
        for kind in RowKind::ALL {
            let sizes: Vec<usize> = self.rhs(kind).iter().map(|v| v.len()).collect();
            let row_off = offsets(&sizes);
            for (&(i, j), blk) in self.blocks(kind) {
                g.view_mut((row_base + row_off[i], col_off[j]), (blk.nrows(), blk.ncols()))
                    .copy_from(blk);
            }
            row_base += self.total_rows(kind);
        }
        g
    }

    /// Dense block-diagonal `H`.
    pub fn dense_cost(&self) -> DMatrix<f64> {
        let n = self.total_primal();
        let off = offsets(&self.partition);
        let mut h = DMatrix::zeros(n, n);
        for (i, blk) in self.quad_blocks.iter().enumerate() {
            h.view_mut((off[i], off[i]), (blk.nrows(), blk.ncols())).copy_from(blk);
        }
        h
    }

    /// Objective `½xᵀHx + gᵀx + γ‖Px − p‖₁` at a primal point.
    pub fn primal_objective(&self, x: &[DVector<f64>]) -> f64 {
        let mut obj = 0.0;
        for (i, xi) in x.iter().enumerate() {
            obj += 0.5 * xi.dot(&(&self.quad_blocks[i] * xi)) + self.lin_cost[i].dot(xi);
        }
        let aux = self.residual(RowKind::OneNorm, x);
        obj + self.gamma * aux.iter().map(|v| v.lp_norm(1)).sum::<f64>()
    }

    /// Diagonally rescales every equality and inequality row to unit
    /// ∞-norm. One-norm rows are left alone because rescaling them would
    /// change the penalty weight of that row.
    pub fn row_scaled(&self) -> (PartitionedQP, RowScaling) {
        let mut scaled = self.clone();
        let mut scaling = RowScaling {
            eq: Vec::new(),
            ineq: Vec::new(),
        };
        for kind in [RowKind::Eq, RowKind::Ineq] {
            let mut factors: Vec<DVector<f64>> = (0..self.num_subsystems())
                .map(|i| DVector::zeros(self.rows(kind, i)))
                .collect();
            for (&(i, _), blk) in self.blocks(kind) {
                for r in 0..blk.nrows() {
                    let m = blk.row(r).amax();
                    if m > factors[i][r] {
                        factors[i][r] = m;
                    }
                }
            }
            for f in factors.iter_mut() {
                for v in f.iter_mut() {
                    *v = if *v > 0.0 { 1.0 / *v } else { 1.0 };
                }
            }
            for (&(i, _), blk) in scaled.blocks_mut(kind).iter_mut() {
                for r in 0..blk.nrows() {
                    blk.row_mut(r).scale_mut(factors[i][r]);
                }
            }
            for (i, rhs) in scaled.rhs_mut(kind).iter_mut().enumerate() {
                rhs.component_mul_assign(&factors[i]);
            }
            match kind {
                RowKind::Eq => scaling.eq = factors,
                _ => scaling.ineq = factors,
            }
        }
        (scaled, scaling)
    }
}

/// Row multipliers applied by [`PartitionedQP::row_scaled`].
#[derive(Clone, Debug, PartialEq)]
pub struct RowScaling {
    pub eq: Vec<DVector<f64>>,
    pub ineq: Vec<DVector<f64>>,
}

impl RowScaling {
    /// Maps duals of the scaled problem back to the original rows.
    pub fn unscale_dual(&self, dp: &DualPoint) -> DualPoint {
        DualPoint {
            lambda: dp.lambda.iter().zip(&self.eq).map(|(l, s)| l.component_mul(s)).collect(),
            mu: dp.mu.iter().zip(&self.ineq).map(|(m, s)| m.component_mul(s)).collect(),
            nu: dp.nu.clone(),
        }
    }

    /// Maps duals of the original rows onto the scaled problem.
    pub fn scale_dual(&self, dp: &DualPoint) -> DualPoint {
        DualPoint {
            lambda: dp.lambda.iter().zip(&self.eq).map(|(l, s)| l.component_div(s)).collect(),
            mu: dp.mu.iter().zip(&self.ineq).map(|(m, s)| m.component_div(s)).collect(),
            nu: dp.nu.clone(),
        }
    }
}

pub(crate) fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in sizes {
        off.push(acc);
        acc += s;
    }
    off
}

/// Dual variables `(λ, μ, ν)`, one vector of each kind per subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    #[serde(with = "serde_util::vectors")]
    pub lambda: Vec<DVector<f64>>,
    #[serde(with = "serde_util::vectors")]
    pub mu: Vec<DVector<f64>>,
    #[serde(with = "serde_util::vectors")]
    pub nu: Vec<DVector<f64>>,
}

impl DualPoint {
    pub fn zeros(qp: &PartitionedQP) -> Self {
        let mk = |kind| {
            (0..qp.num_subsystems())
                .map(|i| DVector::zeros(qp.rows(kind, i)))
                .collect()
        };
        Self {
            lambda: mk(RowKind::Eq),
            mu: mk(RowKind::Ineq),
            nu: mk(RowKind::OneNorm),
        }
    }

    pub fn of_kind(&self, kind: RowKind) -> &[DVector<f64>] {
        match kind {
            RowKind::Eq => &self.lambda,
            RowKind::Ineq => &self.mu,
            RowKind::OneNorm => &self.nu,
        }
    }

    pub fn conforms_to(&self, qp: &PartitionedQP) -> bool {
        RowKind::ALL.iter().all(|&k| {
            let v = self.of_kind(k);
            v.len() == qp.num_subsystems()
                && v.iter().enumerate().all(|(i, vi)| vi.len() == qp.rows(k, i))
        })
    }

    /// True when `μ ≥ 0` and `|ν| ≤ γ` elementwise.
    pub fn within_bounds(&self, gamma: f64) -> bool {
        self.mu.iter().all(|m| m.iter().all(|&v| v >= 0.0))
            && self.nu.iter().all(|n| n.iter().all(|&v| v.abs() <= gamma))
    }

    /// Kind-major stacking `[λ; μ; ν]`, matching [`PartitionedQP::stacked_constraints`].
    pub fn stacked(&self) -> DVector<f64> {
        let mut parts = Vec::new();
        for kind in RowKind::ALL {
            parts.extend(self.of_kind(kind).iter().cloned());
        }
        linalg::stack(&parts)
    }
}

/// Structural problems found by [`validate_problem`]; empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidProblem(self.violations.join("; ")))
        }
    }
}

fn block_name(letter: char, i: usize, j: usize) -> String {
    if i < 9 && j < 9 {
        format!("{}_{}{}", letter, i + 1, j + 1)
    } else {
        format!("{}_{{{},{}}}", letter, i + 1, j + 1)
    }
}

/// Checks every structural assumption of the problem class.
pub fn validate_problem(qp: &PartitionedQP) -> ValidationReport {
    let mut v = Vec::new();
    let m = qp.num_subsystems();
    if m == 0 {
        v.push("problem has no subsystems".to_string());
    }
    if !(qp.gamma > 0.0 && qp.gamma.is_finite()) {
        v.push(format!("gamma must be positive and finite, got {}", qp.gamma));
    }
    if qp.quad_blocks.len() != m || qp.lin_cost.len() != m {
        v.push(format!(
            "expected {} cost blocks, got {} quadratic and {} linear",
            m,
            qp.quad_blocks.len(),
            qp.lin_cost.len()
        ));
        return ValidationReport { violations: v };
    }
    for kind in RowKind::ALL {
        if qp.rhs(kind).len() != m {
            v.push(format!(
                "{} right-hand side has {} parts, expected {}",
                kind.letter(),
                qp.rhs(kind).len(),
                m
            ));
            return ValidationReport { violations: v };
        }
    }
    for i in 0..m {
        let n = qp.partition[i];
        if n == 0 {
            v.push(format!("subsystem {} has no variables", i + 1));
        }
        let h = &qp.quad_blocks[i];
        if h.nrows() != n || h.ncols() != n {
            v.push(format!("H_{} is {}x{}, expected {}x{}", i + 1, h.nrows(), h.ncols(), n, n));
        } else if !h.iter().all(|x| x.is_finite()) {
            v.push(format!("H_{} has non-finite entries", i + 1));
        } else if !linalg::is_symmetric(h, 1e-12) {
            v.push(format!("H_{} not symmetric", i + 1));
        } else if n > 0 && linalg::sym_min_eigenvalue(h) <= 0.0 {
            v.push(format!("H_{} not positive definite", i + 1));
        }
        if qp.lin_cost[i].len() != n {
            v.push(format!("g_{} has length {}, expected {}", i + 1, qp.lin_cost[i].len(), n));
        }
    }
    for kind in RowKind::ALL {
        let letter = kind.letter();
        for (&(i, j), blk) in qp.blocks(kind) {
            if i >= m || j >= m {
                v.push(format!("block {} out of range", block_name(letter, i, j)));
                continue;
            }
            let rows = qp.rows(kind, i);
            if blk.nrows() != rows || blk.ncols() != qp.partition[j] {
                v.push(format!(
                    "{} is {}x{}, expected {}x{}",
                    block_name(letter, i, j),
                    blk.nrows(),
                    blk.ncols(),
                    rows,
                    qp.partition[j]
                ));
            }
            if !blk.iter().all(|x| x.is_finite()) {
                v.push(format!("{} has non-finite entries", block_name(letter, i, j)));
            }
        }
        for i in 0..m {
            if !qp.rhs(kind)[i].iter().all(|x| x.is_finite()) {
                v.push(format!("right-hand side of {} rows of subsystem {} is not finite", letter, i + 1));
            }
            if qp.rows(kind, i) == 0 {
                continue;
            }
            match qp.blocks(kind).get(&(i, i)) {
                None => v.push(format!("diagonal block {} missing", block_name(letter, i, i))),
                Some(b) if b.iter().all(|&x| x == 0.0) => {
                    v.push(format!("diagonal block {} is zero", block_name(letter, i, i)))
                }
                _ => {}
            }
        }
    }
    ValidationReport { violations: v }
}

/// Neighborhood sets: `j ∈ N_i` iff any of `A_ij, A_ji, C_ij, C_ji, P_ij,
/// P_ji` is nonzero. Every subsystem is its own neighbor.
pub fn compute_neighborhoods(qp: &PartitionedQP) -> Vec<BTreeSet<usize>> {
    let m = qp.num_subsystems();
    let mut nb: Vec<BTreeSet<usize>> = (0..m).map(|i| BTreeSet::from([i])).collect();
    for kind in RowKind::ALL {
        for (&(i, j), blk) in qp.blocks(kind) {
            if i < m && j < m && blk.iter().any(|&x| x != 0.0) {
                nb[i].insert(j);
                nb[j].insert(i);
            }
        }
    }
    nb
}

/// Dual-space dimension up to which the Lipschitz constant comes from a
/// dense symmetric eigen-solve instead of power iteration.
pub const DENSE_LIPSCHITZ_LIMIT: usize = 2000;

/// `L = ‖G H⁻¹ Gᵀ‖₂` with `G = [A; C; P]`.
pub fn lipschitz_constant(qp: &PartitionedQP) -> Result<f64> {
    let chol = qp.factor_cost()?;
    let dim = qp.total_dual();
    if dim == 0 {
        return Ok(0.0);
    }
    let n = qp.total_primal();
    if dim.min(n) <= DENSE_LIPSCHITZ_LIMIT {
        // B = G·blkdiag(L_i⁻ᵀ) with H_i = L_i L_iᵀ; ‖G H⁻¹ Gᵀ‖ = λmax of the
        // smaller of B Bᵀ and Bᵀ B.
        let g = qp.stacked_constraints();
        let off = offsets(&qp.partition);
        let mut bt = g.transpose();
        for (i, c) in chol.iter().enumerate() {
            let rows = bt.rows(off[i], qp.partition[i]).into_owned();
            let solved = c
                .l_dirty()
                .solve_lower_triangular(&rows)
                .ok_or_else(|| Error::Singular(format!("H_{}", i + 1)))?;
            bt.rows_mut(off[i], qp.partition[i]).copy_from(&solved);
        }
        let m = if dim <= n { bt.tr_mul(&bt) } else { &bt * bt.transpose() };
        return Ok(linalg::sym_max_eigenvalue(&m));
    }
    Ok(power_iteration(qp, &chol, 1e-10, 200_000))
}

fn apply_dual_operator(qp: &PartitionedQP, chol: &[Cholesky<f64, Dyn>], v: &DualPoint) -> DualPoint {
    let mut w: Vec<DVector<f64>> = qp.partition.iter().map(|&n| DVector::zeros(n)).collect();
    for kind in RowKind::ALL {
        for (wj, t) in w.iter_mut().zip(qp.mul_cols_t(kind, v.of_kind(kind))) {
            *wj += t;
        }
    }
    let y: Vec<DVector<f64>> = w.iter().zip(chol).map(|(wi, c)| c.solve(wi)).collect();
    DualPoint {
        lambda: qp.mul_rows(RowKind::Eq, &y),
        mu: qp.mul_rows(RowKind::Ineq, &y),
        nu: qp.mul_rows(RowKind::OneNorm, &y),
    }
}

fn power_iteration(qp: &PartitionedQP, chol: &[Cholesky<f64, Dyn>], rel_tol: f64, max_iter: usize) -> f64 {
    let dim = qp.total_dual() as f64;
    let start = 1.0 / dim.sqrt();
    let mut v = DualPoint::zeros(qp);
    for kind in [&mut v.lambda, &mut v.mu, &mut v.nu] {
        for part in kind.iter_mut() {
            part.fill(start);
        }
    }
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let mv = apply_dual_operator(qp, chol, &v);
        let s = mv.stacked();
        // Rayleigh quotient with a unit-norm iterate.
        let rq = v.stacked().dot(&s);
        let norm = s.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (rq - estimate).abs() <= rel_tol * rq.abs();
        estimate = rq;
        v = DualPoint {
            lambda: mv.lambda.iter().map(|x| x / norm).collect(),
            mu: mv.mu.iter().map(|x| x / norm).collect(),
            nu: mv.nu.iter().map(|x| x / norm).collect(),
        };
        if done {
            break;
        }
    }
    estimate
}

/// `Aᵀλ + Cᵀμ + Pᵀν + g`, per subsystem.
pub fn dual_linear_stack(qp: &PartitionedQP, dp: &DualPoint) -> Result<Vec<DVector<f64>>> {
    if !dp.conforms_to(qp) {
        return Err(Error::Dimension("dual point does not match problem rows".into()));
    }
    let mut w = qp.lin_cost.clone();
    for kind in RowKind::ALL {
        for (wj, t) in w.iter_mut().zip(qp.mul_cols_t(kind, dp.of_kind(kind))) {
            *wj += t;
        }
    }
    Ok(w)
}

/// Negative dual function
/// `f = ½ wᵀH⁻¹w + bᵀλ + dᵀμ + pᵀν` with `w = g + Aᵀλ + Cᵀμ + Pᵀν`.
pub fn dual_value(qp: &PartitionedQP, dp: &DualPoint) -> Result<f64> {
    let w = dual_linear_stack(qp, dp)?;
    let chol = qp.factor_cost()?;
    let mut f = 0.0;
    for (wi, c) in w.iter().zip(&chol) {
        f += 0.5 * wi.dot(&c.solve(wi));
    }
    for kind in RowKind::ALL {
        for (rhs, d) in qp.rhs(kind).iter().zip(dp.of_kind(kind)) {
            f += rhs.dot(d);
        }
    }
    Ok(f)
}

/// Minimizer of the Lagrangian over `x` for fixed duals,
/// `x = −H⁻¹(g + Aᵀλ + Cᵀμ + Pᵀν)`.
pub fn primal_from_dual(qp: &PartitionedQP, dp: &DualPoint) -> Result<Vec<DVector<f64>>> {
    let w = dual_linear_stack(qp, dp)?;
    let chol = qp.factor_cost()?;
    Ok(w.iter().zip(&chol).map(|(wi, c)| -c.solve(wi)).collect())
}

/// Lagrangian with `x_a` eliminated at its minimizer, i.e.
/// `½xᵀHx + gᵀx + λᵀ(Ax−b) + μᵀ(Cx−d) + νᵀ(Px−p)` for `|ν| ≤ γ`.
pub fn lagrangian(qp: &PartitionedQP, x: &[DVector<f64>], dp: &DualPoint) -> f64 {
    let mut val = 0.0;
    for (i, xi) in x.iter().enumerate() {
        val += 0.5 * xi.dot(&(&qp.quad_blocks[i] * xi)) + qp.lin_cost[i].dot(xi);
    }
    for kind in RowKind::ALL {
        for (r, d) in qp.residual(kind, x).iter().zip(dp.of_kind(kind)) {
            val += r.dot(d);
        }
    }
    val
}

/// Independent optimality measures; all fields are nonnegative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity_residual: f64,
    pub eq_violation: f64,
    pub ineq_violation: f64,
    pub complementary_slackness_gap: f64,
    pub onenorm_subgradient_gap: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity_residual
            .max(self.eq_violation)
            .max(self.ineq_violation)
            .max(self.complementary_slackness_gap)
            .max(self.onenorm_subgradient_gap)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// KKT residuals of a candidate primal-dual triple.
///
/// The one-norm gap combines `‖x_a − (Px − p)‖∞` with, per coordinate,
/// `max(0, |ν|−γ) + γ|x_a| − ν·x_a`, which vanishes exactly when `ν` lies
/// in the subdifferential of `γ|·|` at `x_a`.
pub fn kkt_residuals(
    qp: &PartitionedQP,
    x: &[DVector<f64>],
    x_aux: &[DVector<f64>],
    dp: &DualPoint,
) -> Result<KktReport> {
    let m = qp.num_subsystems();
    if x.len() != m || x.iter().zip(&qp.partition).any(|(xi, &n)| xi.len() != n) {
        return Err(Error::Dimension("primal point does not match partition".into()));
    }
    if x_aux.len() != m
        || x_aux
            .iter()
            .enumerate()
            .any(|(i, a)| a.len() != qp.rows(RowKind::OneNorm, i))
    {
        return Err(Error::Dimension("auxiliary point does not match one-norm rows".into()));
    }
    let w = dual_linear_stack(qp, dp)?;
    let mut stationarity = 0.0f64;
    for (i, xi) in x.iter().enumerate() {
        let s = &qp.quad_blocks[i] * xi + &w[i];
        stationarity = stationarity.max(inf_norm(s.as_slice()));
    }
    let mut eq = 0.0f64;
    for r in qp.residual(RowKind::Eq, x) {
        eq = eq.max(inf_norm(r.as_slice()));
    }
    let mut ineq = 0.0f64;
    let mut slack = 0.0f64;
    for (r, mu) in qp.residual(RowKind::Ineq, x).iter().zip(&dp.mu) {
        for (&ri, &mi) in r.iter().zip(mu.iter()) {
            ineq = ineq.max(ri.max(0.0));
            slack = slack.max((mi * ri).abs());
            // a negative multiplier is itself a stationarity defect
            stationarity = stationarity.max((-mi).max(0.0));
        }
    }
    let gamma = qp.gamma;
    let mut onenorm = 0.0f64;
    for ((r, xa), nu) in qp.residual(RowKind::OneNorm, x).iter().zip(x_aux).zip(&dp.nu) {
        for ((&ri, &ai), &ni) in r.iter().zip(xa.iter()).zip(nu.iter()) {
            onenorm = onenorm.max((ai - ri).abs());
            let gap = (ni.abs() - gamma).max(0.0) + (gamma * ai.abs() - ni * ai).max(0.0);
            onenorm = onenorm.max(gap);
        }
    }
    Ok(KktReport {
        stationarity_residual: stationarity,
        eq_violation: eq,
        ineq_violation: ineq,
        complementary_slackness_gap: slack,
        onenorm_subgradient_gap: onenorm,
    })
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    row: usize,
    col: usize,
    data: Vec<Vec<f64>>,
}

/// JSON wire form: blocks as `{row, col, data}` with 0-based subsystem
/// indices and row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct QpDocument {
    partition: Vec<usize>,
    #[serde(with = "serde_util::matrices")]
    quad_blocks: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::vectors")]
    lin_cost: Vec<DVector<f64>>,
    eq_blocks: Vec<BlockEntry>,
    #[serde(with = "serde_util::vectors")]
    eq_rhs: Vec<DVector<f64>>,
    ineq_blocks: Vec<BlockEntry>,
    #[serde(with = "serde_util::vectors")]
    ineq_rhs: Vec<DVector<f64>>,
    onenorm_blocks: Vec<BlockEntry>,
    #[serde(with = "serde_util::vectors")]
    onenorm_offset: Vec<DVector<f64>>,
    gamma: f64,
}

fn blocks_to_doc(map: &BlockMap) -> Vec<BlockEntry> {
    map.iter()
        .map(|(&(row, col), m)| BlockEntry {
            row,
            col,
            data: matrix_to_rows(m),
        })
        .collect()
}

fn blocks_from_doc(entries: Vec<BlockEntry>, partition: &[usize]) -> std::result::Result<BlockMap, String> {
    let mut map = BlockMap::new();
    for e in entries {
        let mut m = matrix_from_rows(&e.data)?;
        if m.nrows() == 0 {
            m = DMatrix::zeros(0, partition.get(e.col).copied().unwrap_or(0));
        }
        if map.insert((e.row, e.col), m).is_some() {
            return Err(format!("duplicate block ({}, {})", e.row, e.col));
        }
    }
    Ok(map)
}

impl From<PartitionedQP> for QpDocument {
    fn from(qp: PartitionedQP) -> Self {
        Self {
            eq_blocks: blocks_to_doc(&qp.eq_blocks),
            ineq_blocks: blocks_to_doc(&qp.ineq_blocks),
            onenorm_blocks: blocks_to_doc(&qp.onenorm_blocks),
            partition: qp.partition,
            quad_blocks: qp.quad_blocks,
            lin_cost: qp.lin_cost,
            eq_rhs: qp.eq_rhs,
            ineq_rhs: qp.ineq_rhs,
            onenorm_offset: qp.onenorm_offset,
            gamma: qp.gamma,
        }
    }
}

impl TryFrom<QpDocument> for PartitionedQP {
    type Error = String;

    fn try_from(doc: QpDocument) -> std::result::Result<Self, String> {
        Ok(Self {
            eq_blocks: blocks_from_doc(doc.eq_blocks, &doc.partition)?,
            ineq_blocks: blocks_from_doc(doc.ineq_blocks, &doc.partition)?,
            onenorm_blocks: blocks_from_doc(doc.onenorm_blocks, &doc.partition)?,
            partition: doc.partition,
            quad_blocks: doc.quad_blocks,
            lin_cost: doc.lin_cost,
            eq_rhs: doc.eq_rhs,
            ineq_rhs: doc.ineq_rhs,
            onenorm_offset: doc.onenorm_offset,
            gamma: doc.gamma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn minimal() -> PartitionedQP {
        let mut qp = PartitionedQP::new(vec![scalar(2.0)], vec![DVector::zeros(1)], 1.0);
        qp.eq_blocks.insert((0, 0), scalar(1.0));
        qp.eq_rhs[0] = DVector::from_element(1, 0.0);
        qp.ineq_blocks.insert((0, 0), scalar(1.0));
        qp.ineq_rhs[0] = DVector::from_element(1, 1.0);
        qp.onenorm_blocks.insert((0, 0), scalar(1.0));
        qp.onenorm_offset[0] = DVector::from_element(1, 0.0);
        qp
    }

    #[test]
    fn minimal_problem_is_valid() {
        assert!(validate_problem(&minimal()).is_valid());
    }

    #[test]
    fn zero_cost_block_is_flagged() {
        let mut qp = minimal();
        qp.quad_blocks[0] = scalar(0.0);
        let report = validate_problem(&qp);
        assert!(report.violations.iter().any(|v| v == "H_1 not positive definite"), "{report:?}");
    }

    #[test]
    fn missing_diagonal_block_is_flagged() {
        let mut qp = PartitionedQP::new(vec![scalar(1.0), scalar(1.0)], vec![DVector::zeros(1); 2], 1.0);
        qp.eq_blocks.insert((0, 1), scalar(1.0));
        qp.eq_rhs[0] = DVector::zeros(1);
        let report = validate_problem(&qp);
        assert!(report.violations.iter().any(|v| v == "diagonal block A_11 missing"), "{report:?}");
    }

    #[test]
    fn wrong_block_shape_and_gamma_are_flagged() {
        let mut qp = minimal();
        qp.gamma = 0.0;
        qp.ineq_blocks.insert((0, 0), DMatrix::zeros(2, 1));
        let report = validate_problem(&qp);
        assert!(report.violations.iter().any(|v| v.contains("gamma")));
        assert!(report.violations.iter().any(|v| v.contains("C_11 is 2x1")));
    }

    #[test]
    fn block_diagonal_problem_has_singleton_neighborhoods() {
        let mut qp = PartitionedQP::new(vec![scalar(1.0); 3], vec![DVector::zeros(1); 3], 1.0);
        for i in 0..3 {
            qp.eq_blocks.insert((i, i), scalar(1.0));
            qp.eq_rhs[i] = DVector::zeros(1);
        }
        let nb = compute_neighborhoods(&qp);
        for (i, n) in nb.iter().enumerate() {
            assert_eq!(n, &BTreeSet::from([i]));
        }
    }

    #[test]
    fn dense_onenorm_coupling_gives_full_neighborhoods() {
        let m = 4;
        let mut qp = PartitionedQP::new(vec![scalar(1.0); m], vec![DVector::zeros(1); m], 1.0);
        for i in 0..m {
            for j in 0..m {
                qp.onenorm_blocks.insert((i, j), scalar(1.0));
            }
            qp.onenorm_offset[i] = DVector::zeros(1);
        }
        for n in compute_neighborhoods(&qp) {
            assert_eq!(n, (0..m).collect::<BTreeSet<_>>());
        }
    }

    #[test]
    fn lipschitz_identity_and_scalar() {
        let mut qp = PartitionedQP::new(vec![DMatrix::identity(2, 2)], vec![DVector::zeros(2)], 1.0);
        qp.eq_blocks.insert((0, 0), DMatrix::identity(2, 2));
        qp.eq_rhs[0] = DVector::zeros(2);
        assert_relative_eq!(lipschitz_constant(&qp).unwrap(), 1.0, epsilon = 1e-12);

        let mut qp = PartitionedQP::new(vec![scalar(2.0)], vec![DVector::zeros(1)], 1.0);
        qp.eq_blocks.insert((0, 0), scalar(3.0));
        qp.eq_rhs[0] = DVector::zeros(1);
        assert_relative_eq!(lipschitz_constant(&qp).unwrap(), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_rejects_singular_cost() {
        let mut qp = PartitionedQP::new(vec![scalar(0.0)], vec![DVector::zeros(1)], 1.0);
        qp.eq_blocks.insert((0, 0), scalar(1.0));
        qp.eq_rhs[0] = DVector::zeros(1);
        assert!(matches!(lipschitz_constant(&qp), Err(Error::Singular(_))));
    }

    #[test]
    fn dual_value_hand_cases() {
        let mut qp = PartitionedQP::new(vec![scalar(1.0)], vec![DVector::zeros(1)], 1.0);
        qp.eq_blocks.insert((0, 0), scalar(1.0));
        qp.eq_rhs[0] = DVector::from_element(1, 1.0);
        let mut dp = DualPoint::zeros(&qp);
        assert_eq!(dual_value(&qp, &dp).unwrap(), 0.0);
        dp.lambda[0][0] = 2.0;
        assert_relative_eq!(dual_value(&qp, &dp).unwrap(), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn dual_value_dimension_mismatch() {
        let qp = minimal();
        let mut dp = DualPoint::zeros(&qp);
        dp.mu[0] = DVector::zeros(3);
        assert!(matches!(dual_value(&qp, &dp), Err(Error::Dimension(_))));
    }

    #[test]
    fn kkt_of_hand_solved_problem() {
        // min ½x² s.t. −x ≤ −1
        let mut qp = PartitionedQP::new(vec![scalar(1.0)], vec![DVector::zeros(1)], 1.0);
        qp.ineq_blocks.insert((0, 0), scalar(-1.0));
        qp.ineq_rhs[0] = DVector::from_element(1, -1.0);
        let mut dp = DualPoint::zeros(&qp);
        dp.mu[0][0] = 1.0;
        let x = vec![DVector::from_element(1, 1.0)];
        let aux = vec![DVector::zeros(0)];
        let report = kkt_residuals(&qp, &x, &aux, &dp).unwrap();
        assert_eq!(report, KktReport::default());

        let x0 = vec![DVector::from_element(1, 0.0)];
        let report = kkt_residuals(&qp, &x0, &aux, &dp).unwrap();
        assert_eq!(report.ineq_violation, 1.0);
        assert_eq!(report.eq_violation, 0.0);
        assert_eq!(report.complementary_slackness_gap, 1.0);
        assert_eq!(report.stationarity_residual, 1.0);
    }

    #[test]
    fn onenorm_gap_vanishes_on_subdifferential() {
        // min ½x² + |x − 2|, optimum x = 1 with ν = 1 (x_a = −1 needs ν = −γ... )
        let mut qp = PartitionedQP::new(vec![scalar(1.0)], vec![DVector::zeros(1)], 1.0);
        qp.onenorm_blocks.insert((0, 0), scalar(1.0));
        qp.onenorm_offset[0] = DVector::from_element(1, 2.0);
        // x = 1: x_a = −1, stationarity x + ν = 0 ⇒ ν = −1 = −γ·sign… sign(x_a) = −1 ✓
        let x = vec![DVector::from_element(1, 1.0)];
        let aux = vec![DVector::from_element(1, -1.0)];
        let mut dp = DualPoint::zeros(&qp);
        dp.nu[0][0] = -1.0;
        let r = kkt_residuals(&qp, &x, &aux, &dp).unwrap();
        assert!(r.within(1e-15), "{r:?}");
        dp.nu[0][0] = 1.0;
        let r = kkt_residuals(&qp, &x, &aux, &dp).unwrap();
        assert!(r.onenorm_subgradient_gap > 1.0);
    }

    #[test]
    fn json_round_trip_preserves_problem() {
        let qp = minimal();
        let s = serde_json::to_string(&qp).unwrap();
        let back: PartitionedQP = serde_json::from_str(&s).unwrap();
        assert_eq!(qp, back);
        assert!(s.contains("\"data\":[[1.0]]"));
    }

    #[test]
    fn row_scaling_round_trip() {
        let mut qp = minimal();
        qp.eq_blocks.insert((0, 0), scalar(4.0));
        qp.eq_rhs[0][0] = 8.0;
        let (scaled, s) = qp.row_scaled();
        assert_eq!(scaled.eq_blocks[&(0, 0)][(0, 0)], 1.0);
        assert_eq!(scaled.eq_rhs[0][0], 2.0);
        let mut dp = DualPoint::zeros(&scaled);
        dp.lambda[0][0] = 3.0;
        let back = s.unscale_dual(&dp);
        assert_eq!(back.lambda[0][0], 0.75);
        assert_relative_eq!(
            dual_value(&scaled, &dp).unwrap(),
            dual_value(&qp, &back).unwrap(),
            epsilon = 1e-12
        );
    }
}
