//! Pump/turbine complementarity: cross-penalty relaxation and the
//! two-phase pin-and-resolve scheme.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use std::collections::BTreeMap;

use crate::problem::{lipschitz_constant, PartitionedQP, RowKind};
use crate::solver::{run_rounds, ComplementarityCertificate, PinnedFlow, SolveOutcome, SolverOptions};

/// Default product tolerance, in (m³/s)².
pub const DEFAULT_COMPLEMENTARITY_TOL: f64 = 1e-6;
/// Default cross-penalty relaxation.
pub const DEFAULT_ALPHA: f64 = 0.9;

/// Turbine and pump parts of one reversible duct flow at one step.
/// `turbine` and `pump` index into the owning subsystem's variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualFlowPair {
    pub subsystem: usize,
    pub step: usize,
    pub turbine: usize,
    pub pump: usize,
    pub r_turbine: f64,
    pub r_pump: f64,
    pub alpha: f64,
}

/// `[[R_T, α√(R_T R_P)], [α√(R_T R_P), R_P]]`, positive definite for `0 < α < 1`.
pub fn build_relaxed_cost(r_turbine: f64, r_pump: f64, alpha: f64) -> Result<DMatrix<f64>> {
    if !(r_turbine > 0.0 && r_pump > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "flow weights must be positive, got R_T = {r_turbine}, R_P = {r_pump}"
        )));
    }
    if alpha.is_nan() || alpha >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "alpha = {alpha}: the cross-penalty block has determinant {} and loses strong convexity for alpha >= 1",
            r_turbine * r_pump * (1.0 - alpha * alpha)
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "alpha = {alpha}: the relaxation needs a positive cross-penalty"
        )));
    }
    Ok(cross_block(r_turbine, r_pump, alpha))
}

/// Same block without the `α > 0` requirement, for test fixtures.
pub fn cross_block(r_turbine: f64, r_pump: f64, alpha: f64) -> DMatrix<f64> {
    let c = alpha * (r_turbine * r_pump).sqrt();
    DMatrix::from_row_slice(2, 2, &[r_turbine, c, c, r_pump])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub subsystem: usize,
    pub step: usize,
    pub q_turbine: f64,
    pub q_pump: f64,
}

/// Every pair with `q_T·q_P > tol`.
pub fn complementarity_violations(x: &[DVector<f64>], pairs: &[VirtualFlowPair], tol: f64) -> Vec<Violation> {
    pairs
        .iter()
        .filter_map(|p| {
            let qt = x[p.subsystem][p.turbine];
            let qp = x[p.subsystem][p.pump];
            (qt * qp > tol).then_some(Violation {
                subsystem: p.subsystem,
                step: p.step,
                q_turbine: qt,
                q_pump: qp,
            })
        })
        .collect()
}

pub fn max_complementarity_product(x: &[DVector<f64>], pairs: &[VirtualFlowPair]) -> f64 {
    pairs
        .iter()
        .map(|p| x[p.subsystem][p.turbine] * x[p.subsystem][p.pump])
        .fold(0.0, f64::max)
}

/// Appends `x_i[variable] = 0` rows to `A_ii` for every pin.
pub fn pinned_problem(qp: &PartitionedQP, pins: &[PinnedFlow]) -> Result<PartitionedQP> {
    let mut out = qp.clone();
    let m = qp.num_subsystems();
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); m];
    for p in pins {
        if p.subsystem >= m || p.variable >= qp.partition[p.subsystem] {
            return Err(Error::PinInfeasible(format!(
                "pin on variable {} of subsystem {} does not exist",
                p.variable,
                p.subsystem + 1
            )));
        }
        per[p.subsystem].push(p.variable);
    }
    for (i, vars) in per.iter().enumerate() {
        if vars.is_empty() {
            continue;
        }
        let q = qp.rows(RowKind::Eq, i);
        let extra = vars.len();
        for (&(r, c), blk) in out.eq_blocks.iter_mut() {
            if r == i {
                let mut grown = DMatrix::zeros(q + extra, blk.ncols());
                grown.rows_mut(0, q).copy_from(blk);
                if c == i {
                    for (e, &v) in vars.iter().enumerate() {
                        grown[(q + e, v)] = 1.0;
                    }
                }
                *blk = grown;
            }
        }
        if !out.eq_blocks.contains_key(&(i, i)) {
            let mut blk = DMatrix::zeros(q + extra, qp.partition[i]);
            for (e, &v) in vars.iter().enumerate() {
                blk[(q + e, v)] = 1.0;
            }
            out.eq_blocks.insert((i, i), blk);
        }
        // Rows owned by i that reference other subsystems need the extra
        // zero rows too; blocks (i, j) were grown above.
        out.eq_rhs[i] = DVector::from_iterator(q + extra, qp.eq_rhs[i].iter().copied().chain(std::iter::repeat(0.0).take(extra)));
    }
    Ok(out)
}

/// Selects one pin per pair: the smaller flow goes to zero, the pump when
/// the turbine is strictly larger and the turbine otherwise.
pub fn select_pins(x: &[DVector<f64>], pairs: &[VirtualFlowPair]) -> Vec<PinnedFlow> {
    pairs
        .iter()
        .map(|p| {
            let qt = x[p.subsystem][p.turbine];
            let qp = x[p.subsystem][p.pump];
            let pump = qt > qp;
            PinnedFlow {
                subsystem: p.subsystem,
                step: p.step,
                variable: if pump { p.pump } else { p.turbine },
                pump,
            }
        })
        .collect()
}

/// Extends a solution of `qp` with zero duals for the pin rows of `pinned`.
fn extend_warm(outcome: &SolveOutcome, pinned: &PartitionedQP) -> SolveOutcome {
    let mut w = outcome.clone();
    for (i, l) in w.dual.lambda.iter_mut().enumerate() {
        let q = pinned.rows(RowKind::Eq, i);
        if l.len() < q {
            *l = DVector::from_iterator(q, l.iter().copied().chain(std::iter::repeat(0.0)).take(q));
        }
    }
    w
}

/// Drops dual entries for rows `qp` does not have, so a two-phase result can
/// warm-start the next solve of the unpinned problem.
pub fn restrict_to(outcome: &SolveOutcome, qp: &PartitionedQP) -> SolveOutcome {
    let mut w = outcome.clone();
    for (i, l) in w.dual.lambda.iter_mut().enumerate() {
        let q = qp.rows(RowKind::Eq, i);
        if l.len() > q {
            *l = l.rows(0, q).into_owned();
        }
    }
    w.certificate = None;
    w.trajectory = None;
    w
}

/// Solves the relaxed problem; if any pair violates complementarity, pins
/// one flow of every pair to zero and solves once more from the phase-1
/// point. Pinned flows are set to exactly zero in the returned primal, and
/// the returned duals belong to the pinned problem.
pub fn two_phase_solve(
    relaxed: &PartitionedQP,
    pairs: &[VirtualFlowPair],
    warm: Option<&SolveOutcome>,
    opts: &SolverOptions,
    tol: f64,
) -> Result<SolveOutcome> {
    two_phase_solve_cached(relaxed, pairs, warm, opts, tol, &mut LipschitzCache::new())
}

/// Lipschitz constants keyed by the pinned variables, for repeated solves of
/// problems that differ only in their right-hand sides.
pub type LipschitzCache = BTreeMap<Vec<(usize, usize)>, f64>;

fn cached_options(opts: &SolverOptions, qp: &PartitionedQP, key: Vec<(usize, usize)>, cache: &mut LipschitzCache) -> Result<SolverOptions> {
    if opts.lipschitz.is_some() && key.is_empty() {
        return Ok(opts.clone());
    }
    let l = match cache.get(&key) {
        Some(&l) => l,
        None => {
            let l = if opts.scale_rows {
                lipschitz_constant(&qp.row_scaled().0)?
            } else {
                lipschitz_constant(qp)?
            };
            cache.insert(key, l);
            l
        }
    };
    Ok(SolverOptions { lipschitz: Some(l), ..opts.clone() })
}

/// [`two_phase_solve`] reusing Lipschitz constants from `cache`.
pub fn two_phase_solve_cached(
    relaxed: &PartitionedQP,
    pairs: &[VirtualFlowPair],
    warm: Option<&SolveOutcome>,
    opts: &SolverOptions,
    tol: f64,
    cache: &mut LipschitzCache,
) -> Result<SolveOutcome> {
    let opts1 = cached_options(opts, relaxed, Vec::new(), cache)?;
    let mut phase1 = run_rounds(relaxed, warm, &opts1)?;
    let violations = complementarity_violations(&phase1.x, pairs, tol);
    if violations.is_empty() {
        phase1.certificate = Some(ComplementarityCertificate {
            phases: 1,
            pinned: Vec::new(),
            max_product: max_complementarity_product(&phase1.x, pairs),
            tolerance: tol,
        });
        return Ok(phase1);
    }
    let pins = select_pins(&phase1.x, pairs);
    let pinned = pinned_problem(relaxed, &pins)?;
    let key = pins.iter().map(|p| (p.subsystem, p.variable)).collect();
    let phase2_opts = cached_options(&SolverOptions { lipschitz: None, ..opts.clone() }, &pinned, key, cache)?;
    let warm2 = extend_warm(&phase1, &pinned);
    let mut phase2 = run_rounds(&pinned, Some(&warm2), &phase2_opts)?;
    for p in &pins {
        phase2.x[p.subsystem][p.variable] = 0.0;
    }
    phase2.x_aux = relaxed.residual(RowKind::OneNorm, &phase2.x);
    let max_product = max_complementarity_product(&phase2.x, pairs);
    if max_product > tol {
        return Err(Error::PinInfeasible(format!(
            "complementarity product {max_product} remains after pinning"
        )));
    }
    // Report the work of both phases.
    let mut merged = phase2;
    merged.iterations += phase1.iterations;
    let mut hist = phase1.dual_history;
    hist.extend(merged.dual_history);
    merged.dual_history = hist;
    let mut eq = phase1.eq_residual_history;
    eq.extend(merged.eq_residual_history);
    merged.eq_residual_history = eq;
    let mut ineq = phase1.ineq_residual_history;
    ineq.extend(merged.ineq_residual_history);
    merged.ineq_residual_history = ineq;
    let mut msgs = phase1.messages_per_round;
    msgs.extend(merged.messages_per_round);
    merged.messages_per_round = msgs;
    let mut scal = phase1.scalars_per_round;
    scal.extend(merged.scalars_per_round);
    merged.scalars_per_round = scal;
    merged.network.merge(&phase1.network);
    merged.certificate = Some(ComplementarityCertificate {
        phases: 2,
        pinned: pins,
        max_product,
        tolerance: tol,
    });
    Ok(merged)
}
