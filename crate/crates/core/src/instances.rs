//! Seeded random problem generators for benchmarking and testing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bnb::{cross_block, VirtualFlowPair};
use crate::problem::PartitionedQP;

#[derive(Clone, Debug)]
pub struct InstanceShape {
    pub subsystems: usize,
    pub vars: (usize, usize),
    pub eq_rows: (usize, usize),
    pub ineq_rows: (usize, usize),
    pub onenorm_rows: (usize, usize),
    /// Probability that a non-adjacent pair of subsystems is coupled.
    pub coupling: f64,
    pub gamma: f64,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            subsystems: 4,
            vars: (3, 8),
            eq_rows: (1, 2),
            ineq_rows: (2, 5),
            onenorm_rows: (0, 1),
            coupling: 0.2,
            gamma: 1.0,
        }
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = rand_matrix(rng, n, n);
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * rng.random_range(0.5..1.5)
}

/// A feasible instance: a random point `x₀` satisfies every equality and,
/// with a positive margin, every inequality. Subsystems form a chain with
/// extra random links.
pub fn random_feasible_instance(seed: u64, shape: &InstanceShape) -> PartitionedQP {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = shape.subsystems;
    let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(shape.vars.0..=shape.vars.1)).collect();
    let quad: Vec<DMatrix<f64>> = sizes.iter().map(|&n| spd(&mut rng, n)).collect();
    let lin: Vec<DVector<f64>> = sizes
        .iter()
        .map(|&n| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mut qp = PartitionedQP::new(quad, lin, shape.gamma);
    let x0: Vec<DVector<f64>> = sizes
        .iter()
        .map(|&n| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mut links = vec![vec![false; m]; m];
    for i in 0..m {
        for j in 0..m {
            links[i][j] = i == j || i.abs_diff(j) == 1 || rng.random_bool(shape.coupling);
        }
    }
    let ranges = [shape.eq_rows, shape.ineq_rows, shape.onenorm_rows];
    for (kind, range) in crate::problem::RowKind::ALL.into_iter().zip(ranges) {
        for i in 0..m {
            let rows = rng.random_range(range.0..=range.1);
            if rows == 0 {
                continue;
            }
            let mut rhs = DVector::zeros(rows);
            for j in 0..m {
                if !links[i][j] {
                    continue;
                }
                let scale = if i == j { 1.0 } else { 0.5 };
                let blk = rand_matrix(&mut rng, rows, sizes[j]) * scale;
                rhs += &blk * &x0[j];
                qp.blocks_mut(kind).insert((i, j), blk);
            }
            if kind == crate::problem::RowKind::Ineq {
                for v in rhs.iter_mut() {
                    *v += rng.random_range(0.0..0.5);
                }
            }
            qp.rhs_mut(kind)[i] = rhs;
        }
    }
    qp
}

/// A small instance with reversible-flow pairs: each listed subsystem owns
/// `horizon` (turbine, pump) pairs coupled by the cross-penalty block,
/// nonnegativity and capacity rows, and a shared one-norm tracking row per
/// step that rewards turbine flow and pump flow alike when the target is
/// far from reachable, so the relaxed optimum tends to run both.
pub fn pair_instance(seed: u64, pair_subsystems: usize, horizon: usize, alpha: f64) -> (PartitionedQP, Vec<VirtualFlowPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = pair_subsystems;
    let n = 2 * horizon;
    let mut quad = Vec::new();
    let mut lin = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..m {
        let rt = rng.random_range(0.5..1.5);
        let rp = rng.random_range(0.5..1.5);
        let mut h = DMatrix::zeros(n, n);
        for k in 0..horizon {
            h.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&cross_block(rt, rp, alpha));
            pairs.push(VirtualFlowPair {
                subsystem: i,
                step: k,
                turbine: 2 * k,
                pump: 2 * k + 1,
                r_turbine: rt,
                r_pump: rp,
                alpha,
            });
        }
        quad.push(h);
        // Negative linear cost on both flows pushes them up together.
        lin.push(DVector::from_fn(n, |_, _| -rng.random_range(0.5..1.5)));
    }
    let mut qp = PartitionedQP::new(quad, lin, 0.5);
    for i in 0..m {
        // −q ≤ 0 and q ≤ cap for every flow
        let mut c = DMatrix::zeros(2 * n, n);
        let mut d = DVector::zeros(2 * n);
        for v in 0..n {
            c[(v, v)] = -1.0;
            c[(n + v, v)] = 1.0;
            d[n + v] = 2.0;
        }
        qp.ineq_blocks.insert((i, i), c);
        qp.ineq_rhs[i] = d;
        // net power k_T q_T − k_P q_P per step, target split evenly
        let mut p = DMatrix::zeros(horizon, n);
        for k in 0..horizon {
            p[(k, 2 * k)] = 1.0;
            p[(k, 2 * k + 1)] = -1.2;
        }
        qp.onenorm_blocks.insert((i, i), p);
        qp.onenorm_offset[i] = DVector::from_fn(horizon, |_, _| rng.random_range(-0.5..0.5));
    }
    (qp, pairs)
}
