use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dlyap, null_space, psd_factor, spectral_radius};
use crate::model::plant::{HpvModel, ReducedModel, StateSpace, SubsystemModel};

/// Hankel singular values below this fraction of the largest are treated as zero.
pub const MINIMALITY_TOL: f64 = 1e-9;

/// Requested reduced order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Keep every mode of the minimal realization.
    Full,
    Exact(usize),
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

/// Square-root balanced truncation of the strictly stable part of a
/// discrete subsystem. Modes at `z = 1` are split off first and kept as they are.
pub fn balanced_truncate_system(sys: &StateSpace, order: Order) -> Result<ReducedModel> {
    let n = sys.states();
    let eye = DMatrix::<f64>::identity(n, n);
    let right = null_space(&(&sys.a - &eye), 1e-8);
    let left = null_space(&(&sys.a - &eye).transpose(), 1e-8);
    let k = right.ncols();
    if left.ncols() != k {
        return Err(Error::Reduction("integrator modes are not diagonalizable".into()));
    }
    let stable_basis = if k == 0 {
        DMatrix::identity(n, n)
    } else {
        null_space(&left.transpose(), 1e-8)
    };
    if stable_basis.ncols() + k != n {
        return Err(Error::Reduction("could not separate integrator modes".into()));
    }
    let mut t = DMatrix::zeros(n, n);
    t.view_mut((0, 0), (n, k)).copy_from(&right);
    t.view_mut((0, k), (n, n - k)).copy_from(&stable_basis);
    let t_full_inv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Reduction("modal basis is singular".into()))?;
    let az = &t_full_inv * &sys.a * &t;
    let bz = &t_full_inv * &sys.b;
    let cz = &sys.c * &t;
    let ns = n - k;
    let a0 = az.view((0, 0), (k, k)).into_owned();
    let a_s = az.view((k, k), (ns, ns)).into_owned();
    let b0 = bz.rows(0, k).into_owned();
    let b_s = bz.rows(k, ns).into_owned();
    let c0 = cz.columns(0, k).into_owned();
    let c_s = cz.columns(k, ns).into_owned();

    let (hsv, t_red, t_red_inv) = if ns == 0 {
        (Vec::new(), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    } else {
        let rho = spectral_radius(&a_s);
        if rho >= 1.0 {
            return Err(Error::Reduction(format!(
                "stable part has spectral radius {rho:.6} after removing integrators"
            )));
        }
        let p = dlyap(&a_s, &(&b_s * b_s.transpose()))?;
        let q = dlyap(&a_s.transpose(), &(c_s.transpose() * &c_s))?;
        let lp = psd_factor(&p);
        let lq = psd_factor(&q);
        let svd = (lq.transpose() * &lp).svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V");
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let hsv: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
        let minimal = hsv
            .iter()
            .filter(|&&s| s > MINIMALITY_TOL * hsv[0].max(f64::MIN_POSITIVE))
            .count();
        let r = match order {
            Order::Full => minimal,
            Order::Exact(total) => {
                if total < k {
                    return Err(Error::Reduction(format!(
                        "order {total} is below the {k} retained integrator modes"
                    )));
                }
                if total == 0 {
                    return Err(Error::Reduction("target order must be at least 1".into()));
                }
                total - k
            }
        };
        if r > minimal {
            return Err(Error::Reduction(format!(
                "order {} exceeds the minimal realization order {}",
                r + k,
                minimal + k
            )));
        }
        let mut t_red = DMatrix::zeros(r, ns);
        let mut t_red_inv = DMatrix::zeros(ns, r);
        let lq_t = lq.transpose();
        for (c, &i) in idx.iter().take(r).enumerate() {
            let s = svd.singular_values[i].sqrt();
            t_red.set_row(c, &((u.column(i).transpose() * &lq_t) / s));
            t_red_inv.set_column(c, &((&lp * v_t.row(i).transpose()) / s));
        }
        (hsv, t_red, t_red_inv)
    };

    let r = t_red.nrows();
    let ar = block_diag(&a0, &(&t_red * &a_s * &t_red_inv));
    let mut br = DMatrix::zeros(k + r, sys.b.ncols());
    br.rows_mut(0, k).copy_from(&b0);
    br.rows_mut(k, r).copy_from(&(&t_red * &b_s));
    let mut cr = DMatrix::zeros(sys.c.nrows(), k + r);
    cr.columns_mut(0, k).copy_from(&c0);
    cr.columns_mut(k, r).copy_from(&(&c_s * &t_red_inv));
    // drop roundoff in input columns that carry nothing
    for j in 0..sys.b.ncols() {
        if sys.b.column(j).iter().all(|v| *v == 0.0) {
            br.column_mut(j).fill(0.0);
        }
    }
    let t_r = block_diag(&DMatrix::identity(k, k), &t_red) * &t_full_inv;
    let t_r_inv = &t * block_diag(&DMatrix::identity(k, k), &t_red_inv);
    Ok(ReducedModel {
        system: StateSpace { a: ar, b: br, c: cr },
        t: t_r,
        t_inv: t_r_inv,
        hankel_singular_values: hsv,
        integrators: k,
    })
}

pub fn balanced_truncate(sub: &SubsystemModel, order: Order) -> Result<SubsystemModel> {
    let sys = sub.discrete()?;
    let red = balanced_truncate_system(sys, order)
        .map_err(|e| match e {
            Error::Reduction(msg) => Error::Reduction(format!("{}: {msg}", sub.name)),
            other => other,
        })?;
    let mut out = sub.clone();
    out.reduced = Some(red);
    Ok(out)
}

/// Reduces every subsystem; `orders` of `None` uses the model's defaults.
pub fn reduce_model(model: &HpvModel, orders: Option<&[Order]>) -> Result<HpvModel> {
    let defaults: Vec<Order> = model.params.reduced_orders.iter().map(|&o| Order::Exact(o)).collect();
    let orders = orders.unwrap_or(&defaults);
    if orders.len() != model.subsystems.len() {
        return Err(Error::InvalidParameter("one order per subsystem required".into()));
    }
    let mut out = model.clone();
    for (s, &o) in out.subsystems.iter_mut().zip(orders) {
        *s = balanced_truncate(s, o)?;
    }
    Ok(out)
}

/// Relative L2 error of the reduced step responses, per output channel,
/// over steps on every input that reaches the subsystem.
pub fn step_response_errors(sub: &SubsystemModel, steps: usize) -> Result<Vec<f64>> {
    let full = sub.discrete()?;
    let red = &sub.reduced()?.system;
    let p = full.c.nrows();
    let mut num = vec![0.0; p];
    let mut den = vec![0.0; p];
    for j in 0..full.b.ncols() {
        if full.b.column(j).iter().all(|v| *v == 0.0) {
            continue;
        }
        let yf = full.step_response(j, steps);
        let yr = red.step_response(j, steps);
        for (a, b) in yf.iter().zip(&yr) {
            for o in 0..p {
                num[o] += (a[o] - b[o]).powi(2);
                den[o] += a[o].powi(2);
            }
        }
    }
    Ok((0..p)
        .map(|o| if den[o] == 0.0 { 0.0 } else { (num[o] / den[o]).sqrt() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> StateSpace {
        StateSpace {
            a: DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.0, 0.0, 0.5, 0.2, 0.0, 0.0, 0.2]),
            b: DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 0.5, 0.0]),
            c: DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
        }
    }

    #[test]
    fn full_order_preserves_impulse_response() {
        let sys = toy();
        let red = balanced_truncate_system(&sys, Order::Full).unwrap();
        assert_eq!(red.integrators, 1);
        assert_eq!(red.order(), 3);
        let mut af = DMatrix::identity(3, 3);
        let mut ar = DMatrix::identity(3, 3);
        for _ in 0..30 {
            let hf = &sys.c * &af * &sys.b;
            let hr = &red.system.c * &ar * &red.system.b;
            assert!((hf - hr).amax() < 1e-10);
            af = &sys.a * af;
            ar = &red.system.a * ar;
        }
        let prod = &red.t * &red.t_inv;
        assert!((prod - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn hsv_sorted_and_bounds_enforced() {
        let red = balanced_truncate_system(&toy(), Order::Exact(2)).unwrap();
        let h = &red.hankel_singular_values;
        assert!(h.windows(2).all(|w| w[0] >= w[1]));
        assert!(balanced_truncate_system(&toy(), Order::Exact(4)).is_err());
        assert!(balanced_truncate_system(&toy(), Order::Exact(0)).is_err());
    }

    #[test]
    fn unstable_part_rejected() {
        let mut sys = toy();
        sys.a[(2, 2)] = 1.5;
        assert!(balanced_truncate_system(&sys, Order::Full).is_err());
    }
}
