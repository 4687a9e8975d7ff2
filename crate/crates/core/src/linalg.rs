//! Dense and block-sparse linear algebra helpers shared by the solver,
//! the model-reduction pipeline and the observer design.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Compressed-row copy of a dense block. The iteration kernels only touch
/// stored nonzeros; accumulation order is fixed by the row-major layout so
/// every caller sharing a block gets bitwise-identical sums.
#[derive(Clone, Debug)]
pub struct CsrBlock {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrBlock {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut row_ptr = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `y += M x`
    pub fn mul_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[idx] * x[self.cols[idx]];
            }
            y[r] += acc;
        }
    }

    /// `y += Mᵀ v`
    pub fn tr_mul_acc(&self, v: &[f64], y: &mut [f64]) {
        debug_assert_eq!(v.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for r in 0..self.nrows {
            let vr = v[r];
            if vr == 0.0 {
                continue;
            }
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.cols[idx]] += self.vals[idx] * vr;
            }
        }
    }
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for r in 0..m.nrows() {
        for c in (r + 1)..m.ncols() {
            if (m[(r, c)] - m[(c, r)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves `P = A P Aᵀ + W` for Schur-stable `A` by Smith doubling.
pub fn dlyap(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(Error::Dimension("dlyap expects square, matching A and W".into()));
    }
    let mut p = w.clone();
    let mut ak = a.clone();
    for _ in 0..80 {
        let term = &ak * &p * ak.transpose();
        p += &term;
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if term.amax() <= 1e-16 * p.amax().max(f64::MIN_POSITIVE) {
            return Ok((&p + p.transpose()) * 0.5);
        }
        ak = &ak * &ak;
        if !ak.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    Err(Error::Reduction(
        "Lyapunov iteration did not converge; is the matrix Schur stable?".into(),
    ))
}

/// Orthonormal basis for the right null space of `m`, using a threshold
/// relative to the largest singular value.
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Square up so the SVD returns a full set of right singular vectors.
    let gram = m.transpose() * m;
    let svd = gram.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let cutoff = rel_tol * rel_tol * smax.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= cutoff || smax == 0.0)
        .collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &v_t.row(i).transpose());
    }
    out
}

/// Returns `L` with `L Lᵀ = P` for a symmetric positive semidefinite `P`,
/// clamping tiny negative eigenvalues produced by roundoff.
pub fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((p + p.transpose()) * 0.5);
    let mut l = eig.eigenvectors.clone();
    for (c, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(c).scale_mut(s);
    }
    l
}

/// Maximum absolute entry of a vector, zero for empty input.
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let total = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

pub fn split(v: &DVector<f64>, sizes: &[usize]) -> Vec<DVector<f64>> {
    let mut off = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = v.rows(off, n).into_owned();
            off += n;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn csr_matches_dense_products() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -3.0, 0.5]);
        let csr = CsrBlock::from_dense(&m);
        assert_eq!(csr.nnz(), 4);
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 2];
        csr.mul_acc(&x, &mut y);
        assert_eq!(y, [7.0, -4.5]);
        let v = [2.0, -1.0];
        let mut z = [1.0; 3];
        csr.tr_mul_acc(&v, &mut z);
        assert_eq!(z, [3.0, 4.0, 4.5]);
    }

    #[test]
    fn dlyap_scalar_closed_form() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let p = dlyap(&a, &w).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 / (1.0 - 0.25), epsilon = 1e-14);
    }

    #[test]
    fn dlyap_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, 1.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        assert!(dlyap(&a, &w).is_err());
    }

    #[test]
    fn null_space_of_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let ns = null_space(&m, 1e-9);
        assert_eq!(ns.ncols(), 1);
        assert!((&m * &ns).amax() < 1e-12);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let l = psd_factor(&p);
        assert!((&l * l.transpose() - &p).amax() < 1e-12);
    }

    #[test]
    fn spectral_radius_rotation() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert_relative_eq!(spectral_radius(&m), 0.5, epsilon = 1e-12);
    }
}
