//! Decentralized state estimation on the reduced models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::model::HpvModel;
use crate::serde_util;

/// Steady-state one-step predictor gain `K = A P Cᵀ (C P Cᵀ + V)⁻¹`, where
/// `P` is the fixed point of the filtering Riccati recursion.
pub fn predictor_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || c.ncols() != n || w.shape() != (n, n) || v.shape() != (c.nrows(), c.nrows()) {
        return Err(Error::Dimension("observer design matrices do not conform".into()));
    }
    let mut p = w.clone();
    for _ in 0..200_000 {
        let s = c * &p * c.transpose() + v;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Observer("innovation covariance is singular".into()))?;
        let apc = a * &p * c.transpose();
        let next = a * &p * a.transpose() + w - &apc * &s_inv * apc.transpose();
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|x| x.is_finite()) {
            break;
        }
        let diff = (&next - &p).amax();
        p = next;
        if diff <= 1e-13 * p.amax().max(1e-300) {
            let s_inv = (c * &p * c.transpose() + v).try_inverse().expect("checked above");
            let k = a * &p * c.transpose() * s_inv;
            let rho = spectral_radius(&(a - &k * c));
            if rho >= 1.0 {
                return Err(Error::Observer(format!("error dynamics not stable (radius {rho:.6}); pair not detectable")));
            }
            return Ok((k, p));
        }
    }
    Err(Error::Observer("Riccati iteration did not converge; pair not detectable".into()))
}

/// Estimator for one subsystem in reduced deviation coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemObserver {
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
    /// Columns over every input channel.
    #[serde(with = "serde_util::matrix")]
    pub b: DMatrix<f64>,
    /// Measured rows only.
    #[serde(with = "serde_util::matrix")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub gain: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub estimate: DVector<f64>,
}

impl SubsystemObserver {
    pub fn error_dynamics(&self) -> DMatrix<f64> {
        &self.a - &self.gain * &self.c
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.error_dynamics())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverBank {
    pub observers: Vec<SubsystemObserver>,
}

/// Noise levels the gains are tuned for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    /// Uniform process noise bound as a fraction of `|x_ss|`.
    pub process_fraction: f64,
    /// Uniform measurement noise bound, m.
    pub measurement_bound: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self { process_fraction: 0.01, measurement_bound: 0.03 }
    }
}

/// Gains from explicit per-subsystem covariances in reduced coordinates.
pub fn design_gains(
    model: &HpvModel,
    process_cov: &[DMatrix<f64>],
    meas_cov: &[DMatrix<f64>],
) -> Result<ObserverBank> {
    if process_cov.len() != model.subsystems.len() || meas_cov.len() != model.subsystems.len() {
        return Err(Error::Dimension("one covariance pair per subsystem required".into()));
    }
    let mut observers = Vec::with_capacity(model.subsystems.len());
    for (i, s) in model.subsystems.iter().enumerate() {
        let red = &s.reduced()?.system;
        let c = red.c.rows(0, s.measured).into_owned();
        let (gain, _) = predictor_gain(&red.a, &c, &process_cov[i], &meas_cov[i])
            .map_err(|e| Error::Observer(format!("{}: {e}", s.name)))?;
        observers.push(SubsystemObserver {
            a: red.a.clone(),
            b: red.b.clone(),
            c,
            gain,
            estimate: DVector::zeros(red.a.nrows()),
        });
    }
    Ok(ObserverBank { observers })
}

/// Gains tuned to uniform noise: variances `bound²/3`, process noise lifted
/// into reduced coordinates through `T`.
pub fn design_gains_for_noise(model: &HpvModel, noise: NoiseLevels) -> Result<ObserverBank> {
    let mut w = Vec::new();
    let mut v = Vec::new();
    for s in &model.subsystems {
        let red = s.reduced()?;
        let var = DVector::from_iterator(
            s.x_ss.len(),
            s.x_ss.iter().map(|x| (noise.process_fraction * x.abs()).powi(2) / 3.0),
        );
        let wr = &red.t * DMatrix::from_diagonal(&var) * red.t.transpose();
        let r = wr.nrows();
        let floor = 1e-9 * wr.diagonal().max().max(1e-12);
        w.push((&wr + wr.transpose()) * 0.5 + DMatrix::identity(r, r) * floor);
        let mv = noise.measurement_bound.powi(2) / 3.0;
        v.push(DMatrix::identity(s.measured, s.measured) * mv.max(1e-12));
    }
    design_gains(model, &w, &v)
}

impl ObserverBank {
    pub fn estimates(&self) -> Vec<DVector<f64>> {
        self.observers.iter().map(|o| o.estimate.clone()).collect()
    }

    pub fn set_estimates(&mut self, x: &[DVector<f64>]) -> Result<()> {
        if x.len() != self.observers.len() {
            return Err(Error::Dimension("one estimate per subsystem required".into()));
        }
        for (o, e) in self.observers.iter_mut().zip(x) {
            if e.len() != o.estimate.len() {
                return Err(Error::Dimension("estimate length mismatch".into()));
            }
            o.estimate = e.clone();
        }
        Ok(())
    }

    pub fn max_spectral_radius(&self) -> f64 {
        self.observers.iter().map(|o| o.spectral_radius()).fold(0.0, f64::max)
    }

    /// `x̂ ← A x̂ + B u + K (y − C x̂)` for every subsystem, with `u` the input
    /// deviations of all channels and `y` the measured output deviations.
    pub fn step(&mut self, u: &DVector<f64>, y: &[DVector<f64>]) -> Result<()> {
        if y.len() != self.observers.len() {
            return Err(Error::Dimension("one measurement vector per subsystem required".into()));
        }
        for (o, yi) in self.observers.iter_mut().zip(y) {
            if u.len() != o.b.ncols() || yi.len() != o.c.nrows() {
                return Err(Error::Dimension("observer input or measurement length mismatch".into()));
            }
            let innov = yi - &o.c * &o.estimate;
            o.estimate = &o.a * &o.estimate + &o.b * u + &o.gain * innov;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_riccati_fixed_point() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let a = DMatrix::from_element(1, 1, 0.5);
        let (k, p) = predictor_gain(&a, &one, &one, &one).unwrap();
        // independent fixed-point iteration on the scalar recursion
        let mut q = 1.0f64;
        for _ in 0..200 {
            q = 0.25 * q + 1.0 - 0.25 * q * q / (q + 1.0);
        }
        assert_relative_eq!(p[(0, 0)], q, epsilon = 1e-10);
        assert_relative_eq!(k[(0, 0)], 0.5 * q / (q + 1.0), epsilon = 1e-10);
        assert!((0.5 - k[(0, 0)]).abs() < 1.0);
    }

    #[test]
    fn vanishing_process_noise_gives_vanishing_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.0, 0.3]);
        let c = DMatrix::identity(2, 2);
        let (k, _) = predictor_gain(&a, &c, &(DMatrix::identity(2, 2) * 1e-12), &DMatrix::identity(2, 2)).unwrap();
        assert!(k.amax() < 1e-9);
    }

    #[test]
    fn undetectable_pair_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.5]);
        let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let w = DMatrix::identity(2, 2);
        let v = DMatrix::identity(1, 1);
        assert!(predictor_gain(&a, &c, &w, &v).is_err());
    }
}
