//! Closed-loop simulation: noisy full-order plant, observers, MPC and the
//! message network.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnb::{restrict_to, two_phase_solve_cached, LipschitzCache, DEFAULT_COMPLEMENTARITY_TOL};
use crate::error::{Error, Result};
use crate::model::{nonlinear_power, Pipeline};
use crate::mpc::{adjusted_references, build_qp, MpcScenario, Scheme};
use crate::network::BITS_PER_SCALAR;
use crate::observer::{design_gains_for_noise, NoiseLevels};
use crate::solver::{SolveOutcome, SolverOptions, StoppingRule};

pub use crate::network::communication_accounting;

/// Everything recorded at one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time_h: f64,
    pub reference: f64,
    /// Power of the true plant under the applied inputs, MW.
    pub power: f64,
    /// Local references in force at the first step of the horizon.
    pub local_references: Vec<f64>,
    /// Applied physical flows, m³/s.
    pub flows: Vec<f64>,
    /// Applied channel values, m³/s.
    pub channels: Vec<f64>,
    /// True measured levels, m.
    pub outputs: Vec<f64>,
    /// Norm of the reduced-state estimate.
    pub estimate_norm: f64,
    pub iterations: usize,
    pub phases: usize,
    pub messages: u64,
    pub scalars: u64,
    pub bits: u64,
    pub input_margin: f64,
    pub output_margin: f64,
    pub complementarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub scheme: Scheme,
    pub seed: u64,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub records: Vec<StepRecord>,
    /// Scalars sent per solver iteration, averaged over the run.
    pub vars_per_iteration: f64,
}

impl ClosedLoopLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tracking_mae(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| (r.power - r.reference).abs()).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.iterations as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn total_bits(&self) -> u64 {
        self.records.iter().map(|r| r.bits).sum()
    }

    pub fn total_scalars(&self) -> u64 {
        self.records.iter().map(|r| r.scalars).sum()
    }

    pub fn min_margin(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.input_margin.min(r.output_margin))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_complementarity(&self) -> f64 {
        self.records.iter().map(|r| r.complementarity).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Columns: step, time_h, reference_mw, power_mw, iterations, phases,
    /// messages, scalars, bits, input_margin, output_margin,
    /// complementarity, estimate_norm, then one column per local reference,
    /// flow and output.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let m = self.records.first().map_or(0, |r| r.local_references.len());
        let mut header: Vec<String> = [
            "step",
            "time_h",
            "reference_mw",
            "power_mw",
            "iterations",
            "phases",
            "messages",
            "scalars",
            "bits",
            "input_margin",
            "output_margin",
            "complementarity",
            "estimate_norm",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=m).map(|i| format!("p_ref_S{i}")));
        header.extend(self.input_names.iter().cloned());
        header.extend(self.output_names.iter().cloned());
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.time_h.to_string(),
                r.reference.to_string(),
                r.power.to_string(),
                r.iterations.to_string(),
                r.phases.to_string(),
                r.messages.to_string(),
                r.scalars.to_string(),
                r.bits.to_string(),
                r.input_margin.to_string(),
                r.output_margin.to_string(),
                r.complementarity.to_string(),
                r.estimate_norm.to_string(),
            ];
            row.extend(r.local_references.iter().map(|v| v.to_string()));
            row.extend(r.flows.iter().map(|v| v.to_string()));
            row.extend(r.outputs.iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Full-order plant in deviation variables with seeded uniform noise.
#[derive(Clone, Debug)]
pub struct PlantState {
    pub x: Vec<DVector<f64>>,
    rng: ChaCha8Rng,
}

impl PlantState {
    pub fn at_steady_state(pipe: &Pipeline, seed: u64) -> Self {
        Self {
            x: pipe.model.subsystems.iter().map(|s| DVector::zeros(s.states())).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Extended output deviations of every subsystem.
    pub fn outputs(&self, pipe: &Pipeline) -> Vec<DVector<f64>> {
        pipe.model.subsystems.iter().zip(&self.x).map(|(s, x)| &s.continuous.c * x).collect()
    }

    /// Measured levels in physical units with bounded noise.
    pub fn measure(&mut self, pipe: &Pipeline, bound: f64) -> Vec<DVector<f64>> {
        let y = self.outputs(pipe);
        pipe.model
            .subsystems
            .iter()
            .zip(y)
            .map(|(s, yi)| {
                DVector::from_fn(s.measured, |o, _| {
                    let v = if bound > 0.0 { self.rng.random_range(-bound..=bound) } else { 0.0 };
                    s.y_ss[o] + yi[o] + v
                })
            })
            .collect()
    }

    /// One sample ahead under input deviations `u`, plus process noise of at
    /// most `fraction · |x_ss|` per component.
    pub fn advance(&mut self, pipe: &Pipeline, u: &DVector<f64>, fraction: f64) -> Result<()> {
        for (s, x) in pipe.model.subsystems.iter().zip(self.x.iter_mut()) {
            let d = s.discrete()?;
            let mut next = &d.a * &*x + &d.b * u;
            for (k, v) in next.iter_mut().enumerate() {
                let b = fraction * s.x_ss[k].abs();
                if b > 0.0 {
                    *v += self.rng.random_range(-b..=b);
                }
            }
            *x = next;
        }
        Ok(())
    }
}

fn solver_options(scenario: &MpcScenario) -> SolverOptions {
    SolverOptions {
        stop: StoppingRule {
            eq_tol: scenario.tolerance,
            ineq_tol: scenario.tolerance,
            max_iterations: scenario.max_iterations,
            ..StoppingRule::default()
        },
        ..SolverOptions::default()
    }
}

/// Runs the controller against the plant for `scenario.steps` samples.
pub fn run_closed_loop(pipe: &Pipeline, scenario: &MpcScenario, seed: u64) -> Result<ClosedLoopLog> {
    scenario.check()?;
    let model = &pipe.model;
    let m = model.subsystems.len();
    let mut plant = PlantState::at_steady_state(pipe, seed);
    let mut bank = design_gains_for_noise(
        model,
        NoiseLevels {
            process_fraction: scenario.process_noise.max(1e-4),
            measurement_bound: scenario.measurement_noise.max(1e-3),
        },
    )?;
    let opts = solver_options(scenario);
    let u_ss = model.steady_inputs();
    let mut warm: Option<SolveOutcome> = None;
    let mut lipschitz = LipschitzCache::new();
    let mut records = Vec::with_capacity(scenario.steps);
    let (mut scalars_total, mut iters_total) = (0u64, 0usize);

    for t in 0..scenario.steps {
        let wrap = |e: Error| Error::ClosedLoop { step: t, source: Box::new(e) };
        let y_true = plant.outputs(pipe);
        let y_meas = plant.measure(pipe, scenario.measurement_noise);
        let reference = scenario.reference_window(t).map_err(wrap)?;
        let x_hat = bank.estimates();
        let prob = build_qp(pipe, scenario, &x_hat, &reference).map_err(wrap)?;
        let out = two_phase_solve_cached(
            &prob.qp,
            &prob.pairs,
            warm.as_ref(),
            &opts,
            DEFAULT_COMPLEMENTARITY_TOL,
            &mut lipschitz,
        )
            .map_err(wrap)?;
        let u_dev = prob.layout.input_vector(&out.x, 0, model.num_inputs());
        let mut u_abs = &u_ss + &u_dev;
        for (c, ch) in model.inputs.iter().enumerate() {
            u_abs[c] = u_abs[c].clamp(ch.lower, ch.upper);
        }
        let applied = &u_abs - &u_ss;
        let power: f64 = nonlinear_power(model, &y_true, &u_abs).iter().sum();

        let input_margin = model
            .inputs
            .iter()
            .enumerate()
            .map(|(c, ch)| (u_abs[c] - ch.lower).min(ch.upper - u_abs[c]))
            .fold(f64::INFINITY, f64::min);
        let mut outputs = Vec::new();
        let mut output_margin = f64::INFINITY;
        for (s, y) in model.subsystems.iter().zip(&y_true) {
            for o in 0..s.measured {
                let v = s.y_ss[o] + y[o];
                let (lo, hi) = s.y_bounds[o];
                output_margin = output_margin.min((v - lo).min(hi - v));
                outputs.push(v);
            }
        }
        let complementarity = pipe
            .ducts
            .iter()
            .map(|d| u_abs[d.turbine] * u_abs[d.pump])
            .fold(0.0, f64::max)
            .max(out.certificate.as_ref().map_or(0.0, |c| c.max_product));
        let local_references = if scenario.scheme == Scheme::LocRefDyn {
            let adj = adjusted_references(&prob.exchange, &prob.local_references, &prob.layout.exchanges(&out.x))
                .map_err(wrap)?;
            adj.iter().map(|r| r[0]).collect()
        } else {
            prob.local_references.iter().map(|r| r[0]).collect()
        };
        scalars_total += out.network.scalars;
        iters_total += out.iterations;
        records.push(StepRecord {
            step: t,
            time_h: t as f64 * scenario.sampling_time / 3600.0,
            reference: reference[0],
            power,
            local_references,
            flows: model.net_flows(&u_abs).iter().copied().collect(),
            channels: u_abs.iter().copied().collect(),
            outputs,
            estimate_norm: x_hat.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt(),
            iterations: out.iterations,
            phases: out.certificate.as_ref().map_or(1, |c| c.phases),
            messages: out.network.messages,
            scalars: out.network.scalars,
            bits: out.network.scalars * BITS_PER_SCALAR,
            input_margin,
            output_margin,
            complementarity,
        });

        plant.advance(pipe, &applied, scenario.process_noise).map_err(wrap)?;
        let y_dev: Vec<DVector<f64>> = model
            .subsystems
            .iter()
            .zip(&y_meas)
            .map(|(s, y)| y - s.y_ss.rows(0, s.measured))
            .collect();
        bank.step(&applied, &y_dev).map_err(wrap)?;
        warm = Some(restrict_to(&out, &prob.qp));
        debug_assert_eq!(bank.observers.len(), m);
    }
    Ok(ClosedLoopLog {
        scheme: scenario.scheme,
        seed,
        input_names: model.topology.input_names(),
        output_names: model.topology.output_names(),
        records,
        vars_per_iteration: if iters_total == 0 { 0.0 } else { scalars_total as f64 / iters_total as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub tracking_mae: f64,
    pub mean_iterations: f64,
    pub total_bits: u64,
    pub vars_per_iteration: f64,
    pub min_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub rows: Vec<SchemeSummary>,
    #[serde(skip)]
    pub logs: Vec<ClosedLoopLog>,
}

impl ComparisonReport {
    pub fn row(&self, scheme: Scheme) -> Option<&SchemeSummary> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }
}

/// Same scenario, seed and noise for every scheme; schemes run in parallel.
pub fn run_comparison_suite(pipe: &Pipeline, base: &MpcScenario, schemes: &[Scheme], seed: u64) -> Result<ComparisonReport> {
    let logs: Vec<ClosedLoopLog> = schemes
        .par_iter()
        .map(|&scheme| {
            let sc = MpcScenario { scheme, ..base.clone() };
            run_closed_loop(pipe, &sc, seed)
        })
        .collect::<Result<_>>()?;
    let rows = logs
        .iter()
        .map(|l| SchemeSummary {
            scheme: l.scheme,
            tracking_mae: l.tracking_mae(),
            mean_iterations: l.mean_iterations(),
            total_bits: l.total_bits(),
            vars_per_iteration: l.vars_per_iteration,
            min_margin: l.min_margin(),
        })
        .collect();
    Ok(ComparisonReport { seed, rows, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_pipeline;
    use crate::mpc::default_reference;
    use std::sync::OnceLock;

    fn pipe() -> &'static Pipeline {
        static P: OnceLock<Pipeline> = OnceLock::new();
        P.get_or_init(|| default_pipeline().unwrap())
    }

    fn short(scheme: Scheme, steps: usize) -> MpcScenario {
        let p = pipe();
        MpcScenario {
            scheme,
            steps,
            reference: default_reference(p.power.steady_total(), 0.3, 1800.0),
            ..MpcScenario::default()
        }
    }

    #[test]
    fn process_and_measurement_noise_stay_in_bounds() {
        let p = pipe();
        let zero = DVector::zeros(p.model.num_inputs());
        for seed in 0..5 {
            let mut plant = PlantState::at_steady_state(p, seed);
            let y = plant.measure(p, 0.03);
            for (s, yi) in p.model.subsystems.iter().zip(&y) {
                for o in 0..s.measured {
                    assert!((yi[o] - s.y_ss[o]).abs() <= 0.03);
                }
            }
            plant.advance(p, &zero, 0.01).unwrap();
            for (s, x) in p.model.subsystems.iter().zip(&plant.x) {
                for (k, v) in x.iter().enumerate() {
                    assert!(v.abs() <= 0.01 * s.x_ss[k].abs());
                }
            }
        }
    }

    #[test]
    fn quiet_plant_at_steady_reference_stays_put() {
        let p = pipe();
        let mut sc = short(Scheme::LocRefDyn, 3);
        sc.reference = vec![p.power.steady_total()];
        sc.process_noise = 0.0;
        sc.measurement_noise = 0.0;
        let log = run_closed_loop(p, &sc, 0).unwrap();
        let u_ss = p.model.steady_inputs();
        for r in &log.records {
            for (c, v) in r.channels.iter().enumerate() {
                assert!((v - u_ss[c]).abs() < 1e-6, "channel {c}: {v}");
            }
            assert!((r.power - r.reference).abs() < 1e-6);
        }
    }

    #[test]
    fn runs_are_deterministic_and_accounted() {
        let p = pipe();
        let sc = short(Scheme::LocRefDyn, 2);
        let a = run_closed_loop(p, &sc, 7).unwrap();
        let b = run_closed_loop(p, &sc, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for r in &a.records {
            assert_eq!(r.bits, 32 * r.scalars);
            assert!(r.messages > 0);
        }
        assert_eq!(a.total_bits(), 32 * a.total_scalars());
        let c = run_closed_loop(p, &sc, 8).unwrap();
        assert_ne!(a.records[1].outputs, c.records[1].outputs);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let p = pipe();
        let log = run_closed_loop(p, &short(Scheme::Decentralized, 2), 1).unwrap();
        assert_eq!(log.total_scalars(), 0);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("step,time_h,reference_mw,power_mw"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn single_scheme_report() {
        let p = pipe();
        let rep = run_comparison_suite(p, &short(Scheme::GlobalRef, 1), &[Scheme::GlobalRef], 3).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert!(rep.row(Scheme::GlobalRef).is_some());
        assert!(rep.row(Scheme::LocRefStat).is_none());
    }
}
