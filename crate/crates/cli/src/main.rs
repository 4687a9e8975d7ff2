use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hydro_dmpc::bnb::{pinned_problem, two_phase_solve, VirtualFlowPair, DEFAULT_COMPLEMENTARITY_TOL};
use hydro_dmpc::model::{
    build_pipeline, default_topology, discretize_zoh, reduce_model, step_response_errors, synthesize_linear_model,
    HpvParams, Order,
};
use hydro_dmpc::mpc::{default_reference, reference_from_csv, MpcScenario, Scheme};
use hydro_dmpc::problem::{kkt_residuals, validate_problem, KktReport, PartitionedQP};
use hydro_dmpc::sim::{run_comparison_suite, ComparisonReport};
use hydro_dmpc::solver::{centralized_reference_run, run_rounds, SolveOutcome, SolverOptions, StoppingRule};

const DEMO_QP: &str = include_str!("../../../data/demo_qp.json");

#[derive(Parser, Debug)]
#[command(name = "hydro-dmpc", version, about = "Distributed MPC for cascaded hydro power valleys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the closed loop for one scheme or compare all of them.
    Simulate(SimulateArgs),
    /// Solve a partitioned QP with the distributed solver.
    Solve(SolveArgs),
    /// Reduce the valley model and report Hankel singular values.
    Reduce(ReduceArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario JSON; defaults apply to missing fields.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Directory for CSV logs and the summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// global-ref, loc-ref-stat, loc-ref-dyn or decentralized.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Solver tolerance on scaled residuals.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap per solve.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Total power reference, one value per sample, MW.
    #[arg(long)]
    reference_csv: Option<PathBuf>,
    /// `all` runs every scheme on the same noise.
    #[arg(long)]
    compare: Option<String>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Problem JSON; the bundled demo problem when omitted.
    #[arg(long, alias = "scenario")]
    problem: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run exactly this many iterations.
    #[arg(long)]
    fixed_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Compare the distributed run with the centralized reference, iterate by iterate.
    #[arg(long)]
    centralized_check: bool,
}

#[derive(Args, Debug)]
struct ReduceArgs {
    /// Valley parameter JSON; built-in parameters when omitted.
    #[arg(long, alias = "scenario")]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `full`, one order for every subsystem, or a comma-separated list.
    #[arg(long)]
    order: Option<String>,
    /// Length of the step responses behind the error table.
    #[arg(long, default_value_t = 48)]
    steps: usize,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    fn runtime(err: hydro_dmpc::Error) -> Self {
        let code = match err {
            hydro_dmpc::Error::InvalidParameter(_) | hydro_dmpc::Error::InvalidProblem(_) => 2,
            _ => 1,
        };
        Self { code, message: err.to_string() }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Self { code: 1, message: format!("{}: {err}", path.display()) }
    }
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    code: u8,
    message: &'a str,
}

type CliResult = Result<(), Failure>;

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn simulate(args: SimulateArgs) -> CliResult {
    let mut sc = match &args.scenario {
        Some(p) => MpcScenario::from_json(&read_file(p)?).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => MpcScenario::default(),
    };
    if let Some(s) = &args.scheme {
        sc.scheme = s.parse().map_err(Failure::runtime)?;
    }
    if let Some(v) = args.seed {
        sc.seed = v;
    }
    if let Some(v) = args.steps {
        sc.steps = v;
    }
    if let Some(v) = args.horizon {
        sc.horizon = v;
    }
    if let Some(v) = args.tol {
        sc.tolerance = v;
    }
    if let Some(v) = args.max_iters {
        sc.max_iterations = v;
    }
    let schemes: Vec<Scheme> = match args.compare.as_deref() {
        None => vec![sc.scheme],
        Some("all") => Scheme::ALL.to_vec(),
        Some(other) => return Err(Failure::config(format!("--compare accepts only 'all', got '{other}'"))),
    };
    let pipe = build_pipeline(&default_topology(), &HpvParams::default(), None).map_err(Failure::runtime)?;
    if let Some(p) = &args.reference_csv {
        sc.reference = reference_from_csv(read_file(p)?.as_bytes()).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
    }
    if sc.reference.is_empty() {
        sc.reference = default_reference(pipe.power.steady_total(), 0.3, sc.sampling_time);
    }
    sc.check().map_err(|e| Failure::config(e))?;
    let report = run_comparison_suite(&pipe, &sc, &schemes, sc.seed).map_err(Failure::runtime)?;
    print_summary(&report);
    if let Some(dir) = &args.out {
        for log in &report.logs {
            let mut buf = Vec::new();
            log.write_csv(&mut buf).map_err(Failure::runtime)?;
            write_file(dir, &format!("{}.csv", log.scheme), &buf)?;
        }
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::runtime(e.into()))?;
        write_file(dir, "summary.json", json.as_bytes())?;
    }
    Ok(())
}

fn print_summary(report: &ComparisonReport) {
    println!("seed {}", report.seed);
    println!("{:<15} {:>12} {:>12} {:>14} {:>12}", "scheme", "MAE [MW]", "mean iters", "bits", "min margin");
    for r in &report.rows {
        println!(
            "{:<15} {:>12.4} {:>12.1} {:>14} {:>12.4}",
            r.scheme.name(),
            r.tracking_mae,
            r.mean_iterations,
            r.total_bits,
            r.min_margin
        );
    }
}

/// A problem file holds either a bare problem or a problem with its virtual-flow pairs.
#[derive(Deserialize)]
#[serde(untagged)]
enum ProblemFile {
    WithPairs {
        problem: PartitionedQP,
        #[serde(default)]
        pairs: Vec<VirtualFlowPair>,
    },
    Bare(PartitionedQP),
}

#[derive(Serialize)]
struct SolveReport {
    objective: f64,
    /// Residuals on the row-scaled problem that was actually solved.
    kkt: KktReport,
    outcome: SolveOutcome,
}

fn solve(args: SolveArgs) -> CliResult {
    let text = match &args.problem {
        Some(p) => read_file(p)?,
        None => DEMO_QP.to_string(),
    };
    let (qp, pairs) = match serde_json::from_str::<ProblemFile>(&text) {
        Ok(ProblemFile::WithPairs { problem, pairs }) => (problem, pairs),
        Ok(ProblemFile::Bare(problem)) => (problem, Vec::new()),
        Err(e) => return Err(Failure::config(format!("problem file: {e}"))),
    };
    let report = validate_problem(&qp);
    if !report.is_valid() {
        return Err(Failure::config(format!("invalid problem: {report:?}")));
    }
    let mut stop = StoppingRule::default();
    if let Some(t) = args.tol {
        if !(t > 0.0) {
            return Err(Failure::config("--tol must be positive"));
        }
        stop.eq_tol = t;
        stop.ineq_tol = t;
    }
    if let Some(n) = args.max_iters {
        stop.max_iterations = n;
    }
    stop.fixed_iterations = args.fixed_iters;
    let opts = SolverOptions { stop, ..SolverOptions::default() };

    if args.centralized_check {
        let opts = SolverOptions { record_trajectory: true, ..opts };
        let a = run_rounds(&qp, None, &opts).map_err(Failure::runtime)?;
        let b = centralized_reference_run(&qp, None, &opts).map_err(Failure::runtime)?;
        let (ta, tb) = (a.trajectory.unwrap_or_default(), b.trajectory.unwrap_or_default());
        if let Some(k) = (0..ta.len().max(tb.len())).find(|&k| ta.get(k) != tb.get(k)) {
            println!("MISMATCH at iteration {k}");
            return Err(Failure { code: 1, message: format!("trajectories differ at iteration {k}") });
        }
        if a.x != b.x || a.dual != b.dual {
            println!("MISMATCH in final iterate");
            return Err(Failure { code: 1, message: "final iterates differ".into() });
        }
        println!("MATCH");
        println!("{} iterations compared", ta.len());
        return Ok(());
    }

    let out = two_phase_solve(&qp, &pairs, None, &opts, DEFAULT_COMPLEMENTARITY_TOL).map_err(Failure::runtime)?;
    let solved = match &out.certificate {
        Some(c) if !c.pinned.is_empty() => pinned_problem(&qp, &c.pinned).map_err(Failure::runtime)?,
        _ => qp.clone(),
    };
    let (scaled, scaling) = solved.row_scaled();
    let kkt = kkt_residuals(&scaled, &out.x, &out.x_aux, &scaling.scale_dual(&out.dual)).map_err(Failure::runtime)?;
    let doc = SolveReport { objective: qp.primal_objective(&out.x), kkt, outcome: out };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Failure::runtime(e.into()))?;
    match &args.out {
        Some(dir) => {
            write_file(dir, "solution.json", json.as_bytes())?;
            let mut buf = Vec::new();
            doc.outcome.write_csv(&mut buf).map_err(Failure::runtime)?;
            write_file(dir, "history.csv", &buf)?;
            println!("iterations {}", doc.outcome.iterations);
            println!("termination {:?}", doc.outcome.termination);
            println!("objective {:.9e}", doc.objective);
            println!("kkt max {:.3e}", doc.kkt.max());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn parse_orders(spec: &str, minimal: &[usize]) -> Result<Vec<Order>, Failure> {
    let m = minimal.len();
    let one = |s: &str| -> Result<Order, Failure> {
        match s.trim() {
            "full" => Ok(Order::Full),
            t => t
                .parse::<usize>()
                .map(Order::Exact)
                .map_err(|_| Failure::config(format!("bad order '{t}'"))),
        }
    };
    let parts: Vec<&str> = spec.split(',').collect();
    match parts.len() {
        // a single order is capped per subsystem at its minimal order
        1 => Ok(match one(parts[0])? {
            Order::Exact(k) => minimal.iter().map(|&n| Order::Exact(k.min(n))).collect(),
            o => vec![o; m],
        }),
        n if n == m => parts.into_iter().map(one).collect(),
        n => Err(Failure::config(format!("expected 1 or {m} orders, got {n}"))),
    }
}

#[derive(Serialize)]
struct SubsystemReduction {
    name: String,
    full_states: usize,
    order: usize,
    integrators: usize,
    hankel_singular_values: Vec<f64>,
    step_response_errors: Vec<f64>,
}

#[derive(Serialize)]
struct ReduceReport {
    steps: usize,
    total_full_states: usize,
    total_reduced_order: usize,
    max_step_response_error: f64,
    subsystems: Vec<SubsystemReduction>,
}

fn reduce(args: ReduceArgs) -> CliResult {
    let params = match &args.params {
        Some(p) => HpvParams::from_json(&read_file(p)?).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => HpvParams::default(),
    };
    let topo = default_topology();
    params.check(&topo).map_err(|e| Failure::config(e))?;
    let model = synthesize_linear_model(&topo, &params).map_err(Failure::runtime)?;
    let model = discretize_zoh(&model, params.sampling_time).map_err(Failure::runtime)?;
    let orders = match args.order.as_deref() {
        Some(spec) => {
            let full = reduce_model(&model, Some(&vec![Order::Full; model.subsystems.len()])).map_err(Failure::runtime)?;
            let minimal: Vec<usize> = full.subsystems.iter().map(|s| s.reduced.as_ref().map_or(0, |r| r.order())).collect();
            Some(parse_orders(spec, &minimal)?)
        }
        None => None,
    };
    let model = reduce_model(&model, orders.as_deref()).map_err(Failure::runtime)?;
    let mut subsystems = Vec::new();
    for s in &model.subsystems {
        let red = s.reduced().map_err(Failure::runtime)?;
        subsystems.push(SubsystemReduction {
            name: s.name.clone(),
            full_states: s.states(),
            order: red.order(),
            integrators: red.integrators,
            hankel_singular_values: red.hankel_singular_values.clone(),
            step_response_errors: step_response_errors(s, args.steps).map_err(Failure::runtime)?,
        });
    }
    let report = ReduceReport {
        steps: args.steps,
        total_full_states: model.total_states(),
        total_reduced_order: model.total_reduced_states(),
        max_step_response_error: subsystems
            .iter()
            .flat_map(|s| s.step_response_errors.iter().copied())
            .fold(0.0, f64::max),
        subsystems,
    };
    println!("{:<6} {:>6} {:>6} {:>11} {:>14}  leading Hankel singular values", "name", "full", "order", "integrators", "step error");
    for s in &report.subsystems {
        let err = s.step_response_errors.iter().copied().fold(0.0, f64::max);
        let hsv: Vec<String> = s.hankel_singular_values.iter().take(6).map(|v| format!("{v:.3e}")).collect();
        println!(
            "{:<6} {:>6} {:>6} {:>11} {:>14.3e}  {}",
            s.name,
            s.full_states,
            s.order,
            s.integrators,
            err,
            hsv.join(" ")
        );
    }
    println!("total full order: {}", report.total_full_states);
    println!("total reduced order: {}", report.total_reduced_order);
    println!("max step-response error: {:.3e}", report.max_step_response_error);
    if let Some(dir) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::runtime(e.into()))?;
        write_file(dir, "reduce_report.json", json.as_bytes())?;
        let model_json = model.to_json().map_err(Failure::runtime)?;
        write_file(dir, "reduced_model.json", model_json.as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            std::process::exit(report(Failure::config(first)).into())
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Solve(a) => solve(a),
        Command::Reduce(a) => reduce(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => ExitCode::from(report(f)),
    }
}

fn report(f: Failure) -> u8 {
    let kind = if f.code == 2 { "config" } else { "runtime" };
    let doc = ErrorDocument { error: ErrorBody { kind, code: f.code, message: &f.message } };
    eprintln!("{}", serde_json::to_string(&doc).expect("error document serializes"));
    f.code
}
