//! Command implementations behind the `hcs` binary: steering runs,
//! Monte-Carlo simulation runs, and the verification suites, together with
//! their on-disk artifact formats (JSON for configuration and matrices, CSV
//! for time series).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_analytic::{solve_invertible_path, HybridSteeringProblem, HybridSteeringSolution};
use crate::hybrid_model::{HybridSystemSpec, INVERTIBILITY_COND_LIMIT};
use crate::linalg::{matrix_from_rows, matrix_to_rows, rank, Schedule};
use crate::nominal_ilqr::{linearize_along, solve_hilqr, NominalPlan, SegmentLinearization};
use crate::presets::{preset, ExperimentConfig};
use crate::sdp_steering::{solve_general_path, ChainSolution, SdpSettings};
use crate::sim_harness::{
    compare_schedules, simulate_ensemble, FeedbackPlan, SegmentFeedback, SimConfig,
};
use crate::smooth_steering::SteeringSolution;
use crate::verify::run_suites;

/// Solver dispatch of `hcs steer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Analytic when every saltation matrix is invertible, SDP otherwise.
    Auto,
    Analytic,
    Sdp,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Method::Auto),
            "analytic" => Ok(Method::Analytic),
            "sdp" => Ok(Method::Sdp),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (auto|analytic|sdp)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Auto => "auto",
            Method::Analytic => "analytic",
            Method::Sdp => "sdp",
        })
    }
}

/// Everything needed to reproduce a run bit for bit: the resolved
/// configuration, solver knobs, and the artifact inventory. Wall-clock
/// timings are informational only and excluded from the reproducibility
/// contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub experiment: String,
    pub method: String,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub artifacts: Vec<String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

// ---------------------------------------------------------------------------
// serializable schedule / plan formats

/// Dense serialization of a matrix schedule: one row-major matrix per node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleData {
    pub times: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl ScheduleData {
    pub fn from_schedule(s: &Schedule) -> Self {
        let rows = s.first().nrows();
        let cols = s.first().ncols();
        ScheduleData {
            times: s.times().to_vec(),
            rows,
            cols,
            data: s
                .values()
                .iter()
                .map(|m| {
                    let mut row = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            row.push(m[(i, j)]);
                        }
                    }
                    row
                })
                .collect(),
        }
    }

    pub fn to_schedule(&self) -> Result<Schedule> {
        if self.times.len() != self.data.len() || self.times.is_empty() {
            return Err(Error::Config("inconsistent schedule data".into()));
        }
        let values = self
            .data
            .iter()
            .map(|flat| {
                if flat.len() != self.rows * self.cols {
                    return Err(Error::Config("schedule entry size mismatch".into()));
                }
                Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
                    flat[i * self.cols + j]
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule::new(self.times.clone(), values))
    }
}

/// One segment of a simulatable closed-loop plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSegmentData {
    pub span: (f64, f64),
    pub gains: ScheduleData,
    pub x_nom: ScheduleData,
    pub u_nom: ScheduleData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_planned: Option<ScheduleData>,
}

/// Self-contained simulatable plan: the experiment it came from, the label
/// of the feedback law, and the per-segment schedules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanData {
    pub label: String,
    pub experiment: ExperimentConfig,
    pub epsilon: f64,
    pub sigma0: Vec<Vec<f64>>,
    pub segments: Vec<PlanSegmentData>,
}

impl PlanData {
    pub fn to_feedback_plan(&self) -> Result<(HybridSystemSpec, FeedbackPlan)> {
        let system = self.experiment.system.to_system()?;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                Ok(SegmentFeedback {
                    span: s.span,
                    gains: s.gains.to_schedule()?,
                    x_nom: s.x_nom.to_schedule()?,
                    u_nom: s.u_nom.to_schedule()?,
                    sigma_planned: s
                        .sigma_planned
                        .as_ref()
                        .map(|d| d.to_schedule())
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            system,
            FeedbackPlan {
                segments,
                sigma0: matrix_from_rows(&self.sigma0)?,
            },
        ))
    }
}

/// Jump record in the solution artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpRecordData {
    pub t_minus: f64,
    pub xi: Vec<Vec<f64>>,
    pub sigma_minus: Vec<Vec<f64>>,
    pub sigma_plus: Vec<Vec<f64>>,
    pub pi_minus: Vec<Vec<f64>>,
    pub pi_plus: Vec<Vec<f64>>,
    pub pi_jump_residual: f64,
    pub sigma_jump_residual: f64,
}

/// Steering solution artifact shared by both solver paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionData {
    pub method: String,
    pub cost: f64,
    pub terminal_error: f64,
    pub jumps: Vec<JumpRecordData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdp: Option<SdpSolutionData>,
}

/// Convex-program diagnostics of the SDP path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdpSolutionData {
    pub objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub min_domain_margin: f64,
    pub eta_schedule: Vec<f64>,
    pub sigma_minus: Vec<Vec<Vec<f64>>>,
    pub w: Vec<Vec<Vec<f64>>>,
    /// Rank of every post-jump covariance at 1e-10 relative tolerance.
    pub sigma_plus_ranks: Vec<usize>,
}

// ---------------------------------------------------------------------------
// steer

#[derive(Debug, Clone)]
pub struct SteerArgs {
    pub experiment: Option<String>,
    pub config: Option<PathBuf>,
    pub method: Method,
    pub out: PathBuf,
    pub eta: Vec<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

/// Outcome summary of a steering run, also printed to stdout.
#[derive(Debug, Clone)]
pub struct SteerSummary {
    pub method_used: Method,
    pub sigma_minus: Vec<DMatrix<f64>>,
    pub sigma_plus: Vec<DMatrix<f64>>,
    pub cost: f64,
    pub terminal_error: f64,
    pub out_dir: PathBuf,
}

fn load_experiment(args: &SteerArgs) -> Result<ExperimentConfig> {
    match (&args.experiment, &args.config) {
        (Some(name), None) => preset(name),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            // accept either a bare experiment config or a manifest embedding one
            match ExperimentConfig::from_json(&text) {
                Ok(cfg) => Ok(cfg),
                Err(_) => {
                    let manifest: RunManifest = serde_json::from_str(&text)?;
                    Ok(manifest.config)
                }
            }
        }
        (Some(_), Some(_)) => Err(Error::Config(
            "give either --experiment or --config, not both".into(),
        )),
        (None, None) => Err(Error::Config(
            "one of --experiment or --config is required".into(),
        )),
    }
}

/// Builds the steering problem along a converged nominal plan.
pub fn steering_problem(
    config: &ExperimentConfig,
    system: &HybridSystemSpec,
    plan: &NominalPlan,
    lin: &[SegmentLinearization],
) -> Result<HybridSteeringProblem> {
    let sigma0 = config.steering.sigma0.to_matrix()?;
    let sigma_f = config.steering.sigma_f.to_matrix()?;
    let segments = lin.iter().map(|s| s.to_segment(system.dt)).collect();
    let jumps = plan.bundle.events.iter().map(|e| e.xi.clone()).collect();
    let problem = HybridSteeringProblem {
        segments,
        jumps,
        sigma0,
        sigma_f,
        epsilon: config.steering.epsilon,
    };
    problem.validate()?;
    Ok(problem)
}

fn steering_plan_to_feedback(
    config: &ExperimentConfig,
    lin: &[SegmentLinearization],
    solution: &HybridSteeringSolution,
    label: &str,
) -> PlanData {
    let segments = lin
        .iter()
        .zip(&solution.segments)
        .map(|(l, s)| PlanSegmentData {
            span: (l.t0, l.tf),
            gains: ScheduleData::from_schedule(&s.gain_schedule),
            x_nom: ScheduleData::from_schedule(&l.x_nom),
            u_nom: ScheduleData::from_schedule(&l.u_nom),
            sigma_planned: Some(ScheduleData::from_schedule(&s.sigma_schedule)),
        })
        .collect();
    PlanData {
        label: label.to_string(),
        experiment: config.clone(),
        epsilon: config.steering.epsilon,
        sigma0: matrix_to_rows(&solution.segments[0].sigma0),
        segments,
    }
}

/// Baseline plan from the iLQR gains themselves (no covariance targeting),
/// split at the same event boundaries.
pub fn ilqr_baseline_plan(
    config: &ExperimentConfig,
    system: &HybridSystemSpec,
    plan: &NominalPlan,
    lin: &[SegmentLinearization],
) -> Result<PlanData> {
    let dt = system.dt;
    let sigma0 = config.steering.sigma0.to_matrix()?;
    let segments = lin
        .iter()
        .map(|l| {
            let mut times = Vec::new();
            let mut gains = Vec::new();
            for (k, gain) in plan.gains.iter().enumerate() {
                let t = k as f64 * dt;
                if t < l.t0 - 1e-12 || t > l.tf + 1e-12 {
                    continue;
                }
                if gain.ncols() != l.x_nom.first().nrows() {
                    continue;
                }
                if times.last().is_some_and(|&last| t <= last) {
                    continue;
                }
                times.push(t);
                gains.push(gain.clone());
            }
            if times.is_empty() {
                return Err(Error::Config(
                    "no iLQR gains fall inside a segment".into(),
                ));
            }
            Ok(PlanSegmentData {
                span: (l.t0, l.tf),
                gains: ScheduleData::from_schedule(&Schedule::new(times, gains)),
                x_nom: ScheduleData::from_schedule(&l.x_nom),
                u_nom: ScheduleData::from_schedule(&l.u_nom),
                sigma_planned: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlanData {
        label: "hilqr-baseline".into(),
        experiment: config.clone(),
        epsilon: config.steering.epsilon,
        sigma0: matrix_to_rows(&sigma0),
        segments,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

fn write_schedule_csv(path: &Path, schedule: &Schedule) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let rows = schedule.first().nrows();
    let cols = schedule.first().ncols();
    let mut header = String::from("t");
    for i in 0..rows {
        for j in 0..cols {
            header.push_str(&format!(",m{}{}", i + 1, j + 1));
        }
    }
    writeln!(file, "{header}")?;
    for (idx, &t) in schedule.times().iter().enumerate() {
        let m = &schedule.values()[idx];
        let mut line = format!("{t:.12e}");
        for i in 0..rows {
            for j in 0..cols {
                line.push_str(&format!(",{:.12e}", m[(i, j)]));
            }
        }
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn solution_artifact(
    method: &str,
    solution: &HybridSteeringSolution,
    sdp: Option<(&ChainSolution, &HybridSteeringProblem)>,
) -> SolutionData {
    let jumps = solution
        .jumps
        .iter()
        .map(|j| JumpRecordData {
            t_minus: j.t,
            xi: matrix_to_rows(&j.xi),
            sigma_minus: matrix_to_rows(&j.sigma_minus),
            sigma_plus: matrix_to_rows(&j.sigma_plus),
            pi_minus: matrix_to_rows(&j.pi_minus),
            pi_plus: matrix_to_rows(&j.pi_plus),
            pi_jump_residual: (j.xi.transpose() * &j.pi_plus * &j.xi - &j.pi_minus).norm(),
            sigma_jump_residual: (&j.xi * &j.sigma_minus * j.xi.transpose() - &j.sigma_plus)
                .norm(),
        })
        .collect();
    SolutionData {
        method: method.to_string(),
        cost: solution.cost,
        terminal_error: solution.terminal_error(),
        jumps,
        sdp: sdp.map(|(chain, problem)| SdpSolutionData {
            objective: chain.objective,
            iterations: chain.iterations,
            gradient_norm: chain.kkt_residual.gradient_norm,
            min_domain_margin: chain.kkt_residual.min_domain_margin,
            eta_schedule: chain.eta_solutions.iter().map(|(e, _)| *e).collect(),
            sigma_minus: chain.sigma_minus.iter().map(matrix_to_rows).collect(),
            w: chain.w.iter().map(matrix_to_rows).collect(),
            sigma_plus_ranks: (0..problem.jumps.len())
                .map(|i| {
                    let sp = &problem.jumps[i]
                        * &chain.sigma_minus[i]
                        * problem.jumps[i].transpose();
                    rank(&sp, 1e-10)
                })
                .collect(),
        }),
    }
}

/// Full steering pipeline: nominal iLQR, linearization, solver dispatch,
/// artifact writing. Returns the summary it printed.
pub fn cmd_steer(args: &SteerArgs) -> Result<SteerSummary> {
    let config = load_experiment(args)?;
    let mut timings = BTreeMap::new();
    std::fs::create_dir_all(&args.out)?;
    let system = config.system.to_system()?;
    let (x0, ilqr_config) = config.nominal.to_ilqr()?;

    let t0 = Instant::now();
    let nominal = solve_hilqr(&system, &x0, &ilqr_config, system.horizon)?;
    timings.insert("nominal_ilqr".into(), t0.elapsed().as_secs_f64());
    log::info!(
        "nominal trajectory: cost {:.6}, {} events, {} iterations (converged: {})",
        nominal.cost,
        nominal.bundle.events.len(),
        nominal.iterations,
        nominal.converged
    );

    let lin = linearize_along(&nominal, &system)?;
    let problem = steering_problem(&config, &system, &nominal, &lin)?;

    let all_invertible = nominal.bundle.events.iter().all(|e| e.invertible);
    let method_used = match args.method {
        Method::Auto => {
            if all_invertible {
                Method::Analytic
            } else {
                Method::Sdp
            }
        }
        m => m,
    };

    let t1 = Instant::now();
    let (solution, sdp_chain) = match method_used {
        Method::Analytic => {
            if !all_invertible {
                let worst = nominal
                    .bundle
                    .events
                    .iter()
                    .map(|e| e.cond)
                    .fold(0.0, f64::max);
                log::error!(
                    "a saltation matrix is not invertible (condition {worst:.3e} > {INVERTIBILITY_COND_LIMIT:.0e}); use --method sdp"
                );
                return Err(Error::NoninvertibleSaltation { cond: worst });
            }
            let (_, plan) = solve_invertible_path(&problem)?;
            (plan, None)
        }
        Method::Sdp | Method::Auto => {
            let settings = SdpSettings {
                eta_schedule: args.eta.clone(),
                gradient_tol: args.tol.unwrap_or(1e-9),
                max_iterations: args.max_iter.unwrap_or(300),
            };
            let (chain, plan) = solve_general_path(&problem, &settings)?;
            (plan, Some(chain))
        }
    };
    timings.insert("steering_solve".into(), t1.elapsed().as_secs_f64());

    // artifacts
    let mut artifacts = Vec::new();
    let sol_data = solution_artifact(
        &method_used.to_string(),
        &solution,
        sdp_chain.as_ref().map(|c| (c, &problem)),
    );
    let sol_path = args.out.join("solution.json");
    write_json(&sol_path, &sol_data)?;
    artifacts.push("solution.json".to_string());

    for (i, seg) in solution.segments.iter().enumerate() {
        for (name, sched) in [
            ("pi", &seg.pi_schedule),
            ("h", &seg.h_schedule),
            ("sigma", &seg.sigma_schedule),
            ("gain", &seg.gain_schedule),
        ] {
            let fname = format!("segment_{i}_{name}.csv");
            write_schedule_csv(&args.out.join(&fname), sched)?;
            artifacts.push(fname);
        }
    }

    let plan_data = steering_plan_to_feedback(&config, &lin, &solution, "hcs");
    write_json(&args.out.join("plan.json"), &plan_data)?;
    artifacts.push("plan.json".to_string());
    let baseline = ilqr_baseline_plan(&config, &system, &nominal, &lin)?;
    write_json(&args.out.join("plan_ilqr.json"), &baseline)?;
    artifacts.push("plan_ilqr.json".to_string());

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "steer".into(),
        experiment: config.name.clone(),
        method: method_used.to_string(),
        config: config.clone(),
        seed: None,
        samples: None,
        artifacts: artifacts.clone(),
        timings_seconds: timings,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let summary = SteerSummary {
        method_used,
        sigma_minus: solution.jumps.iter().map(|j| j.sigma_minus.clone()).collect(),
        sigma_plus: solution.jumps.iter().map(|j| j.sigma_plus.clone()).collect(),
        cost: solution.cost,
        terminal_error: solution.terminal_error(),
        out_dir: args.out.clone(),
    };
    print_steer_summary(&summary, &solution, &sol_data);
    Ok(summary)
}

fn format_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let cells: Vec<String> = (0..m.ncols()).map(|j| format!("{:+.6}", m[(i, j)])).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn print_steer_summary(
    summary: &SteerSummary,
    solution: &HybridSteeringSolution,
    data: &SolutionData,
) {
    println!("method: {}", summary.method_used);
    println!("expected cost: {:.6}", summary.cost);
    println!("terminal covariance error: {:.3e}", summary.terminal_error);
    for (i, j) in solution.jumps.iter().enumerate() {
        println!("jump {i} at t = {:.6}:", j.t);
        println!("  sigma- = {}", format_matrix(&j.sigma_minus));
        println!("  sigma+ = {}", format_matrix(&j.sigma_plus));
        println!(
            "  |Sigma+ - Xi Sigma- Xi'| = {:.3e}   |Xi' Pi+ Xi - Pi-| = {:.3e}",
            data.jumps[i].sigma_jump_residual, data.jumps[i].pi_jump_residual
        );
    }
    if let Some(sdp) = &data.sdp {
        println!(
            "sdp: objective {:.6}, {} Newton iterations, gradient norm {:.3e}, eta {:?}, rank(sigma+) {:?}",
            sdp.objective, sdp.iterations, sdp.gradient_norm, sdp.eta_schedule, sdp.sigma_plus_ranks
        );
    }
    println!("artifacts in {}", summary.out_dir.display());
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub plan: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub thinning: usize,
}

/// Summary of a simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub label: String,
    pub samples: usize,
    pub seed: u64,
    pub escaped: usize,
    pub terminal_covariance: Vec<Vec<f64>>,
    pub terminal_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_relative_deviation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_coverage: Option<f64>,
    pub mean_event_count: f64,
}

/// Simulates a stored plan and writes the ensemble artifacts.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateSummary> {
    let plan_data: PlanData = serde_json::from_str(&std::fs::read_to_string(&args.plan)?)?;
    let (system, plan) = plan_data.to_feedback_plan()?;
    std::fs::create_dir_all(&args.out)?;
    let config = SimConfig {
        thinning: args.thinning,
        ..SimConfig::new(args.samples, args.seed, plan_data.epsilon)
    };
    let t0 = Instant::now();
    let ensemble = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| simulate_ensemble(&system, &plan, &config)),
        None => simulate_ensemble(&system, &plan, &config),
    }?;
    let elapsed = t0.elapsed().as_secs_f64();

    // ensemble time series
    let mut file = std::fs::File::create(args.out.join("ensemble.csv"))?;
    writeln!(file, "t,count,mean...,cov_rowmajor...")?;
    for (i, &t) in ensemble.times.iter().enumerate() {
        let mut line = format!("{t:.9e},{}", ensemble.counts[i]);
        for v in ensemble.mean[i].iter() {
            line.push_str(&format!(",{v:.9e}"));
        }
        for v in ensemble.covariance[i].iter() {
            line.push_str(&format!(",{v:.9e}"));
        }
        writeln!(file, "{line}")?;
    }
    // per-sample event times
    let mut file = std::fs::File::create(args.out.join("events.csv"))?;
    writeln!(file, "sample,event_index,t")?;
    for (s, events) in ensemble.event_times.iter().enumerate() {
        for (i, t) in events.iter().enumerate() {
            writeln!(file, "{s},{i},{t:.12e}")?;
        }
    }

    let comparison = compare_schedules(&ensemble, &plan).ok();
    let n_events: usize = ensemble.event_times.iter().map(|e| e.len()).sum();
    let summary = SimulateSummary {
        label: plan_data.label.clone(),
        samples: args.samples,
        seed: args.seed,
        escaped: ensemble.escaped,
        terminal_covariance: matrix_to_rows(&ensemble.terminal_covariance),
        terminal_mean: ensemble.terminal_mean.iter().cloned().collect(),
        terminal_relative_deviation: comparison
            .as_ref()
            .map(|c| c.terminal_relative_deviation),
        terminal_coverage: comparison.as_ref().map(|c| c.terminal_coverage),
        mean_event_count: n_events as f64 / args.samples as f64,
    };
    write_json(&args.out.join("summary.json"), &summary)?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "simulate".into(),
        experiment: plan_data.experiment.name.clone(),
        method: plan_data.label.clone(),
        config: plan_data.experiment.clone(),
        seed: Some(args.seed),
        samples: Some(args.samples),
        artifacts: vec![
            "ensemble.csv".into(),
            "events.csv".into(),
            "summary.json".into(),
        ],
        timings_seconds: BTreeMap::from([("simulate".to_string(), elapsed)]),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    println!(
        "{}: {} samples (escaped {}), mean events/sample {:.3}",
        summary.label, summary.samples, summary.escaped, summary.mean_event_count
    );
    if let Some(dev) = summary.terminal_relative_deviation {
        println!("terminal covariance deviation vs plan: {:.4}", dev);
    }
    if let Some(cov) = summary.terminal_coverage {
        println!("terminal 3-sigma tube coverage: {:.4}", cov);
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// verify

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub suite: String,
    pub seed: u64,
}

/// Runs the verification suites; returns whether everything passed.
pub fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let reports = run_suites(&args.suite, args.seed)?;
    let mut all_pass = true;
    for report in &reports {
        println!("suite {}:", report.suite);
        for check in &report.checks {
            let status = if check.pass() { "PASS" } else { "FAIL" };
            println!(
                "  [{status}] {:<48} residual {:10.3e}  (tol {:.1e})",
                check.name, check.residual, check.tolerance
            );
            all_pass &= check.pass();
        }
    }
    Ok(all_pass)
}

// ---------------------------------------------------------------------------
// helpers shared with tests

/// Runs the full steering pipeline in memory (no artifacts) and returns the
/// pieces the integration tests and the book examples reuse.
pub struct PipelineOutput {
    pub system: HybridSystemSpec,
    pub nominal: NominalPlan,
    pub linearization: Vec<SegmentLinearization>,
    pub problem: HybridSteeringProblem,
}

pub fn run_nominal_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let system = config.system.to_system()?;
    let (x0, ilqr_config) = config.nominal.to_ilqr()?;
    let nominal = solve_hilqr(&system, &x0, &ilqr_config, system.horizon)?;
    let linearization = linearize_along(&nominal, &system)?;
    let problem = steering_problem(config, &system, &nominal, &linearization)?;
    Ok(PipelineOutput {
        system,
        nominal,
        linearization,
        problem,
    })
}

/// Builds the in-memory feedback plan of a solved steering solution.
pub fn feedback_plan_from_solution(
    config: &ExperimentConfig,
    lin: &[SegmentLinearization],
    solution: &HybridSteeringSolution,
) -> Result<(FeedbackPlan, PlanData)> {
    let data = steering_plan_to_feedback(config, lin, solution, "hcs");
    let (_, plan) = data.to_feedback_plan()?;
    Ok((plan, data))
}

/// The per-segment steering solutions as plain values (book examples).
pub fn solution_segment(solution: &HybridSteeringSolution, idx: usize) -> &SteeringSolution {
    &solution.segments[idx]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parses() {
        assert_eq!("auto".parse::<Method>().unwrap(), Method::Auto);
        assert_eq!("analytic".parse::<Method>().unwrap(), Method::Analytic);
        assert_eq!("sdp".parse::<Method>().unwrap(), Method::Sdp);
        assert!("x".parse::<Method>().is_err());
    }

    #[test]
    fn schedule_data_roundtrip() {
        let s = Schedule::new(
            vec![0.0, 1.0],
            vec![
                DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
                DMatrix::from_row_slice(2, 1, &[3.0, 4.0]),
            ],
        );
        let data = ScheduleData::from_schedule(&s);
        let back = data.to_schedule().unwrap();
        assert_eq!(back.times(), s.times());
        assert_eq!(back.values()[1], s.values()[1]);
    }
}
