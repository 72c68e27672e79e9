use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hybrid_cs::cli::{self, Method, SimulateArgs, SteerArgs, VerifyArgs};

/// Covariance steering for linear stochastic systems with hybrid transitions.
#[derive(Parser)]
#[command(name = "hcs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a steering problem and write the plan artifacts.
    Steer(SteerCli),
    /// Monte-Carlo simulate a stored plan.
    Simulate(SimulateCli),
    /// Run the numerical verification suites.
    Verify(VerifyCli),
}

#[derive(Args)]
struct SteerCli {
    /// Shipped experiment preset (bouncing-ball | slip).
    #[arg(long)]
    experiment: Option<String>,
    /// Experiment configuration file (or a manifest from a previous run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Solver dispatch: auto | analytic | sdp.
    #[arg(long, default_value = "auto")]
    method: String,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Explicit eta-continuation values for the SDP path.
    #[arg(long, value_delimiter = ',')]
    eta: Vec<f64>,
    /// SDP gradient tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// SDP iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct SimulateCli {
    /// Plan file written by `hcs steer` (plan.json or plan_ilqr.json).
    #[arg(long)]
    plan: PathBuf,
    /// Ensemble size.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Master seed; per-sample streams derive from it deterministically.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out-sim")]
    out: PathBuf,
    /// Worker threads (defaults to all cores; results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Keep every n-th grid node in the ensemble output.
    #[arg(long, default_value_t = 10)]
    thinning: usize,
}

#[derive(Args)]
struct VerifyCli {
    /// Which suite to run: kernels | riccati | sdp | all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HCS_LOG_LEVEL", "warn"))
        .init();
    let cli = Cli::parse();
    let outcome: Result<i32, hybrid_cs::Error> = match cli.command {
        Command::Steer(a) => match a.method.parse::<Method>() {
            Err(e) => Err(e),
            Ok(method) => cli::cmd_steer(&SteerArgs {
                experiment: a.experiment,
                config: a.config,
                method,
                out: a.out,
                eta: a.eta,
                tol: a.tol,
                max_iter: a.max_iter,
            })
            .map(|_| 0),
        },
        Command::Simulate(a) => cli::cmd_simulate(&SimulateArgs {
            plan: a.plan,
            samples: a.samples,
            seed: a.seed,
            out: a.out,
            threads: a.threads,
            thinning: a.thinning,
        })
        .map(|_| 0),
        Command::Verify(a) => cli::cmd_verify(&VerifyArgs {
            suite: a.suite,
            seed: a.seed,
        })
        .map(|pass| if pass { 0 } else { 4 }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            // machine-readable error on stderr alongside the log line
            log::error!("{e}");
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "exit_code": e.exit_code() })
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
