mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Mean-field analysis of CSMA networks with class-structured interference.
#[derive(Parser, Debug)]
#[command(name = "csma-mf", version, about)]
pub struct Cli {
    /// Network description (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Write the main output here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Output format; each command has its own default.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Suppress diagnostics on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "CSMA_MF_THREADS", value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the stationary mean-field equations.
    Stationary(StationaryArgs),
    /// Integrate the mean-field ODE.
    Ode(OdeArgs),
    /// Run the N-user slot simulation.
    Simulate(SimulateArgs),
    /// Sweep one parameter over a grid.
    Sweep(SweepArgs),
    /// Validate the config and check the domination criterion.
    Check,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Fixed-point tolerance on the attempt intensities.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0.5)]
    pub damping: f64,
    /// Environment kernel: consistent or verbatim.
    #[arg(long, default_value = "consistent")]
    pub kernel: String,
}

#[derive(Args, Debug)]
pub struct StationaryArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Random-start probes used to check uniqueness.
    #[arg(long, default_value_t = 5)]
    pub probes: usize,
    /// Use the full-interference closed form instead of the iteration.
    #[arg(long)]
    pub closed_form: bool,
    /// Also write the environment kernel at the solution (CSV).
    #[arg(long, value_name = "PATH")]
    pub dump_kernel: Option<PathBuf>,
    /// Also write the environment law at the solution (CSV).
    #[arg(long, value_name = "PATH")]
    pub dump_pi: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OdeArgs {
    /// Mean-field horizon.
    #[arg(long = "T", default_value_t = 2000.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    /// Initial mixture: `level0`, `fixedpoint`, or a JSON file holding per-class level masses.
    #[arg(long, default_value = "level0")]
    pub init: String,
    /// Keep every this many steps.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    /// Also write the `t,class,rho` summary CSV.
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Number of users.
    #[arg(long = "N", default_value_t = 200)]
    pub n_users: usize,
    /// Mean-field horizon; the run lasts ceil(T N) slots.
    #[arg(long = "T", default_value_t = 500.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fraction of slots discarded before averaging.
    #[arg(long, default_value_t = 0.2)]
    pub burnin: f64,
    /// Draw user classes independently instead of by rounding.
    #[arg(long)]
    pub iid: bool,
    /// Add per-class differences to the fixed point.
    #[arg(long)]
    pub compare: bool,
    /// Write the environment state every `--trace-stride` slots to this CSV.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub trace_stride: u64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// mu2, L, p0 or N.
    #[arg(long)]
    pub param: String,
    /// `start:stop:count` or a comma-separated list.
    #[arg(long)]
    pub grid: String,
    /// Comma-separated subset of fixedpoint, ode, simulate.
    #[arg(long, default_value = "fixedpoint")]
    pub methods: String,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// ODE horizon.
    #[arg(long = "T", default_value_t = 2000.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    /// Simulated users.
    #[arg(long = "N", default_value_t = 200)]
    pub n_users: usize,
    /// Simulation horizon.
    #[arg(long = "sim-T", default_value_t = 500.0)]
    pub sim_horizon: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub burnin: f64,
    /// Write a gnuplot script for the output CSV.
    #[arg(long, value_name = "PATH")]
    pub gnuplot: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        // a pool that is already set up is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let code = commands::exit_code(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
