mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use backbone_recon::icp::Method;

#[derive(Parser, Debug)]
#[command(
    name = "backbone-recon",
    version,
    about = "Reconstructs a robot backbone curve from binary camera images"
)]
struct Cli {
    /// Caps the worker pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Renders the scenario's ground truth into binary images.
    Simulate(SimulateArgs),
    /// Fits the curve to binary images.
    Reconstruct(ReconstructArgs),
    /// Runs the epipolar warm start on its own.
    Warmstart(WarmstartArgs),
    /// Compares curves, or runs a repeated-seed experiment with --seeds.
    Evaluate(EvaluateArgs),
    /// Collects run reports into one CSV for box plots.
    ExportPlot(ExportPlotArgs),
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario JSON. The built-in default scenario is used when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Camera rig JSON replacing the scenario's cameras.
    #[arg(long)]
    calib: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Overrides the scenario's dilation radius, in pixels.
    #[arg(long)]
    dilation_radius: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long)]
    solver_config: Option<PathBuf>,
    /// Overrides the configured method.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Overrides the configured p-norm exponent.
    #[arg(long)]
    p: Option<f64>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    OneStep,
    MultiStep,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::OneStep => Method::OneStep,
            MethodArg::MultiStep => Method::MultiStep,
        }
    }
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// One PGM per camera, in rig order.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// `none`, `epipolar` or `file:PATH` with `s_mm,x_mm,y_mm,z_mm` rows.
    #[arg(long, default_value = "none")]
    warmstart: String,
    /// Warm-start settings JSON.
    #[arg(long)]
    warmstart_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WarmstartArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    warmstart_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Reconstruction samples (`recon.csv`).
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Ground-truth samples (`truth.csv`).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Sparse measured points; scored against --recon.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Runs the full pipeline this many times.
    #[arg(long)]
    seeds: Option<usize>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// `none` or `epipolar`, for --seeds runs.
    #[arg(long, default_value = "none")]
    warmstart: String,
    /// Experiment settings JSON (warm start, calibration error), for --seeds runs.
    #[arg(long)]
    experiment_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportPlotArgs {
    /// `NAME=PATH` of a run report JSON; repeatable.
    #[arg(long = "report", required = true)]
    reports: Vec<String>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BACKBONE_RECON_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Warmstart(a) => commands::warmstart(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ExportPlot(a) => commands::export_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
