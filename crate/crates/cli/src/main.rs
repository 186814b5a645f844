//! `mosaic`: profile, fit, plan, simulate and benchmark multimodal training
//! deployments on a simulated GPU cluster.

mod commands;
mod error;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "mosaic", version, about = "Temporal-spatial GPU multiplexing planner for multimodal training")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scaling surfaces and colocation samples for a workload.
    Profile(ProfileArgs),
    /// Fit the contention model to colocation samples.
    Fit(FitArgs),
    /// Compute a deployment plan.
    Plan(PlanArgs),
    /// Replay a plan or a baseline on the simulated cluster.
    Simulate(SimulateArgs),
    /// Compare the planner against exhaustive search on random instances.
    Oracle(OracleArgs),
    /// Run a benchmark suite and write its CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// clip, qwen3vl, imagebind, unifiedio2, ofasys or custom.
    #[arg(long)]
    pub preset: String,
    /// Workload file, required with `--preset custom`.
    #[arg(long)]
    pub workloads: Option<PathBuf>,
    /// Number of encoders to keep (imagebind, ofasys).
    #[arg(long)]
    pub modules: Option<usize>,
    /// Cluster file; overrides `--gpus`.
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub gpus: usize,
    /// Colocation samples to draw.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Sigma of the log-normal measurement noise on contention delays.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub max_colocated: usize,
    #[arg(long, env = "MOSAIC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Profiles output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the module graph here.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Also write the cluster here.
    #[arg(long)]
    pub cluster_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub profiles: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Leave each module out of its own GPU's contention terms.
    #[arg(long)]
    pub exclude_self: bool,
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub profiles: PathBuf,
    #[arg(long)]
    pub interference: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[arg(long, default_value_t = 0.1)]
    pub granularity: f64,
    /// Evaluate every legal merge instead of skipping hopeless ones.
    #[arg(long)]
    pub no_prune: bool,
    /// Re-evaluate stages instead of reusing earlier results.
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Solver trace output.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Plan to replay.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    pub plan: Option<PathBuf>,
    /// Replay a baseline instead: megatron or distmm.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Quota lattice for baselines.
    #[arg(long, default_value_t = 0.1)]
    pub granularity: f64,
    /// pooled or on_demand.
    #[arg(long, default_value = "pooled")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub iters: usize,
    #[arg(long, env = "MOSAIC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Sigma of the log-normal perturbation of module durations.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Timeline CSV output.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// First instance seed.
    #[arg(long, env = "MOSAIC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Module counts, cycled over seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub modules: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub gpus: usize,
    #[arg(long, default_value_t = 0.25)]
    pub granularity: f64,
    /// CSV output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// optimality, scale, granularity or ablation.
    pub suite: String,
    /// Instances (optimality) or fitting seeds (ablation).
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long, env = "MOSAIC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Preset for scale, granularity and ablation.
    #[arg(long)]
    pub preset: Option<String>,
    /// Cluster sizes for scale.
    #[arg(long, value_delimiter = ',')]
    pub gpus: Vec<usize>,
    /// Timed solves per granularity level.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// CSV output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Profile(a) => commands::profile(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Oracle(a) => commands::oracle(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
