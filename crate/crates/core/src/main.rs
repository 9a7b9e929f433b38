//! Command-line entry point for running evaluation rounds and reading back
//! their metrics.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data errors
//! (missing or corrupt files), 1 for anything else.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::time::Duration;
use zkpfedeval::harness::{
    fixtures, linear_fit, read_rows_csv, render_summary, run_experiment, scaling_run, summarize,
    write_rows_csv, BackendChoice, Dataset, DistributionKind, ExperimentConfig, HarnessError,
    MetricsRow, TransportKind,
};
use zkpfedeval::protocol::DEFAULT_BATCH_SIZE;

#[derive(Parser)]
#[command(
    name = "zkpfedeval",
    about = "Federated evaluation rounds with zero-knowledge threshold proofs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (one round per seed) and write a metrics CSV.
    Run(RunArgs),
    /// Run the verification-scaling sweep over several client counts.
    Scaling(ScalingArgs),
    /// Print a per-(dataset, client-count) summary table of a metrics CSV.
    Summarize {
        /// Metrics CSV produced by `run` or `scaling`.
        csv: PathBuf,
    },
    /// Generate the synthetic datasets (IDX images + activity windows).
    GenFixtures {
        /// Directory to write `mnist/` and `har/` under.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Generator seed; files are byte-identical per seed.
        #[arg(long, default_value_t = fixtures::DEFAULT_SEED)]
        seed: u64,
    },
}

#[derive(Args)]
struct CommonRunArgs {
    /// Dataset: mnist or har.
    #[arg(long)]
    dataset: Dataset,
    /// Loss threshold clients must beat to submit a proof.
    #[arg(long)]
    threshold: f64,
    /// Seeds, one round each (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Shard distribution: iid or noniid:ALPHA (Dirichlet).
    #[arg(long, default_value = "iid")]
    dist: DistributionKind,
    /// Proof backend: snark (Groth16 over BLS12-381) or mock (tests only).
    #[arg(long, default_value = "snark")]
    backend: BackendChoice,
    /// Transport: inproc or tcp (localhost, framed wire format).
    #[arg(long, default_value = "inproc")]
    transport: TransportKind,
    /// Directory holding `mnist/` and `har/` data files.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Evaluation batch size.
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Seconds to wait for each TCP client response.
    #[arg(long, default_value_t = 120)]
    response_timeout_s: u64,
    /// Where to write the metrics CSV.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Number of clients.
    #[arg(long)]
    clients: usize,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Client counts to sweep (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
    clients: Vec<usize>,
}

fn experiment_config(common: &CommonRunArgs, n_clients: usize) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(
        common.dataset,
        n_clients,
        common.threshold,
        common.seeds.clone(),
    );
    config.distribution = common.dist;
    config.backend = common.backend;
    config.transport = common.transport;
    config.batch_size = common.batch_size;
    config.data_dir = common.data_dir.clone();
    config.response_timeout = Duration::from_secs(common.response_timeout_s);
    config
}

fn finish(rows: Vec<MetricsRow>, out: &PathBuf) -> Result<(), HarnessError> {
    write_rows_csv(out, &rows)?;
    println!("{}", render_summary(&summarize(&rows)));
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn real_main() -> Result<(), HarnessError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let config = experiment_config(&args.common, args.clients);
            let rows = run_experiment(&config)?;
            finish(rows, &args.common.out)
        }
        Command::Scaling(args) => {
            let config = experiment_config(&args.common, 1);
            let rows = scaling_run(&config, &args.clients)?;
            // Scaling headline: total sequential verify time against the
            // client count should fit a line.
            let points: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (r.n_clients as f64, r.total_verify_time_s))
                .collect();
            if let Some(fit) = linear_fit(&points) {
                println!(
                    "verify-time fit: {:.6} s/client + {:.6} s (R^2 = {:.4})",
                    fit.slope, fit.intercept, fit.r_squared
                );
            }
            finish(rows, &args.common.out)
        }
        Command::Summarize { csv } => {
            let rows = read_rows_csv(&csv)?;
            println!("{}", render_summary(&summarize(&rows)));
            Ok(())
        }
        Command::GenFixtures { data_dir, seed } => {
            fixtures::generate(&data_dir, seed)?;
            println!("wrote synthetic datasets under {}", data_dir.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    if let Err(err) = real_main() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
