//! Command-line front end: dataset generation, partitioning, experiment
//! runs, run comparison, and a numerics self-test.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdfl::dataio::{dirichlet_partition, load_dataset, save_dataset, synth_generate, write_partition_csv, PartitionSpec};
use cdfl::error::{Error, Result};
use cdfl::harness::{report, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cdfl", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Partition a dataset directory across clients (writes partition.csv).
    Partition(PartitionArgs),
    /// Run an experiment from a JSON config file.
    Run(RunArgs),
    /// Compare finished runs into one CSV table.
    Report(ReportArgs),
    /// Check autodiff gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, default_value_t = 50)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct PartitionArgs {
    /// Dataset directory (from gen-data or compatible).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    clients: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output CSV path; defaults to partition.csv inside the dataset dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to summarize.
    #[arg(long = "runs", num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Accuracy target for the rounds-to-target column.
    #[arg(long)]
    target: Option<f64>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random networks to check.
    #[arg(long, default_value_t = 20)]
    networks: usize,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let ds = synth_generate(
        args.num_classes,
        args.samples_per_class,
        args.image_size,
        args.noise,
        args.seed,
    )?;
    save_dataset(&args.out, &ds)?;
    println!(
        "wrote {} samples ({} classes, {}x{}) to {}",
        ds.len(),
        ds.num_classes,
        ds.height,
        ds.width,
        args.out.display()
    );
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<()> {
    let ds = load_dataset(&args.dataset)?;
    let spec = PartitionSpec {
        num_clients: args.clients,
        alpha: args.alpha,
        seed: args.seed,
    };
    let assignment = dirichlet_partition(&ds.labels(), &spec)?;
    let out = args
        .out
        .unwrap_or_else(|| args.dataset.join("partition.csv"));
    write_partition_csv(&out, &ds.ids, &assignment)?;
    let mut counts = vec![0usize; args.clients];
    for &c in &assignment {
        counts[c] += 1;
    }
    println!("wrote {} (client sizes: {counts:?})", out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
        field: "<config file>".into(),
        message: e.to_string(),
    })?;
    let result = run_experiment(&config, Some(&args.out))?;
    let last = result.metrics.last().expect("at least the init row");
    println!(
        "{}: {} rounds, final mean accuracy {:.4} (std {:.4}), total uplink {}",
        config.scheme,
        last.round,
        last.mean_accuracy,
        last.std_accuracy,
        result.ledger.total()
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let csv = report(&args.runs, args.target)?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let max_rel = cdfl::harness::gradcheck_suite(args.networks)?;
    println!("gradcheck: {} networks, max relative error {max_rel:.3e}", args.networks);
    if max_rel >= 1e-4 {
        return Err(Error::invalid(format!(
            "gradient check failed: max relative error {max_rel:.3e} >= 1e-4"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are configuration errors; --help/--version are
            // successes.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
