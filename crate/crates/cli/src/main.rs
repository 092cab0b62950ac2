use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairssl::pipeline::{self, PipelineConfig, Stage};
use fairssl::synth::{self, WorldConfig};
use fairssl::{Error, Result};

/// Label-free fair representation learning over precomputed embeddings.
#[derive(Parser)]
#[command(name = "fairssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Deduplicate the pool, retrieve neighbors and write the augmented set.
    Curate(RunArgs),
    /// Zero-shot pseudo-labels and the validation subset.
    Pseudolabel(RunArgs),
    /// Stage 1: contrastive pretraining.
    Pretrain(RunArgs),
    /// Stage 2: meta-weighted training from the stage 1 checkpoint.
    TrainMeta(RunArgs),
    /// Fit the linear probe and write test predictions.
    Probe(RunArgs),
    /// Compute fairness metrics; prints the report as JSON.
    Evaluate(RunArgs),
    /// All stages in order.
    Pipeline(RunArgs),
    /// Write a synthetic demo dataset and a config that runs on it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set trainer.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of uncurated pool rows.
    #[arg(long)]
    pool_size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let (name, args, stages): (&str, RunArgs, &[Stage]) = match command {
        Command::Curate(a) => ("curate", a, &[Stage::Curate]),
        Command::Pseudolabel(a) => ("pseudolabel", a, &[Stage::Pseudolabel]),
        Command::Pretrain(a) => ("pretrain", a, &[Stage::Pretrain]),
        Command::TrainMeta(a) => ("train-meta", a, &[Stage::TrainMeta]),
        Command::Probe(a) => ("probe", a, &[Stage::Probe]),
        Command::Evaluate(a) => ("evaluate", a, &[Stage::Evaluate]),
        Command::Pipeline(a) => ("pipeline", a, &Stage::ALL),
        Command::Synth(a) => return write_synth(a),
    };
    let cfg = load_config(&args)?;
    let summary = pipeline::run(&cfg, name, stages)?;
    if let Some(report) = summary.report {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        println!("{json}");
    }
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = args.workers {
        overrides.push(format!("workers={w}"));
    }
    let mut cfg = PipelineConfig::load(&args.config, &overrides)?;
    if let Some(out) = &args.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_synth(args: SynthArgs) -> Result<()> {
    let mut world = WorldConfig::default();
    if let Some(n) = args.pool_size {
        world.pool_size = n;
    }
    let ds = synth::generate(&world, args.seed)?;
    let path = synth::write_dataset(&ds, &args.dir, args.seed)?;
    println!("{}", path.display());
    Ok(())
}
