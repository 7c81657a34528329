use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vitro::config::RunConfig;
use vitro::pipeline;

#[derive(Parser)]
#[command(name = "vitro", version, about = "Two-stage vocabulary-inversion forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run config file (key = value lines); omit to use built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage-2 forecaster
    #[arg(long, value_parser = ["sim", "attn"])]
    mode: Option<String>,
    /// Master run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the pseudo-word vocabulary (stage 1)
    TrainStage1(CommonArgs),
    /// Train a forecaster on the learned vocabulary (stage 2)
    TrainStage2(CommonArgs),
    /// Batch-forecast the test split with a stage-2 checkpoint
    Predict(CommonArgs),
    /// Full pipeline per horizon: train both stages and report test metrics
    Eval(CommonArgs),
    /// Learned vocabulary vs. a random frozen one, all else identical
    CompareVocab(CommonArgs),
    /// Write the vocabulary embedding CSV + checkpoint container
    ExportEmbeddings(CommonArgs),
    /// Print the documented default config
    DefaultConfig,
}

fn load_config(args: &CommonArgs) -> vitro::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_trace_tail(path: &std::path::Path) {
    if let Ok(text) = std::fs::read_to_string(path) {
        if let Some(last) = text.lines().last() {
            println!("final step: {last}");
        }
    }
}

fn run() -> vitro::Result<()> {
    match Cli::parse().command {
        Command::TrainStage1(args) => {
            let cfg = load_config(&args)?;
            let path = pipeline::cmd_train_stage1(&cfg)?;
            println!("stage-1 checkpoint: {}", path.display());
            print_trace_tail(&cfg.out_dir.join("stage1_loss.csv"));
        }
        Command::TrainStage2(args) => {
            let cfg = load_config(&args)?;
            let path = pipeline::cmd_train_stage2(&cfg)?;
            println!("stage-2 checkpoint: {}", path.display());
            print_trace_tail(&cfg.out_dir.join("stage2_loss.csv"));
        }
        Command::Predict(args) => {
            let cfg = load_config(&args)?;
            let path = pipeline::cmd_predict(&cfg)?;
            println!("forecasts: {}", path.display());
        }
        Command::Eval(args) => {
            let cfg = load_config(&args)?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            print!("{}", outcome.report.to_csv());
            println!("metrics: {}", cfg.out_dir.join("metrics.csv").display());
        }
        Command::CompareVocab(args) => {
            let cfg = load_config(&args)?;
            let outcome = pipeline::compare_vocab(&cfg)?;
            print!("{}", outcome.to_csv());
            println!("comparison: {}", cfg.out_dir.join("compare.csv").display());
        }
        Command::ExportEmbeddings(args) => {
            let cfg = load_config(&args)?;
            let (csv, ckpt) = pipeline::cmd_export_embeddings(&cfg)?;
            println!("embeddings: {} and {}", csv.display(), ckpt.display());
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default_file_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
