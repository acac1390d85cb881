use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptdet_cli::ablate::{cmd_ablate, rows_csv};
use promptdet_cli::commands::{cmd_build_cache, cmd_detect, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train};
use promptdet_cli::config::RunConfig;
use promptdet_cli::Failure;

#[derive(Parser)]
#[command(name = "promptdet", version, about = "Prompt-driven object detection on synthetic scenes")]
struct Cli {
    /// JSON run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.tau=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured stages in order.
    Train,
    /// Build the visual prompt cache from the stage 2 checkpoint.
    BuildCache,
    /// Write detections for the test split as JSONL.
    Detect,
    /// Evaluate AP50 and mAP on the test split.
    Eval,
    /// Run the ablation sweeps and write a CSV report.
    Ablate,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Export the dataset to disk.
    GenData,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::BuildCache => cmd_build_cache(&cfg).map(|c| {
            let total: usize = c.categories().map(|k| c.len(k)).sum();
            println!("cached {total} visual prompts");
        }),
        Command::Detect => cmd_detect(&cfg).map(|p| println!("{}", p.display())),
        Command::Eval => cmd_eval(&cfg).map(|m| {
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }),
        Command::Ablate => cmd_ablate(&cfg).map(|rows| print!("{}", rows_csv(&rows))),
        Command::Gradcheck => cmd_gradcheck(&cfg).map(|r| println!("max relative error {:.3e}", r.max_rel_err())),
        Command::GenData => cmd_gen_data(&cfg).map(|d| println!("{}", d.display())),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
