use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trimodal::io::commands;

#[derive(Parser)]
#[command(name = "trimodal", version, about = "Train and run a vision-language-speech encoder-decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multitask pretraining from scratch.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue training a checkpoint on downstream data.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate one output line per input record.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score generations against references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Comma-separated metric names.
        #[arg(long)]
        metrics: String,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> trimodal::Result<()> {
    match cli.command {
        Command::Pretrain { config } => {
            let o = commands::pretrain(&config)?;
            println!("{} steps, checkpoint {}", o.steps, o.checkpoint.display());
        }
        Command::Finetune { config, checkpoint } => {
            let o = commands::finetune(&config, &checkpoint)?;
            println!("{} steps, checkpoint {}", o.steps, o.checkpoint.display());
        }
        Command::Generate {
            config,
            checkpoint,
            input,
            output,
        } => {
            let n = commands::generate(&config, &checkpoint, &input, &output)?;
            println!("{n} generations written to {}", output.display());
        }
        Command::Eval {
            hyp,
            reference,
            metrics,
            out,
        } => {
            let report = commands::eval(&hyp, &reference, &metrics, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Synth { spec, out } => {
            let files = commands::synth(&spec, &out)?;
            println!("{} record files written to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
