use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recap_cli::commands::{self, DatastoreArgs, EvalArgs, TrainArgs};
use recap_cli::experiment;
use recap_core::corpus::Split;

#[derive(Parser)]
#[command(name = "recap", version, about = "Retrieval-augmented captioning on a synthetic audio corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON Lines.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Embed the captions of one split into a datastore file.
    BuildDatastore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Merge an existing datastore into the output; repeatable.
        #[arg(long)]
        merge: Vec<PathBuf>,
    },
    /// Train a captioner; writes a checkpoint and loss curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        datastore: Option<PathBuf>,
    },
    /// Caption a split with a checkpoint and score the output.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the regime by datastore matrix and print the comparison table.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenCorpus { common } => commands::gen_corpus(common.config.as_deref(), common.seed, &common.out),
        Command::BuildDatastore { common, dataset, split, merge } => commands::build_datastore(
            common.config.as_deref(),
            common.seed,
            &common.out,
            DatastoreArgs { dataset, split, merge },
        ),
        Command::Train { common, dataset, datastore } => commands::train(
            common.config.as_deref(),
            common.seed,
            &common.out,
            TrainArgs { dataset, datastore },
        ),
        Command::Evaluate { common, checkpoint, dataset, datastore, k } => commands::evaluate(
            common.config.as_deref(),
            common.seed,
            &common.out,
            EvalArgs { checkpoint, dataset, datastore, k },
        ),
        Command::Experiment { common } => {
            experiment::experiment(common.config.as_deref(), common.seed, &common.out, |line| eprintln!("{line}"))
        }
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
