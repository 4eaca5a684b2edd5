//! dialdiff: dialog-to-image diffusion runs from the command line.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use dialdiff_core::error::Error as CoreError;

const STRATEGIES: [&str; 4] = ["hash_prefix", "space_join", "speaker_token", "speaker_letter"];

/// Exit codes: 0 success, 2 usage (via clap), 3 data error, 4 numerical
/// failure.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        if core.is_numerical() {
            return 4;
        }
    }
    3
}

#[derive(Parser)]
#[command(name = "dialdiff", version, about = "Dialog-to-image diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ShapeTalk-lite synthetic corpus to disk.
    GenData {
        /// Total number of dialog-image samples.
        #[arg(long, default_value_t = 448)]
        n: usize,
        /// Samples assigned to the training split; the rest are test.
        #[arg(long, default_value_t = 384)]
        n_train: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate, tokenize and write the prepared corpus + vocabulary.
    Prep {
        /// Dataset JSONL file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "hash_prefix", value_parser = STRATEGIES)]
        strategy: String,
        /// Which end survives truncation: head or tail.
        #[arg(long, default_value = "head", value_parser = ["head", "tail"])]
        keep: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint noise predictor on ShapeTalk-lite.
    Train {
        /// Run config JSON; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config strategy.
        #[arg(long, value_parser = STRATEGIES)]
        strategy: Option<String>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images conditioned on dialogs from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dialog JSONL file to condition on.
        #[arg(long)]
        dialogs: PathBuf,
        /// Vocabulary file; defaults to vocab.txt next to the checkpoint's
        /// run directory.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// ancestral or dpm.
        #[arg(long, default_value = "dpm", value_parser = ["ancestral", "dpm"])]
        sampler: String,
        /// Solver steps (dpm); ancestral always uses the full schedule.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute toy-FID / toy-IS between two image directories.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Trained eval classifier checkpoint.
        #[arg(long)]
        classifier: PathBuf,
        /// Label for the CSV variant column.
        #[arg(long, default_value = "eval")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the metric classifier and write its checkpoint.
    TrainClassifier {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per concatenation strategy.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse an existing classifier checkpoint instead of training one.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    dialdiff_core::par::init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { n, n_train, seed, out } => commands::gen_data(n, n_train, seed, &out),
        Command::Prep {
            dataset,
            strategy,
            keep,
            out,
        } => commands::prep(&dataset, &strategy, &keep, &out),
        Command::Train {
            config,
            seed,
            strategy,
            resume,
            out,
        } => commands::train(config.as_deref(), seed, strategy.as_deref(), resume.as_deref(), &out),
        Command::Sample {
            checkpoint,
            dialogs,
            vocab,
            sampler,
            steps,
            seed,
            out,
        } => commands::sample(&checkpoint, &dialogs, vocab.as_deref(), &sampler, steps, seed, &out),
        Command::Eval {
            real,
            gen,
            classifier,
            variant,
            out,
        } => commands::eval(&real, &gen, &classifier, &variant, &out),
        Command::TrainClassifier { seed, out } => commands::train_classifier(seed, &out),
        Command::Ablate {
            config,
            seed,
            classifier,
            out,
        } => commands::ablate(config.as_deref(), seed, classifier.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
