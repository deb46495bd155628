//! `plainnet`: train the reference experiments, check gradients, sample
//! text and replay cart-pole policies.
//!
//! Exit codes: 0 success, 1 verification failure, 2 numeric divergence,
//! 64 usage error.

mod run;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plainnet::Error;

use settings::{Resolved, Settings};

const EXIT_VERIFY: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "plainnet", version, about = "Small hand-written deep-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an experiment: mlp-mnist, cnn-cifar10, lstm-char or qnet-cartpole.
    Train(Box<TrainArgs>),
    /// Compare analytic gradients with finite differences on a small
    /// instance of mlp, cnn, lstm or qnet.
    Gradcheck {
        architecture: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the backward pass of the first layer of this kind (for the
        /// lstm: of this parameter) to confirm the check catches it.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Generate text from a trained lstm-char checkpoint.
    Sample {
        checkpoint: PathBuf,
        /// Characters that prime the state.
        #[arg(long, default_value = "T")]
        prime: String,
        #[arg(long, default_value_t = 200)]
        length: usize,
        /// 0 picks the most likely character every step.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run greedy episodes with a trained qnet-cartpole checkpoint.
    PlayCartpole {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Experiment name; may instead come from the config file.
    experiment: Option<String>,
    /// Flat TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Episode budget for qnet-cartpole.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// sgd, adagrad, rmsprop or adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// Pick the learning rate by short trial runs before training.
    #[arg(long)]
    selective_sgd: bool,
    #[arg(long)]
    trial_iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples (classifiers) or leading characters (lstm-char).
    #[arg(long)]
    subset: Option<usize>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write real epoch durations into metrics.csv (breaks byte-identical
    /// reruns; timing.csv is always written).
    #[arg(long)]
    wall_clock: bool,
}

impl TrainArgs {
    fn settings(&self) -> Result<Settings, Error> {
        let file = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        let flags = Settings {
            experiment: self.experiment.clone(),
            epochs: self.epochs,
            episodes: self.episodes,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            optimizer: self.optimizer.clone(),
            selective_sgd: self.selective_sgd.then_some(true),
            trial_iterations: self.trial_iterations,
            seed: self.seed,
            subset: self.subset,
            precision: self.precision,
            hidden: self.hidden,
            seq_len: self.seq_len,
            data_dir: self.data_dir.clone(),
            out_dir: self.out_dir.clone(),
            wall_clock: self.wall_clock.then_some(true),
            chosen_lr: None,
        };
        Ok(file.overlay(flags))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged(_) | Error::Numeric { .. } | Error::Search(_) => EXIT_DIVERGED,
        Error::Config(_) | Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => EXIT_USAGE,
        Error::Dimension(_) | Error::Index(_) | Error::State(_) => EXIT_VERIFY,
    }
}

fn dispatch(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train(args) => {
            let resolved = Resolved::from_settings(&args.settings()?)?;
            run::train(&resolved)?;
            Ok(0)
        }
        Command::Gradcheck {
            architecture,
            seed,
            corrupt,
        } => Ok(if run::gradcheck(&architecture, seed, corrupt.as_deref())? {
            0
        } else {
            EXIT_VERIFY
        }),
        Command::Sample {
            checkpoint,
            prime,
            length,
            temperature,
            seed,
        } => {
            println!("{}", run::sample_text(&checkpoint, &prime, length, temperature, seed)?);
            Ok(0)
        }
        Command::PlayCartpole {
            checkpoint,
            episodes,
            seed,
        } => {
            let lengths = run::play_cartpole(&checkpoint, episodes, seed)?;
            for (i, l) in lengths.iter().enumerate() {
                println!("episode {} length {l}", i + 1);
            }
            let mean = lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64;
            println!("mean length {mean:.2}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
