//! The `lvat` command-line tool: transformer pre-training, classifier
//! training, adversarial example generation, evaluation and the gradient
//! oracle.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "lvat", version, about = "Virtual adversarial training in input and latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration JSON; defaults apply to every omitted key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set regularizer.epsilon=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Runs a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.set)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compares every analytic gradient with central finite differences.
    Gradcheck {
        /// Falsifies the analytic gradient of the named case.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Fits the VAE or flow on the training inputs.
    TrainTransformer {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Trains the classifier for every seed and writes a summary.
    TrainClassifier {
        #[command(flatten)]
        run: RunArgs,
        /// Transformer checkpoint, overriding `transformer.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Writes per-sample adversarial distances and costs.
    GenAdv {
        #[command(flatten)]
        run: RunArgs,
        /// Classifier checkpoint; defaults to the one trained with the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of training inputs to perturb, drawn with replacement
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Also writes a histogram of input-space distances.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Error rate of a classifier checkpoint on a labeled dataset CSV.
    Eval {
        /// Classifier checkpoint written by `train-classifier`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV with feature columns followed by a `label` column
        #[arg(long)]
        data: PathBuf,
        /// Directory for `eval.json`; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gradcheck { corrupt } => commands::report_gradcheck(&commands::gradcheck(corrupt.as_deref())?),
        Command::TrainTransformer { run } => {
            let s = commands::train_transformer(&run.resolve()?, run.seed)?;
            println!(
                "{} held-out loss {} -> {}, mean reconstruction distance {}",
                s.kind, s.initial_held_out_loss, s.final_held_out_loss, s.mean_reconstruction_distance
            );
            Ok(())
        }
        Command::TrainClassifier { run, checkpoint } => {
            let s = commands::train_classifier(&run.resolve()?, run.seed, checkpoint.as_deref())?;
            for r in &s.runs {
                println!("seed {}: test error {}", r.seed, r.final_test_error);
            }
            println!("{} mean {} std {}", s.mode, s.final_test_error, s.std_test_error);
            Ok(())
        }
        Command::GenAdv { run, checkpoint, n, bins } => {
            let rows = commands::gen_adv(&run.resolve()?, run.seed, checkpoint.as_deref(), n, bins)?;
            println!("{} adversarial examples written", rows.len());
            Ok(())
        }
        Command::Eval { checkpoint, data, out } => {
            let r = commands::eval(&checkpoint, &data, out.as_deref())?;
            println!("n {} errors {} error_rate {}", r.n, r.errors, r.error_rate);
            Ok(())
        }
    }
}
