//! `convcap`: synthetic data, training, captioning, evaluation and analysis.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use settings::ModelChoice;

/// Default output root when `--out` is omitted; each subcommand writes to
/// `$CONVCAP_OUT_ROOT/<subcommand>`.
pub const OUT_ROOT_ENV: &str = "CONVCAP_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "convcap", version, about = "Convolutional image captioning toolkit")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Cnn,
    Lstm,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic captioning corpus with features.
    Synth {
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a captioner on a data directory.
    Train {
        #[arg(long, value_enum)]
        model: ModelChoice,
        /// Directory holding corpus.tsv, features.ccf and optionally vocab.txt.
        #[arg(long)]
        data: PathBuf,
        /// Flat key = value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the `seed` config key.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write ranked captions for every image in a feature file.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Output file; defaults to captions.tsv under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to vocab.txt beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Corpus BLEU-1..4 of beam-search captions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy, accuracy, gradient-norm and diversity tables for one or two
    /// checkpoints; two give a CNN-vs-LSTM comparison.
    Analyze {
        #[arg(long, required = true, num_args = 1..=2)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        /// Examples used for the gradient-norm probe.
        #[arg(long, default_value_t = 16)]
        probe: usize,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Images decoded for the diversity table (all when omitted).
        #[arg(long)]
        max_images: Option<usize>,
        /// Fail unless a single checkpoint holds this model kind.
        #[arg(long, value_enum)]
        expect: Option<KindArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth { scenes, seed, out } => commands::synth(scenes, seed, out),
        Command::Train {
            model,
            data,
            config,
            out,
            seed,
            resume,
        } => commands::train(commands::TrainArgs {
            model,
            data,
            config,
            out,
            seed,
            resume,
        }),
        Command::Caption {
            ckpt,
            features,
            beam,
            out,
            vocab,
        } => commands::caption(&ckpt, &features, beam, out, vocab),
        Command::Eval {
            ckpt,
            data,
            beam,
            split,
            val_fraction,
            vocab,
            out,
        } => commands::eval(commands::EvalArgs {
            ckpt,
            data,
            beam,
            split,
            val_fraction,
            vocab,
            out,
        }),
        Command::Analyze {
            ckpt,
            data,
            beam,
            probe,
            split,
            val_fraction,
            max_images,
            expect,
            out,
        } => commands::analyze(commands::AnalyzeArgs {
            ckpts: ckpt,
            data,
            beam,
            probe,
            split,
            val_fraction,
            max_images,
            expect,
            out,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
