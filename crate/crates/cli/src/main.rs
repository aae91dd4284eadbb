//! `synthmetric` command-line interface.
//!
//! Each subcommand reads the files named on its command line, writes the
//! files it declares, and prints the run's config hash first.

mod artifact;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use synthmetric::evalstats::AblationMode;

use commands::Run;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "synthmetric", version, about = "Pre-trained learned metric for comparing candidate sentences against references")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print the default configuration and exit.
    #[arg(long)]
    dump_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SingleTask,
    LeaveOneOut,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled demo corpus and rated candidates.
    DemoData {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate synthetic (sentence, perturbation) pairs from a corpus.
    GenPairs {
        /// One sentence per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use an existing vocabulary instead of building one.
        #[arg(long, conflicts_with_all = ["vocab_out", "extra_text"])]
        vocab: Option<PathBuf>,
        /// Where to write the vocabulary built from the corpus.
        #[arg(long, required_unless_present = "vocab")]
        vocab_out: Option<PathBuf>,
        /// Ratings files whose sentences also enter the vocabulary.
        #[arg(long)]
        extra_text: Vec<PathBuf>,
    },
    /// Attach pre-training signals to synthetic pairs.
    ComputeSignals {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-task pre-training on a signals file.
    Pretrain {
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fine-tune on human ratings.
    Finetune {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score every record of a ratings file; multi-reference records get
    /// their best per-reference score.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agreement between human ratings and predictions.
    Evaluate {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a low-rating-skewed train sample and a high-rating-skewed test sample.
    SkewSplit {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Per-task contribution of pre-training signals.
    Ablate {
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// JSON table; a CSV copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.dump_defaults {
        print!("{}", RunConfig::dump_defaults());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()));
    };
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--jobs {n}: {e}")))?;
    }
    let config = RunConfig::resolve(cli.config.as_deref())?;
    let run = Run {
        hash: config.hash(),
        config,
    };
    println!("config_hash\t{}", run.hash);
    match command {
        Command::DemoData { out_dir } => commands::demo_data(&run, &out_dir),
        Command::GenPairs {
            corpus,
            out,
            vocab,
            vocab_out,
            extra_text,
        } => commands::gen_pairs(&run, &corpus, &out, vocab.as_deref(), vocab_out.as_deref(), &extra_text),
        Command::ComputeSignals { pairs, vocab, out } => commands::compute_signals(&run, &pairs, &vocab, &out),
        Command::Pretrain {
            signals,
            vocab,
            init,
            out,
            manifest,
        } => commands::pretrain_cmd(&run, &signals, &vocab, init.as_deref(), &out, manifest.as_deref()),
        Command::Finetune {
            ratings,
            vocab,
            init,
            out,
            manifest,
        } => commands::finetune_cmd(&run, &ratings, &vocab, init.as_deref(), &out, manifest.as_deref()),
        Command::Predict {
            model,
            vocab,
            input,
            out,
        } => commands::predict(&run, &model, &vocab, &input, &out),
        Command::Evaluate {
            ratings,
            predictions,
            out,
        } => commands::evaluate(&run, &ratings, &predictions, out.as_deref()),
        Command::SkewSplit {
            ratings,
            train_out,
            test_out,
        } => commands::skew_split_cmd(&run, &ratings, &train_out, &test_out),
        Command::Ablate {
            signals,
            ratings,
            vocab,
            mode,
            out,
        } => {
            let mode = match mode {
                Mode::SingleTask => AblationMode::SingleTask,
                Mode::LeaveOneOut => AblationMode::LeaveOneOut,
            };
            commands::ablate(&run, &signals, &ratings, &vocab, mode, &out)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
