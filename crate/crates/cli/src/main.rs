//! `posattn`: prepare corpora, train, translate, probe, score and run the
//! comparison experiments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posattn::Error;

#[derive(Parser)]
#[command(name = "posattn", version, about = "Position-aware transformer for document-level translation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Knobs shared by every subcommand. Explicit flags win over `--set`,
/// which wins over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Canonical key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any dotted key, e.g. `--set model.d_model=32`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// sent, doc2sent or doc2doc
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Serialized-length limit for sub-documents
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    lenpen: Option<f64>,
    #[arg(long, global = true)]
    max_len_a: Option<f64>,
    #[arg(long, global = true)]
    max_len_b: Option<usize>,
    /// Encoder layer to probe (0 is the embedded input)
    #[arg(long, global = true)]
    layer: Option<usize>,
    /// absolute, relative or order
    #[arg(long, global = true)]
    task: Option<String>,
    /// Comma-separated subset of pos_self_src,pos_self_tgt,pos_cross,rel_self
    #[arg(long, global = true)]
    flags: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and instance dumps from a parallel corpus
    Prep {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a prepared directory
    Train {
        /// Output directory of `prep`
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a source corpus with a checkpoint
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to vocab.txt next to the checkpoint
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe encoder states for position information
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score `translate` output against reference documents
    Eval {
        /// hypotheses.tsv written by `translate`
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a length, data-scale, ablation or probing comparison
    Experiment {
        /// length_sweep, scale_sweep, ablation or probe_compare
        #[arg(long)]
        kind: String,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 3,
        Some(Error::Io { .. }) => 4,
        Some(Error::Format { .. } | Error::Empty(_) | Error::Index(_)) => 5,
        Some(Error::Length { .. }) => 6,
        Some(Error::NonFinite { .. }) => 7,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::Prep { src, tgt, out } => commands::prep(&common, &src, &tgt, &out),
        Command::Train { data, out } => commands::train(&common, &data, &out),
        Command::Translate {
            checkpoint,
            vocab,
            src,
            out,
        } => commands::translate(&common, &checkpoint, vocab.as_deref(), &src, &out),
        Command::Probe {
            checkpoint,
            vocab,
            src,
            out,
        } => commands::probe(&common, &checkpoint, vocab.as_deref(), &src, &out),
        Command::Eval {
            hyp,
            reference,
            vocab,
            out,
        } => commands::eval(&common, &hyp, &reference, &vocab, &out),
        Command::Experiment { kind, src, tgt, out } => commands::experiment(&common, &kind, &src, &tgt, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
