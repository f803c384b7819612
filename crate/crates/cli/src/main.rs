//! `umnmt` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerics error. `UMNMT_SEED` replaces every seed of the run config.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use umnmt::eval::EvalModality;

use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "umnmt",
    version,
    about = "Unsupervised multi-modal translation runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    #[value(name = "with_image")]
    WithImage,
    #[value(name = "text_only")]
    TextOnly,
}

impl From<ModalityArg> for EvalModality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::WithImage => EvalModality::WithImage,
            ModalityArg::TextOnly => EvalModality::TextOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora, vocabularies, features and manifest.
    PrepareData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train according to `train.schedule` into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overwrite a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Translate one sentence per input line to standard output.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// One feature grid per input line; enables the image pathway.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long = "lang-pair", default_value = "x-y")]
        lang_pair: String,
    },
    /// Score a split in both directions and print the JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "with_image")]
        modality: ModalityArg,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write cross-attention maps as JSON lines.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "lang-pair", default_value = "x-y")]
        lang_pair: String,
        #[arg(long)]
        limit: Option<usize>,
        /// Replay the reference translation instead of the model's own.
        #[arg(long)]
        reference: bool,
        /// Ignore image features.
        #[arg(long = "text-only")]
        text_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the model losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::PrepareData { config, out, force } => commands::prepare_data(&config, &out, force),
        Command::Train {
            config,
            data,
            out,
            resume,
            force,
        } => commands::train(&config, &data, &out, resume.as_deref(), force),
        Command::Translate {
            ckpt,
            input,
            features,
            lang_pair,
        } => commands::translate_file(&ckpt, &input, features.as_deref(), &lang_pair),
        Command::Evaluate {
            ckpt,
            data,
            split,
            modality,
            out,
        } => commands::evaluate_split(&ckpt, &data, &split, modality.into(), out.as_deref()),
        Command::ExportAttention {
            ckpt,
            data,
            split,
            lang_pair,
            limit,
            reference,
            text_only,
            out,
        } => commands::export_attention(commands::ExportArgs {
            ckpt: &ckpt,
            data: &data,
            split: &split,
            lang_pair: &lang_pair,
            limit,
            reference,
            text_only,
            out: out.as_deref(),
        }),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("umnmt: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
