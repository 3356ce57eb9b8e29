use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lingua_ctc::conditioning::ConditioningMode;

mod commands;

#[derive(Parser)]
#[command(name = "lingua-ctc", version, about = "Multilingual CTC speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    ThreeLang,
    SevenLang,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE vocabulary on transcript listings.
    BuildVocab {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic train/dev sets from a corpus description.
    GenData {
        /// Corpus description file; defaults to the built-in preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "three-lang", conflicts_with = "spec")]
        preset: Preset,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<ConditioningMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Freeze an fl-adapter model and train a prompt or prefix tuner on top.
    Finetune {
        /// Base run directory or checkpoint directory.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// `peft-[ce-|ctc-]<tuner>` or just the tuner, e.g. `prefix-tuning`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Greedy-decode a dataset and write per-language WER as CSV.
    Eval {
        /// Run directory or checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset name inside `--data`.
        #[arg(long, default_value = "dev")]
        set: String,
        /// Language id to supply, or `all` for each utterance's own id.
        #[arg(long)]
        lang: Option<String>,
        /// Defaults to `vocab.bpe` in the run directory.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Collect finished runs into a markdown WER table.
    Report {
        #[arg(long, num_args = 0..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab { corpus, size, out } => commands::build_vocab(&corpus, size, &out),
        Command::GenData {
            spec,
            preset,
            seed,
            out,
        } => commands::gen_data(spec.as_deref(), preset, seed, &out),
        Command::Train {
            config,
            mode,
            seed,
            out,
            force,
        } => commands::train(&config, mode, seed, out, force),
        Command::Finetune {
            base,
            config,
            mode,
            seed,
            out,
            force,
        } => commands::finetune(&base, &config, mode.as_deref(), seed, out, force),
        Command::Eval {
            ckpt,
            data,
            set,
            lang,
            vocab,
            report,
        } => commands::eval(&ckpt, &data, &set, lang.as_deref(), vocab, report.as_deref()),
        Command::Report { runs, out } => commands::report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
