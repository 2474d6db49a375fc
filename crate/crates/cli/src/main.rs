mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default data directory when no config file is given.
pub const DATA_DIR_ENV: &str = "SEMGEN_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "semgen", version, about = "Definition and usage generation for words in context")]
pub struct Cli {
    /// TOML run configuration. Without one, defaults are used with data
    /// files taken from $SEMGEN_DATA_DIR (or ./data).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for artifacts. Defaults to runs/<command>.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Pre-train the definition decoder as a language model.
    Pretrain,
    /// Train a model and keep the checkpoint with the best validation perplexity.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Generate definitions for a word in one or more contexts.
    Generate(GenerateArgs),
    /// Train and score every gate x embeddings x initial-state combination.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Parse the corpus and report rejected lines.
    Validate,
    /// Write the sense-disjoint split manifest and per-split corpora.
    Split,
    /// Per-split corpus statistics.
    Stats,
    /// Build and write the vocabulary.
    Vocab {
        /// Drop stopwords and non-alphabetic tokens, as for a content-word
        /// vocabulary. The model vocabulary keeps them.
        #[arg(long)]
        content: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Warm-start from a pre-trained checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub word: String,
    /// A sentence containing the word. Repeat for several contexts.
    #[arg(long = "context", required = true)]
    pub contexts: Vec<String>,
    /// Overrides generate.temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Epochs per grid point. Defaults to train.max_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let command_line = command_line(std::env::args());
    let outcome = std::panic::catch_unwind(|| commands::run(&cli, &command_line));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(if commands::is_user_error(&e) { 1 } else { 2 })
        }
        Err(_) => {
            eprintln!("error: internal failure (panic)");
            ExitCode::from(2)
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ").trim().to_string()
}

/// The invocation as recorded in artifacts. The output directory is left
/// out so that identical runs written to different places stay identical.
pub fn command_line(args: impl IntoIterator<Item = String>) -> String {
    let mut out = Vec::new();
    let mut args = args.into_iter();
    if args.next().is_some() {
        out.push("semgen".to_string());
    }
    while let Some(a) = args.next() {
        if a == "--out-dir" {
            args.next();
            continue;
        }
        if a.starts_with("--out-dir=") {
            continue;
        }
        out.push(quote(&a));
    }
    out.join(" ")
}

fn quote(arg: &str) -> String {
    if !arg.is_empty() && arg.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=:,+@%".contains(c)) {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn command_line_drops_out_dir() {
        let a = command_line(args(&["/bin/semgen", "--config", "c.toml", "--out-dir", "/tmp/x", "train"]));
        let b = command_line(args(&["semgen", "--out-dir=/y", "--config", "c.toml", "train"]));
        assert_eq!(a, "semgen --config c.toml train");
        assert_eq!(a, b);
    }

    #[test]
    fn command_line_quotes_spaces() {
        let a = command_line(args(&["semgen", "generate", "--context", "it's a check"]));
        assert_eq!(a, r"semgen generate --context 'it'\''s a check'");
    }

    #[test]
    fn cli_shape_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
