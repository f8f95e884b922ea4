//! Command-line driver for the question-to-SPARQL pipeline.
//!
//! Every subcommand reads the shared run configuration (`--config`,
//! defaults otherwise), with `--seed` overriding the configured seed.
//! Exit codes: 0 on success, 2 when inputs or configuration fail
//! validation, 1 on runtime errors.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

use commands::AppError;

#[derive(Parser)]
#[command(name = "sparqlgen", version, about = "Translate between natural language and SPARQL")]
struct Cli {
    /// Run configuration TOML; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic question/query corpus from built-in templates
    MakeFixtures {
        /// Directory for fixtures.en, fixtures.sparql, pretrain.txt
        #[arg(long)]
        out_dir: PathBuf,
        /// How many of the built-in templates to instantiate
        #[arg(long, default_value_t = 12)]
        templates: usize,
    },
    /// Clean a raw query log into deduplicated encoded queries
    PrepareCorpus {
        /// Text file with one SPARQL query per line
        #[arg(long)]
        input: PathBuf,
        /// Output file of encoded queries, one per line
        #[arg(long)]
        output: PathBuf,
        /// Namespace table TOML; the built-in DBpedia table when omitted
        #[arg(long)]
        namespaces: Option<PathBuf>,
        /// Accept only queries whose IRIs resolve to these hosts
        #[arg(long = "allow-host")]
        allow_hosts: Vec<String>,
        /// Where to write the cleaning report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learn a WordPiece vocabulary from text files
    TrainTokenizer {
        /// Input text files (questions, encoded queries)
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Output vocabulary file, one token per line
        #[arg(long)]
        output: PathBuf,
    },
    /// Pre-train the encoder on corrupted encoded queries
    Pretrain {
        /// Encoded-query corpus, one per line
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,
        /// Output encoder checkpoint
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the translation model on aligned question/query files
    Finetune {
        /// Base path of the pair `<base>.en` / `<base>.sparql`
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,
        /// Pre-trained encoder checkpoint; fresh initialization when omitted
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// The .sparql side already holds encoded queries
        #[arg(long)]
        encoded_targets: bool,
        /// Directory for encoder.ckpt and decoder.ckpt
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Translate questions with beam search
    Generate {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Questions, one per line
        #[arg(long)]
        input: PathBuf,
        /// Output encoded queries, one per line
        #[arg(long)]
        output: PathBuf,
    },
    /// Score candidate lines against reference lines
    Evaluate {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Where to write the report JSON; stdout always gets it
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::MakeFixtures { out_dir, templates } => {
            commands::make_fixtures(&out_dir, templates, &cfg)
        }
        Command::PrepareCorpus { input, output, namespaces, allow_hosts, report } => {
            commands::prepare_corpus(&input, &output, namespaces.as_deref(), &allow_hosts, report.as_deref())
        }
        Command::TrainTokenizer { input, output } => {
            commands::train_tokenizer(&input, &output, &cfg)
        }
        Command::Pretrain { corpus, vocab, output } => {
            commands::pretrain(&corpus, &vocab, &output, &cfg)
        }
        Command::Finetune { data, vocab, encoder, encoded_targets, out_dir } => {
            commands::finetune(&data, &vocab, encoder.as_deref(), encoded_targets, &out_dir, &cfg)
        }
        Command::Generate { encoder, decoder, vocab, input, output } => {
            commands::generate(&encoder, &decoder, &vocab, &input, &output, &cfg)
        }
        Command::Evaluate { candidates, references, report } => {
            commands::evaluate(&candidates, &references, report.as_deref(), &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
