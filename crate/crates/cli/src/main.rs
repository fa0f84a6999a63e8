use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxslt::corpus::ContextMode;
use ctxslt_cli::config::resolve;
use ctxslt_cli::{CliError, DecodeOptions, RunConfig};

#[derive(Parser)]
#[command(name = "ctxslt", version, about = "Context-aware sign language translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named preset: homonym-small, overfit-32, srf-like, bobsl-like.
    #[arg(long)]
    preset: Option<String>,
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set model.streams=C+V`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        resolve(self.preset.as_deref(), self.config.as_deref(), &self.sets, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate a corpus with automatic sign spottings.
    Spot {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory; overrides `corpus.dir`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and evaluate its best dev checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Translate one feature file, or a whole manifest with `--manifest`.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        features: Option<PathBuf>,
        /// Preceding sentence(s).
        #[arg(long)]
        context: Option<String>,
        /// Spotted glosses in temporal order, whitespace separated.
        #[arg(long)]
        spottings: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Preceding sentences used as context in manifest mode.
        #[arg(long, default_value_t = 1)]
        context_k: usize,
        /// Build manifest context from earlier outputs instead of gold subtitles.
        #[arg(long)]
        predicted_context: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
    },
    /// Score line-aligned hypotheses against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write per-pair scores as TSV.
        #[arg(long)]
        pairs_tsv: Option<PathBuf>,
    },
    /// Train every stream subset for each seed and tabulate the results.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn with_corpus(mut cfg: RunConfig, corpus: Option<PathBuf>) -> RunConfig {
    if corpus.is_some() {
        cfg.corpus.dir = corpus;
    }
    cfg
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable output"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { cfg, out } => ctxslt_cli::synth(&cfg.resolve()?, &out)?,
        Command::Spot { cfg, corpus, out } => {
            let records = ctxslt_cli::spot(&with_corpus(cfg.resolve()?, corpus), &out)?;
            eprintln!("{} spottings written to {}", records.len(), out.join("spottings.tsv").display());
        }
        Command::Train { cfg, corpus, run_dir } => {
            print_json(&ctxslt_cli::train_run(&with_corpus(cfg.resolve()?, corpus), &run_dir)?);
        }
        Command::Translate {
            checkpoint,
            features,
            context,
            spottings,
            manifest,
            context_k,
            predicted_context,
            out,
            beam,
            max_len,
        } => {
            let opts = DecodeOptions { beam, max_len };
            let lines = match (features, manifest) {
                (Some(f), _) => vec![ctxslt_cli::translate_one(
                    &checkpoint,
                    &f,
                    context.as_deref(),
                    spottings.as_deref(),
                    opts,
                )?],
                (None, Some(m)) => ctxslt_cli::translate_manifest(
                    &checkpoint,
                    &m,
                    ContextMode::Sentences { k: context_k },
                    ctxslt::corpus::MAX_CONTEXT_TOKENS,
                    predicted_context,
                    opts,
                )?,
                (None, None) => unreachable!("clap requires one input"),
            };
            match out {
                Some(path) => ctxslt::training::write_lines(&path, &lines)?,
                None => lines.iter().for_each(|l| println!("{l}")),
            }
        }
        Command::Evaluate { hyp, reference, pairs_tsv } => {
            print_json(&ctxslt_cli::evaluate_files(&hyp, &reference, pairs_tsv.as_deref())?);
        }
        Command::Ablate { cfg, corpus, run_dir } => {
            let report = ctxslt_cli::ablate(&with_corpus(cfg.resolve()?, corpus), &run_dir)?;
            print!("{}", ctxslt_cli::ablation_markdown(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
