use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dysi::app::{commands, hot_start, train, RunConfig};
use dysi::{Error, Result};

/// Train and evaluate sequence models with dynamic scheduled sampling and
/// imitation loss.
#[derive(Parser)]
#[command(name = "dysi", version)]
struct Cli {
    /// Run configuration (key=value lines); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides training.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides output.dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,

    /// Extra configuration override, e.g. --set training.alpha=0.3.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train, resuming from the newest checkpoint in the output directory.
    Train,
    /// Train from the parameters of a checkpoint with a fresh optimizer and schedule.
    HotStart {
        #[arg(long)]
        init: PathBuf,
    },
    /// Average the parameters of several checkpoints.
    AverageCheckpoints {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a test set and report BLEU, entropy, repetition and accuracy.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TAB-separated source/reference file; synthetic tasks draw fresh pairs when omitted.
        #[arg(long)]
        testset: Option<PathBuf>,
        /// Extra reference file aligned with the test set; repeat for more.
        #[arg(long = "references")]
        references: Vec<PathBuf>,
    },
    /// Write one continuation or translation per prompt line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Defaults to generations.txt in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the prompt perturbation suite over language-model checkpoints.
    Perturb {
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// One paragraph per line.
        #[arg(long)]
        prompts: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(),
    };
    let mut pairs: Vec<(&str, String)> = Vec::new();
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("training.seed", seed.to_string()));
    }
    if let Some(dir) = &cli.out_dir {
        pairs.push(("output.dir", dir.display().to_string()));
    }
    base.with_overrides(pairs)
}

fn run(cli: Cli) -> Result<()> {
    // Reject a bad DYSI_THREADS before any work starts.
    commands::thread_pool()?;
    let config = load_config(&cli)?;
    match cli.verb {
        Verb::Train => {
            let out = train(&config)?;
            println!("{}", out.final_checkpoint.display());
        }
        Verb::HotStart { init } => {
            let out = hot_start(&config, &init)?;
            println!("{}", out.final_checkpoint.display());
        }
        Verb::AverageCheckpoints { checkpoints, output } => {
            commands::average_checkpoints(&checkpoints, &output)?;
            println!("{}", output.display());
        }
        Verb::Evaluate {
            checkpoint,
            testset,
            references,
        } => {
            let eval = commands::evaluate(&config, &checkpoint, testset.as_deref(), &references)?;
            let json = serde_json::to_string_pretty(&eval.report).map_err(|e| Error::Input(e.to_string()))?;
            println!("{json}");
        }
        Verb::Generate {
            checkpoint,
            prompts,
            output,
        } => {
            let output = output.unwrap_or_else(|| config.out_dir.join("generations.txt"));
            commands::generate(&config, &checkpoint, &prompts, &output)?;
            println!("{}", output.display());
        }
        Verb::Perturb { checkpoints, prompts } => {
            let report = commands::perturb(&config, &checkpoints, &prompts)?;
            print!("{}", report.summary_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
