use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffad::config::RunConfig;
use diffad::pipeline::{self, Context, DetectInput};
use diffad::{CliError, Result};

/// Diffusion-based image anomaly detection without reconstruction.
#[derive(Debug, Parser)]
#[command(name = "diffad", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic texture corpus with planted defects.
    Synth,
    /// Train the noise-prediction network on normal images.
    Train {
        #[arg(long)]
        train_dir: Option<PathBuf>,
    },
    /// Compute training features and fit the isolation forest.
    FitDetector {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train_dir: Option<PathBuf>,
    },
    /// Score images and write verdicts and heatmaps.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        /// Corpus root; runs on its labeled test split.
        #[arg(long, conflicts_with = "images", required_unless_present = "images")]
        corpus: Option<PathBuf>,
        /// Directory of unlabeled images.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Write heatmaps for every image, not only flagged ones.
        #[arg(long)]
        all_heatmaps: bool,
    },
    /// Compute detection metrics from a verdicts file.
    Eval {
        #[arg(long)]
        verdicts: PathBuf,
        /// Corpus root whose manifest supplies the labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Re-threshold verdict scores across contamination levels.
    Sweep {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

fn context(global: GlobalArgs) -> Result<Context> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(Context {
        config,
        out: global.out,
        threads: global.threads,
    })
}

fn run(cli: Cli) -> Result<()> {
    let ctx = context(cli.global)?;
    pipeline::prepare_out(&ctx)?;
    let manifest = match cli.command {
        Command::Synth => pipeline::synth(&ctx)?,
        Command::Train { train_dir } => pipeline::train_model(&ctx, train_dir.as_deref())?,
        Command::FitDetector { checkpoint, train_dir } => {
            pipeline::fit_detector(&ctx, &checkpoint, train_dir.as_deref())?
        }
        Command::Detect {
            checkpoint,
            forest,
            corpus,
            images,
            all_heatmaps,
        } => {
            let input = match (corpus, images) {
                (Some(root), _) => DetectInput::Corpus(root),
                (None, Some(dir)) => DetectInput::Images(dir),
                (None, None) => return Err(CliError::Invalid("pass --corpus or --images".into())),
            };
            pipeline::detect(&ctx, &checkpoint, &forest, &input, all_heatmaps)?
        }
        Command::Eval { verdicts, labels } => pipeline::evaluate(&ctx, &verdicts, labels.as_deref())?,
        Command::Sweep {
            forest,
            verdicts,
            labels,
        } => pipeline::sweep(&ctx, &forest, &verdicts, labels.as_deref())?,
    };
    for (name, n) in &manifest.counts {
        println!("{name}: {n}");
    }
    for a in &manifest.artifacts {
        println!("wrote {}", ctx.out.join(&a.path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
