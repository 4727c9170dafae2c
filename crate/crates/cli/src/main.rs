use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use speechalign::config::RunConfig;
use speechalign::{Error, ErrorClass, Result};

mod artifacts;
mod commands;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SPEECHALIGN_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "speechalign", version, about = "Speech/text alignment pre-training pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// keyword-class or span-locate.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Output directory; defaults to `$SPEECHALIGN_OUTPUT_ROOT/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth,
    /// Log-Mel features for a manifest of WAV files.
    Features {
        /// JSON lines with `audio_path` in place of `feature_path`.
        #[arg(long)]
        audio: PathBuf,
        /// Apply stored speaker statistics instead of fitting new ones.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Pre-train one variant.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fine-tune a pre-trained checkpoint on a downstream task.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with train.jsonl, valid.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a fine-tuned checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Finite-difference check of every training loss.
    Gradcheck,
    /// Pre-train and fine-tune the variant × fraction × seed grid.
    Ablate {
        /// Directory with pretrain.jsonl and the downstream splits.
        #[arg(long)]
        data: PathBuf,
    },
    /// Render metrics reports found under the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Features { .. } => "features",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Gradcheck => "gradcheck",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

fn effective_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &g.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(f) = g.fraction {
        cfg.fraction = f;
    }
    if let Some(t) = &g.task {
        cfg.task = t.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(g: &Global, command: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.global)?;
    let out = output_dir(&cli.global, cli.command.name());
    match &cli.command {
        Command::Report { dirs } => return commands::report(dirs, cli.global.out.as_deref()),
        _ => artifacts::prepare(&out, &cfg)?,
    }
    let out: &Path = &out;
    match cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Features { audio, stats } => commands::features(&cfg, &audio, stats.as_deref(), out),
        Command::Pretrain { manifest } => commands::pretrain(&cfg, &manifest, out),
        Command::Finetune { checkpoint, data } => commands::finetune(&cfg, &checkpoint, &data, out),
        Command::Evaluate { checkpoint, manifest } => commands::evaluate(&checkpoint, &manifest, out),
        Command::Gradcheck => commands::gradcheck(&cfg, out),
        Command::Ablate { data } => commands::ablate(&cfg, &data, out),
        Command::Report { .. } => unreachable!(),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
