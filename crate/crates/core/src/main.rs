use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rumorgraph::commands::{
    cmd_earlydetect, cmd_export_features, cmd_synth, cmd_train, cmd_validate, exit_code, format_stats, Overrides,
};
use rumorgraph::dataio::CheckpointMode;
use rumorgraph::numcore::Precision;
use rumorgraph::Result;

#[derive(Parser)]
#[command(
    name = "rumorgraph",
    version,
    about = "Contrastive transfer rumor detection on propagation graphs"
)]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Time,
    Count,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an event file and print dataset statistics.
    Validate {
        #[arg(long, required = true)]
        events: Vec<PathBuf>,
    },
    /// Train per a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a snapshot at increasing truncation checkpoints.
    Earlydetect {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Comma-separated ascending values; `inf` for no truncation.
        #[arg(long)]
        checkpoints: String,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// `hashed:<dim>[:<seed>]` or a precomputed file.
        #[arg(long)]
        embeddings: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project event representations to 2-D with PCA.
    ExportFeatures {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        embeddings: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic source/target benchmark.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let precision = cli.precision.map(|p| match p {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    });
    match cli.command {
        Command::Validate { events } => {
            for path in events {
                let stats = cmd_validate(&path)?;
                print!("{}", format_stats(&path.display().to_string(), &stats));
            }
        }
        Command::Train { config } => {
            let dir = cmd_train(
                &config,
                Overrides {
                    seed: cli.seed,
                    precision,
                },
            )?;
            println!("{}", dir.join("metrics.json").display());
        }
        Command::Earlydetect {
            snapshot,
            events,
            checkpoints,
            mode,
            embeddings,
            out,
        } => {
            let mode = match mode {
                ModeArg::Time => CheckpointMode::ElapsedTime,
                ModeArg::Count => CheckpointMode::PostCount,
            };
            let csv = cmd_earlydetect(&snapshot, &events, &checkpoints, mode, embeddings.as_deref(), &out)?;
            println!("{}", csv.display());
        }
        Command::ExportFeatures {
            snapshot,
            events,
            embeddings,
            out,
        } => {
            let csv = cmd_export_features(&snapshot, &events, embeddings.as_deref(), &out)?;
            println!("{}", csv.display());
        }
        Command::Synth { spec, out } => {
            cmd_synth(spec.as_deref(), cli.seed, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
