//! `chromabench`: color conversion, colorization training, inference, evaluation and gradient checks.

mod commands;
mod config;
mod encoding;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use chromabench::metrics::SsimMode;
use chromabench::pipeline::{LossKind, Preset, Strategy};
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{ConvertArgs, TrainArgs};
use crate::config::{RunConfig, SEED_ENV};
use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "chromabench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SsimArg {
    Global,
    Gaussian,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert an image between rgb, yuv, xyz and lab.
    ///
    /// Non-RGB images are stored with each channel's nominal range mapped onto [0, 1].
    Convert {
        #[arg(required_unless_present = "show_constants")]
        input: Option<PathBuf>,
        #[arg(required_unless_present = "show_constants")]
        output: Option<PathBuf>,
        #[arg(long, default_value = "rgb")]
        from: String,
        #[arg(long, default_value = "rgb")]
        to: String,
        /// Clip RGB output to [0, 1] before writing.
        #[arg(long)]
        clip: bool,
        /// Convert back to the source space and print the largest error.
        #[arg(long)]
        and_back: bool,
        /// Print the conversion matrices, inverses and white point.
        #[arg(long)]
        show_constants: bool,
    },
    /// Train a colorization network.
    Train {
        /// TOML file with any of the training keys; flags override it.
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        crop_size: Option<usize>,
        #[arg(long)]
        base_width: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Colorize a gray image (or a directory of images) with a checkpoint.
    Colorize { checkpoint: PathBuf, input: PathBuf, output: PathBuf },
    /// Compare predictions with ground truth; writes a CSV and a `.meta.toml` sidecar.
    Evaluate {
        truth_dir: PathBuf,
        pred_dir: PathBuf,
        report: PathBuf,
        #[arg(long, value_enum, default_value = "global")]
        ssim: SsimArg,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Write the feature extractor's activations for every image of a directory.
    Features { input_dir: PathBuf, output: PathBuf },
}

fn parsed<T: std::str::FromStr>(v: Option<String>) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    v.map(|s| s.parse::<T>().map_err(|e| CliError::Usage(e.to_string()))).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { input, output, from, to, clip, and_back, show_constants } => {
            if show_constants {
                commands::show_constants();
            }
            match (input, output) {
                (Some(input), Some(output)) => {
                    commands::convert_file(&ConvertArgs { input, output, from, to, clip, and_back })
                }
                _ => Ok(()),
            }
        }
        Command::Train {
            config,
            preset,
            strategy,
            loss,
            lr,
            batch_size,
            crop_size,
            base_width,
            steps,
            seed,
            dataset,
            out_dir,
            checkpoint_every,
        } => {
            let flags = RunConfig {
                preset: parsed::<Preset>(preset)?,
                strategy: parsed::<Strategy>(strategy)?,
                loss: parsed::<LossKind>(loss)?,
                lr,
                batch_size,
                crop_size,
                base_width,
                steps,
                seed,
                dataset,
                out_dir,
                checkpoint_every,
                ..Default::default()
            };
            commands::train_run(TrainArgs { config, flags, env_seed: std::env::var(SEED_ENV).ok() })
        }
        Command::Colorize { checkpoint, input, output } => commands::colorize_run(&checkpoint, &input, &output),
        Command::Evaluate { truth_dir, pred_dir, report, ssim } => {
            let mode = match ssim {
                SsimArg::Global => SsimMode::Global,
                SsimArg::Gaussian => SsimMode::Gaussian,
            };
            commands::evaluate_run(&truth_dir, &pred_dir, &report, mode)
        }
        Command::Gradcheck { module } => commands::gradcheck_run(module.as_deref()),
        Command::Features { input_dir, output } => commands::features_run(&input_dir, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let detail = e.kind().to_string();
            eprintln!("ERROR 1 {}", CliError::Usage(detail).detail());
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {} {}", e.code(), e.detail());
            ExitCode::from(e.code())
        }
    }
}
