//! `fgst`: self-checks, cost benchmarks, toy training, deblurring and
//! attention dumps.
//!
//! Exit codes: 0 success, 2 usage error, 3 validation failure, 4 failed
//! check, 5 runtime fault.

mod commands;
mod config;
mod error;
mod frames;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fgst", version, about = "Flow-guided sparse window attention for video deblurring")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for model initialisation, data and batch order.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Oracle, reduction, gradient, identity and receptive-extent checks.
    Check,
    /// Analytic and measured attention cost across a token-count sweep.
    Bench,
    /// Train on generated sequences and score held-out ones.
    Train,
    /// Restore a video with a checkpoint.
    Deblur {
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// `[T, 3, H, W]` tensor file, a PPM frame, or a directory of frames.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Ground truth in the same layout, for PSNR/SSIM.
        #[arg(long, value_name = "PATH")]
        target: Option<PathBuf>,
    },
    /// Per-window keys and weights of the first attention block.
    DumpAttention {
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Reference frame.
        #[arg(long, value_name = "T")]
        frame: Option<usize>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    match &cli.command {
        Command::Deblur {
            checkpoint,
            input,
            target,
        } => {
            cfg.checkpoint = checkpoint.clone().or(cfg.checkpoint);
            cfg.input = input.clone().or(cfg.input);
            cfg.target = target.clone().or(cfg.target);
        }
        Command::DumpAttention {
            checkpoint,
            input,
            frame,
        } => {
            cfg.checkpoint = checkpoint.clone().or(cfg.checkpoint);
            cfg.input = input.clone().or(cfg.input);
            cfg.dump_frame = frame.unwrap_or(cfg.dump_frame);
        }
        _ => {}
    }
    cfg.validate()?;
    if let Some(out) = &cli.out {
        if out.exists() && !out.is_dir() {
            return Err(CliError::Usage(format!("--out {} is not a directory", out.display())));
        }
    }
    for path in [&cfg.checkpoint, &cfg.input, &cfg.target].into_iter().flatten() {
        if !path.exists() {
            return Err(CliError::Usage(format!("{} does not exist", path.display())));
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let dir = cli.out.as_deref();
    match cli.command {
        Command::Check => commands::check(&cfg, &mut out),
        Command::Bench => {
            let table = commands::bench(&cfg, &mut out)?;
            if let Some(d) = dir {
                std::fs::create_dir_all(d).map_err(CliError::io(format!("creating {}", d.display())))?;
                std::fs::write(d.join("bench.txt"), table).map_err(CliError::io("writing bench.txt"))?;
            }
            Ok(())
        }
        Command::Train => commands::train(&cfg, dir, &mut out),
        Command::Deblur { .. } => commands::deblur(&cfg, dir, &mut out),
        Command::DumpAttention { .. } => commands::dump_attention(&cfg, dir, &mut out),
    }?;
    out.flush().map_err(CliError::io("flushing output"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fgst: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
