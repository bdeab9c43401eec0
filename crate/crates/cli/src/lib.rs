//! Command-line pipeline: synthesis, training, inference, evaluation, gradient checks, compositing.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tammatte_core::train::THREADS_ENV;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "tam-matte",
    version,
    about = "Temporally coherent video matting on synthetic clips"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/val clip set.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the clips of a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and report validation metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset written by `synth`; clips are generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to `<output_dir>/train`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict alpha mattes for a clip directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Clip directory holding `frames/` and, by default, `trimap/`.
        #[arg(long)]
        clip: PathBuf,
        /// Alternative trimap directory.
        #[arg(long)]
        trimaps: Option<PathBuf>,
        /// Dilate the trimaps with this odd kernel first.
        #[arg(long)]
        dilate: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted alpha against a ground-truth clip and print the report as JSON.
    Eval {
        /// Alpha directory or clip directory with `alpha/`.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth clip directory.
        #[arg(long)]
        gt: PathBuf,
        /// Dilation kernel defining the unknown region.
        #[arg(long, default_value_t = tammatte_core::trimap::VALIDATION_KERNELS[0])]
        kernel: usize,
        /// Also write per-frame metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random points per check.
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Composite `alpha * fg + (1 - alpha) * bg` into a PNG.
    Composite {
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sizes the global rayon pool from the thread-cap environment variable.
pub fn init_threads() -> Result<()> {
    let n = tammatte_core::train::thread_count();
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .with_context(|| format!("configuring {n} threads ({THREADS_ENV})"))
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, out, force } => {
            let config = config.load()?;
            let out = out.unwrap_or_else(|| config.output_dir.join("data"));
            let m = commands::cmd_synth(&config, &out, force)?;
            println!(
                "wrote {} train and {} val clips to {}",
                m.count(tammatte_core::synth::Split::Train),
                m.count(tammatte_core::synth::Split::Val),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let config = config.load()?;
            let out = out.unwrap_or_else(|| config.output_dir.join("train"));
            let outcome = commands::cmd_train(&config, data.as_deref(), &out)?;
            if let Some(v) = &outcome.val {
                println!("{}", serde_json::to_string_pretty(v)?);
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Infer {
            ckpt,
            clip,
            trimaps,
            dilate,
            out,
        } => {
            let files = commands::cmd_infer(&ckpt, &clip, trimaps.as_deref(), dilate, &out)?;
            println!(
                "wrote {} alpha mattes to {}",
                files.len(),
                out.join("alpha").display()
            );
        }
        Command::Eval {
            pred,
            gt,
            kernel,
            csv,
        } => {
            let report = commands::cmd_eval(&pred, &gt, kernel)?;
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { seed, trials } => {
            let outcomes = commands::cmd_gradcheck(seed, trials)?;
            let mut ok = true;
            for o in &outcomes {
                ok &= o.passed;
                println!(
                    "{:<4} {:<28} max_rel_err={:.3e} tol={:.0e} coords={}",
                    if o.passed { "ok" } else { "FAIL" },
                    o.name,
                    o.max_rel_err,
                    o.tolerance,
                    o.coords
                );
            }
            if !ok {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Composite { fg, bg, alpha, out } => {
            commands::cmd_composite(&fg, &bg, &alpha, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
