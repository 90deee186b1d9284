//! Command-line front end. Exit codes: 0 success, 1 I/O failure,
//! 2 invalid configuration or input, 3 numeric divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splatforge::pipeline::{self, Config, PipelineError};

const THREADS_VAR: &str = "SPLATFORGE_THREADS";

#[derive(Parser)]
#[command(
    name = "splatforge",
    version,
    about = "Text-conditioned multi-view latents to 3D Gaussian scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log progress at info level.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides `diffusion.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample latents for a prompt and decode them into a Gaussian scene.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Conditioning label; the config's default label when omitted.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Reconstruct a synthetic scene from context views and score target views.
    Reconstruct {
        #[command(flatten)]
        common: Common,
    },
    /// Render a PLY scene along a camera trajectory.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Aligned AbsRel and δ1 between same-named depth PFMs.
    EvalDepth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn load(common: &Common) -> Result<Config, PipelineError> {
    match &common.config {
        Some(path) => Config::load(path, common.seed),
        None => {
            let cfg = Config::default();
            cfg.validate()?;
            Ok(match common.seed {
                Some(s) => cfg.with_seed(s),
                None => cfg,
            })
        }
    }
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if !splatforge::par::init_thread_pool(n) {
                log::warn!("{THREADS_VAR} ignored: no configurable thread pool in this build");
            }
            Ok(())
        }
        _ => Err(PipelineError::Config(format!(
            "{THREADS_VAR} must be a positive integer, got {value:?}"
        ))),
    }
}

fn report(out: &Path, manifest: &pipeline::Manifest) {
    println!(
        "{}: wrote {} files to {} (config {})",
        manifest.command,
        manifest.outputs.len() + 1,
        out.display(),
        manifest.config_hash
    );
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    configure_threads()?;
    match cli.command {
        Command::Generate { common, prompt } => {
            let cfg = load(&common)?;
            let outcome = pipeline::generate(&cfg, prompt.as_deref(), &common.out)?;
            report(&common.out, &outcome.manifest);
        }
        Command::Reconstruct { common } => {
            let cfg = load(&common)?;
            let outcome = pipeline::reconstruct(&cfg, &common.out)?;
            let m = &outcome.report.mean;
            println!(
                "mean psnr {:.3} ssim {:.4} absrel {:.4} delta1 {:.4}",
                m.psnr.unwrap_or(f64::NAN),
                m.ssim.unwrap_or(f64::NAN),
                m.absrel.unwrap_or(f64::NAN),
                m.delta1.unwrap_or(f64::NAN)
            );
            report(&common.out, &outcome.manifest);
        }
        Command::Render {
            common,
            ply,
            trajectory,
        } => {
            let cfg = load(&common)?;
            let manifest = pipeline::render_trajectory(&cfg, &ply, &trajectory, &common.out)?;
            report(&common.out, &manifest);
        }
        Command::EvalDepth { common, pred, gt } => {
            let cfg = load(&common)?;
            let (rep, manifest) = pipeline::eval_depth(&cfg, &pred, &gt, &common.out)?;
            println!(
                "{} images, mean absrel {:.6} delta1 {:.4}, {} failed",
                rep.rows.len(),
                rep.mean.absrel.unwrap_or(f64::NAN),
                rep.mean.delta1.unwrap_or(f64::NAN),
                rep.failures()
            );
            report(&common.out, &manifest);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
