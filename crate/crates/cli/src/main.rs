//! `envsiren` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use envsiren::inverse::Method;

/// Bad arguments detected by the front end itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "envsiren",
    version,
    about = "Fit HDR environment maps with sine networks and recover them by inverse rendering"
)]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a network to the upper half of an environment map.
    Fit(FitArgs),
    /// Render a scene lit by an environment map or a fitted network.
    Render(RenderArgs),
    /// Recover an environment map from a target rendering.
    Invert(InvertArgs),
    /// Write reconstructions of randomly perturbed network weights.
    Perturb(PerturbArgs),
    /// Compare predicted and reference maps and renderings.
    Eval(EvalArgs),
    /// Write a procedural HDR sky.
    Synth(SynthArgs),
    /// Write the built-in desk scene as TOML.
    Scene(SceneArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Full lat-long environment map (PFM, HDR or 8-bit).
    #[arg(long)]
    env: PathBuf,
    /// Train with adversarial weight perturbation.
    #[arg(long)]
    robust: bool,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Relative perturbation size.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    proxy_lr: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_features: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    omega0: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SceneSource {
    /// Scene TOML; defaults to the built-in desk scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Sphere roughness of the built-in scene.
    #[arg(long)]
    roughness: Option<f64>,
    #[arg(long)]
    spp: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for transport caches.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    source: SceneSource,
    /// Environment map: a full 2:1 lat-long map or a 4:1 upper crop.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    env: Option<PathBuf>,
    /// Checkpoint whose reconstruction lights the scene.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output PFM.
    #[arg(long)]
    out: PathBuf,
    /// Tone-mapped PNG; defaults to the output path with a .png extension.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    source: SceneSource,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Target rendering (PFM, or 8-bit which is linearised with gamma 2.2).
    #[arg(long)]
    target: PathBuf,
    /// Starting map for pixel methods, checkpoint for network methods.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    model: PathBuf,
    /// Standard deviation of the weight noise.
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pred_env: PathBuf,
    #[arg(long)]
    gt_env: PathBuf,
    #[arg(long)]
    pred_render: PathBuf,
    #[arg(long)]
    gt_render: PathBuf,
    /// Report path; a CSV with the same stem is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long)]
    sun_x: Option<usize>,
    #[arg(long)]
    sun_y: Option<usize>,
    #[arg(long, default_value_t = 500.0)]
    peak: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 0.0)]
    roughness: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: envsiren::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<envsiren::Error>() {
            return match e.kind() {
                envsiren::ErrorKind::Usage => 1,
                envsiren::ErrorKind::Numeric => 2,
                envsiren::ErrorKind::Io => 3,
            };
        }
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
