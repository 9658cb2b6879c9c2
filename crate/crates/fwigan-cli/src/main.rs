//! `fwigan`: command-line driver for acoustic waveform inversion.
//!
//! Subcommands cover the full experiment pipeline:
//!
//! * `simulate`  — produce observed shot gathers from a velocity model,
//! * `add-noise` — inject Gaussian noise at a target signal-to-noise ratio,
//! * `invert`    — recover a model by least-squares or adversarial training,
//! * `metrics`   — score a candidate model against a reference,
//! * `render`    — turn models or gathers into grayscale PGM images.
//!
//! Every command is deterministic given its flags (seeds included) and
//! writes a manifest sufficient to reproduce itself alongside its outputs.
//!
//! Exit codes: 0 on success, 1 on an internal numerical failure, 2 on
//! invalid input or usage.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Error split that decides the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid input or usage — exit code 2.
    Usage(String),
    /// Internal numerical or I/O failure — exit code 1.
    Failure(String),
}

#[derive(Parser)]
#[command(
    name = "fwigan",
    version,
    about = "Acoustic waveform inversion toolkit: simulate shot gathers, add noise, \
             invert (least-squares or adversarial), score models, render images"
)]
pub struct Cli {
    /// Worker threads for shot-level parallelism (default: all cores).
    /// The FWIGAN_THREADS environment variable overrides this flag.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Simulate observed shot gathers from a velocity model
    Simulate(SimulateArgs),
    /// Add Gaussian noise to a gather file at a target SNR
    AddNoise(AddNoiseArgs),
    /// Recover a velocity model (and source frequency) from observed gathers
    Invert(InvertArgs),
    /// Score a candidate model against a reference model
    Metrics(MetricsArgs),
    /// Render a model or gather file to an 8-bit grayscale PGM image
    Render(RenderArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Velocity model: "three-layer" (built-in 40x80 desk model),
    /// "linear:v0,beta,nz,nx,dx" (v0 m/s at the surface, beta m/s per km),
    /// or a path to a raw f32 grid with its JSON sidecar
    #[arg(long, default_value = "three-layer")]
    pub model: String,

    /// Source wavelet peak frequency in Hz
    #[arg(long, default_value_t = 7.0)]
    pub wavelet_f: f64,

    /// Number of evenly spaced sources along the acquisition row
    #[arg(long, default_value_t = 8)]
    pub shots: usize,

    /// Depth index of the source/receiver row
    #[arg(long, default_value_t = 0)]
    pub shot_depth: usize,

    /// Time samples per trace
    #[arg(long, default_value_t = 1000)]
    pub nt: usize,

    /// Time step in seconds
    #[arg(long, default_value_t = 0.003)]
    pub dt: f64,

    /// Recorded in the manifest; the simulation itself is deterministic
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output gather file (a JSON header is written alongside)
    #[arg(long)]
    pub out: PathBuf,

    /// Also write the velocity model that was simulated (raw f32 grid plus
    /// JSON sidecar), e.g. to serve as --truth for a later inversion
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Args)]
pub struct AddNoiseArgs {
    /// Input gather file
    #[arg(long = "in")]
    pub input: PathBuf,

    /// Target signal-to-noise ratio in dB
    #[arg(long)]
    pub snr_db: f64,

    /// Noise seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output gather file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Classical least-squares inversion
    Fwi,
    /// Adversarial inversion with a learned critic
    Fwigan,
}

#[derive(Args)]
pub struct InvertArgs {
    /// Inversion mode
    #[arg(long, value_enum)]
    pub mode: ModeArg,

    /// Observed gather file
    #[arg(long)]
    pub obs: PathBuf,

    /// Starting model: "smoothed" (Gaussian-smoothed --truth),
    /// "linear:v0,beta" (gradient profile on the truth grid), or a path to
    /// a raw f32 grid with its JSON sidecar
    #[arg(long)]
    pub init_model: String,

    /// Smoothing width in cells for --init-model smoothed
    #[arg(long, default_value_t = 8.0)]
    pub init_sigma: f64,

    /// Reference model: enables per-epoch metric tracking and supplies the
    /// grid for the "smoothed" and "linear" starting models
    #[arg(long)]
    pub truth: Option<PathBuf>,

    /// Initial source peak frequency in Hz
    #[arg(long, default_value_t = 7.0)]
    pub wavelet_f: f64,

    /// Training epochs (default: 800 for fwi, 300 for fwigan)
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Shots per mini-batch; must divide the shot count
    /// (default: 1 for fwi, 5 for fwigan)
    #[arg(long)]
    pub batch: Option<usize>,

    /// Critic updates per generator update (default: 6)
    #[arg(long)]
    pub n_critic: Option<usize>,

    /// Gradient penalty weight (default: 10)
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Velocity learning rate (default: 50 for fwi, 5 for fwigan)
    #[arg(long)]
    pub lr_v: Option<f64>,

    /// Critic learning rate (default: 1e-3)
    #[arg(long)]
    pub lr_c: Option<f64>,

    /// Source-frequency learning rate (default: 1e-3)
    #[arg(long)]
    pub lr_f: Option<f64>,

    /// Jointly estimate the noise level of the observed data
    /// (fwigan mode only; also loosens the gradient clip bounds)
    #[arg(long)]
    pub learn_noise: bool,

    /// Initial SNR guess in dB when --learn-noise is set
    #[arg(long, default_value_t = 20.0)]
    pub snr_init: f64,

    /// Comma-separated epochs after which generator learning rates halve
    /// (default: 100,200)
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,

    /// Run seed: fixes batch order, critic init, and noise draws
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory for model.f32, init.f32, losses.csv, metrics.csv,
    /// manifest.json, and *.pgm heatmaps
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Reference model (raw f32 grid with JSON sidecar)
    #[arg(long)]
    pub truth: PathBuf,

    /// Candidate model (raw f32 grid with JSON sidecar)
    #[arg(long)]
    pub candidate: PathBuf,
}

#[derive(Args)]
pub struct RenderArgs {
    /// Input file: a model grid or a gather file, identified by its
    /// JSON header
    #[arg(long = "in")]
    pub input: PathBuf,

    /// Shot index to render when the input is a gather file
    #[arg(long, default_value_t = 0)]
    pub shot: usize,

    /// Output PGM image
    #[arg(long)]
    pub out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), CliError> {
    commands::configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::AddNoise(a) => commands::add_noise(a),
        Command::Invert(a) => commands::invert(a),
        Command::Metrics(a) => commands::metrics_cmd(a),
        Command::Render(a) => commands::render(a),
    }
}
