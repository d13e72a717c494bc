//! `anmf` command-line tool: training, separation, denoising, tuning,
//! evaluation, synthetic mixing and spectrogram features.

mod commands;
pub mod config;
pub mod data;
mod scoring;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "anmf", version, about = "Adversarial generative NMF for single-channel source separation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Master seed; overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ANMF_THREADS")]
    pub threads: Option<usize>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Clamp negative input entries to zero instead of rejecting them.
    #[arg(long, global = true)]
    pub clamp_negatives: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train bases from a config and write a model bundle.
    Train {
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate mixes with a trained bundle.
    Separate {
        /// Model bundle directory.
        #[arg(long)]
        model: PathBuf,
        /// Mixture matrix file.
        #[arg(long)]
        mix: PathBuf,
        /// Output directory for per-source estimates and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth files, one per source, for the metrics CSV.
        #[arg(long, value_delimiter = ',')]
        references: Vec<PathBuf>,
        #[command(flatten)]
        metric: MetricOpts,
    },
    /// Denoise a WAV file with the signal basis of a bundle.
    Denoise {
        /// Model bundle directory.
        #[arg(long)]
        model: PathBuf,
        /// Noisy WAV input.
        #[arg(long)]
        input: PathBuf,
        /// Denoised WAV output.
        #[arg(long)]
        out: PathBuf,
        /// Index of the signal-of-interest basis.
        #[arg(long, default_value_t = 0)]
        signal: usize,
        #[arg(long, value_enum, default_value_t = DenoiseMode::Projection)]
        mode: DenoiseMode,
        /// Clean reference; reports SI-SDR before and after.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        stft: StftOpts,
    },
    /// Random hyperparameter search over the config's tuning block.
    Tune {
        /// Output directory (tune_result.json and best/ bundle).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimates against references.
    Eval {
        /// Estimate files, one per source (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        estimates: Vec<PathBuf>,
        /// Reference files in the same order.
        #[arg(long, value_delimiter = ',', required = true)]
        references: Vec<PathBuf>,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bootstrap resamples for the standard error of the median.
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[command(flatten)]
        metric: MetricOpts,
    },
    /// Mix sources (or synthetic data) into training/test sets.
    Mix(MixArgs),
    /// Convert between WAV audio and spectrogram matrix files.
    Features {
        /// WAV file, or a magnitude matrix with --inverse.
        #[arg(long)]
        input: PathBuf,
        /// Magnitude matrix, or a WAV file with --inverse.
        #[arg(long)]
        out: PathBuf,
        /// Spectrogram to WAV using the phase file.
        #[arg(long)]
        inverse: bool,
        /// Phase matrix: written in forward mode, read in inverse mode.
        #[arg(long)]
        phase: Option<PathBuf>,
        /// Output length in samples for inverse mode.
        #[arg(long)]
        length: Option<usize>,
        #[command(flatten)]
        stft: StftOpts,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenoiseMode {
    /// Project onto the signal basis cone (P-NMF).
    Projection,
    /// Separate over all bases and mask the mixture.
    Separation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Psnr,
    Sisdr,
}

#[derive(Debug, Clone, Args)]
pub struct MetricOpts {
    /// Metric (default: from the config, else psnr).
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Per-source weights on the simplex (default: equal).
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// PSNR peak value.
    #[arg(long)]
    pub peak: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct StftOpts {
    #[arg(long, default_value_t = 512)]
    pub n_fft: usize,
    #[arg(long, default_value_t = 128)]
    pub hop: usize,
    /// Sample rate for WAV output when it cannot be inferred.
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    /// Two families of Gaussian bumps with overlapping positions.
    Bumps,
    /// Harmonic tone (signal) and white noise, written as WAV.
    ToneNoise,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Source files with paired columns (or WAV signals with --snr-db).
    #[arg(long, value_delimiter = ',', conflicts_with = "synthetic")]
    pub sources: Vec<PathBuf>,
    /// Generate the sources instead of reading them.
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticKind>,
    /// Columns per synthetic source (bumps).
    #[arg(long, default_value_t = 200)]
    pub columns: usize,
    /// Features per synthetic column (bumps).
    #[arg(long, default_value_t = 64)]
    pub features: usize,
    /// Samples per synthetic signal (tone-noise).
    #[arg(long, default_value_t = 16_000)]
    pub samples: usize,
    /// Deterministic mixing weights.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["dirichlet", "snr_db"])]
    pub weights: Vec<f64>,
    /// Dirichlet concentration for per-column random weights.
    #[arg(long, value_delimiter = ',', conflicts_with = "snr_db")]
    pub dirichlet: Vec<f64>,
    /// Mix signal and noise (two sources) at this input SNR.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
