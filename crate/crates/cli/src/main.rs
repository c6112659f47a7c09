//! `itsr`: super-resolve, train, evaluate and diagnose continuous-scale
//! screen-content models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "itsr", version, about)]
struct Cli {
    /// Seed for every random draw (initialization, batches, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Super-resolve one PPM image by an arbitrary scale in [1, 64].
    Sr(SrArgs),
    /// Train a model on a directory of PPM images.
    Train(TrainArgs),
    /// PSNR/SSIM of a checkpoint over a directory at several scales.
    Eval(EvalArgs),
    /// Train and score every ablation setting at desk scale.
    Ablate(AblateArgs),
    /// Check analytic gradients of every registered op against finite differences.
    Gradcheck(GradcheckArgs),
    /// Fourier spectra of one dual-branch block's conv and attention features.
    Spectrum(SpectrumArgs),
    /// Write seeded synthetic screen-content images.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SrArgs {
    /// Model or training checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Input PPM.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Magnification factor.
    #[arg(long)]
    pub scale: f64,
    /// Output PPM.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML; see the README for the schema).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of training PPMs.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional list of file names inside `--data`, one per line.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Final checkpoint; periodic ones are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log (JSON lines); defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a training checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of ground-truth PPMs.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated scales.
    #[arg(long, default_value = "2,3,4,6")]
    pub scales: String,
    /// Largest scale counted as in-training-scale.
    #[arg(long, default_value_t = 4.0)]
    pub in_scale_max: f64,
    /// Also write per-image rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory of training PPMs.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of evaluation PPMs (default: the training images).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Base model and training settings (default: desk preset).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training steps per setting; overrides the config.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Evaluation scale.
    #[arg(long, default_value_t = 2.0)]
    pub scale: f64,
    /// Comma-separated subset of `variant,reweight,branch`.
    #[arg(long, default_value = "variant,reweight,branch")]
    pub axes: String,
    /// Also write the rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeds per case, starting at `--seed`.
    #[arg(long, default_value_t = 2)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input PPM (fed as the LR image).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Stage index (default: last stage with a dual-branch block).
    #[arg(long)]
    pub stage: Option<usize>,
    /// Block index within the stage (default: its first dual-branch block).
    #[arg(long)]
    pub block: Option<usize>,
    /// Directory for `conv_spectrum.ppm` and `attention_spectrum.ppm`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of images.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Image height.
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Image width.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

/// The cause chain joined with `: `, skipping causes the previous message
/// already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        let pool = match n {
            0 => Err(anyhow::anyhow!("--threads must be at least 1")),
            n => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(anyhow::Error::from),
        };
        if let Err(e) = pool {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Sr(a) => commands::sr(&a),
        Command::Train(a) => commands::train(&a, seed),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a, seed),
        Command::Gradcheck(a) => commands::gradcheck(&a, seed),
        Command::Spectrum(a) => commands::spectrum(&a),
        Command::Synth(a) => commands::synth(&a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {}", describe(e));
            ExitCode::from(f.code())
        }
    }
}
