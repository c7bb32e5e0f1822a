use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hvqc::bitstream::Ratios;
use hvqc::harness::{parse_strategies, Strategy};

mod commands;
mod error;
mod io;

#[derive(Parser, Debug)]
#[command(name = "hvqc", version, about = "Image codec over multi-granularity VQ indices with a hyperprior entropy model")]
pub struct CliConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode an image into an .hvqc container.
    Compress(CompressArgs),
    /// Decode a container back into an image.
    Decompress(DecompressArgs),
    /// Compare entropy-coding strategies on index grids; emits CSV.
    Bench(BenchArgs),
    /// Train the codec and write a checkpoint, codebook and loss curve.
    Train(TrainArgs),
    /// Write synthetic Gauss-Markov images.
    SynthData(SynthArgs),
    /// Per-segment rate and PSNR of a container against its source image.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Network checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Codebook (.vqcb) written by `train`.
    #[arg(long)]
    pub codebook: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Coarse, medium and fine fractions of blocks; must sum to 1.
    #[arg(long, value_parser = parse_ratios, default_value = "0.3,0.3,0.4")]
    pub ratios: Ratios,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Print every container segment with its offset.
    #[arg(long)]
    pub dump_layout: bool,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output image; PNG unless the extension is .ppm or .pnm.
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Original image.
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long)]
    pub container: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    /// Gauss-Markov feature fields quantized with a random codebook.
    Markov,
    /// Uniformly random indices.
    Uniform,
    /// Fine-granularity indices of real images under a trained model.
    File,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_parser = parse_strategy_list, default_value = "static,o0,o1,o2,o3,hyper")]
    pub strategies: StrategyList,
    #[arg(long, value_enum, default_value_t = Source::Markov)]
    pub source: Source,
    #[arg(long, default_value_t = 1024)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    /// Side length of the synthetic index grids.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 4.0)]
    pub corr_len: f64,
    /// Synthetic fields used to fit the static table and the hyperprior.
    #[arg(long, default_value_t = 16)]
    pub train_fields: usize,
    #[arg(long, default_value_t = 300)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images for `--source file`; each one is a trial.
    #[arg(long = "input", short)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, requires = "codebook")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub codebook: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of PNG/PPM training images.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many generated Gauss-Markov images instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of generated images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 8.0)]
    pub corr_len: f64,
    #[arg(long, default_value_t = 1024)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 400)]
    pub steps_a: usize,
    #[arg(long, default_value_t = 300)]
    pub steps_b: usize,
    #[arg(long, default_value_t = 200)]
    pub steps_c: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr_a: f64,
    #[arg(long, default_value_t = 3e-3)]
    pub lr_b: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_c: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Rate weight for every granularity, bits per pixel.
    #[arg(long, default_value_t = 1.5e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_vq: f64,
    #[arg(long, value_parser = parse_ratios, default_value = "0.1,0.3,0.6")]
    pub train_ratios: Ratios,
    #[arg(long, value_parser = parse_ratios, default_value = "0.3,0.3,0.4")]
    pub ratios: Ratios,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_codebook: PathBuf,
    /// Loss curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Correlation length in pixels.
    #[arg(long)]
    pub len: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory to create; must not exist or be empty.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct StrategyList(pub Vec<Strategy>);

fn parse_ratios(s: &str) -> Result<Ratios, String> {
    s.parse::<Ratios>().map_err(|e| e.to_string())
}

fn parse_strategy_list(s: &str) -> Result<StrategyList, String> {
    match parse_strategies(s) {
        Ok(v) if !v.is_empty() => Ok(StrategyList(v)),
        Ok(_) => Err("empty strategy list".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cfg = CliConfig::parse();
    match commands::run(cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hvqc: {e}");
            ExitCode::from(e.code())
        }
    }
}
