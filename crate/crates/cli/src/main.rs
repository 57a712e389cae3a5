//! `segforge` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid usage.

mod commands;
mod fixtures;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segforge_core::Error;

#[derive(Parser)]
#[command(name = "segforge", version, about = "Build, optimize, run and measure FCN segmentation graphs")]
struct Cli {
    /// Output format for everything printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Markdown,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Fcn8s,
    Fcn16s,
    Fcn32s,
    /// The VGG16 encoder alone, ending at the 1×1 scoring layer.
    Encoder,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Init {
    Normal,
    Zeros,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PowerFormatArg {
    GpuSmiCsv,
    InaSysfs,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model graph with seeded weights and save it.
    Build(BuildArgs),
    /// Apply optimization passes to a saved model.
    Optimize(OptimizeArgs),
    /// Static activation and parameter memory estimate.
    Estimate(EstimateArgs),
    /// Segment PNM images with a saved model.
    Run(RunArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Time inference and compute power and energy figures.
    Bench(BenchArgs),
    /// Write synthetic images, labels and power logs.
    Fixtures(FixtureArgs),
}

#[derive(Args)]
pub struct BuildArgs {
    #[arg(long, value_enum)]
    pub arch: Arch,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 35)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Init::Normal)]
    pub init: Init,
    /// Standard deviation of normal initialization.
    #[arg(long, default_value_t = 0.01)]
    pub stddev: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated pass names, or `all`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub passes: Vec<String>,
    /// Float constants with at least this many elements get quantized.
    #[arg(long)]
    pub quant_threshold: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Override the input height recorded in the model.
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    /// Training memory budget in decimal GB; prints a batch-size recommendation.
    #[arg(long)]
    pub budget_gb: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub fwd_bwd_factor: usize,
    #[arg(long, default_value_t = 4)]
    pub optimizer_factor: usize,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// A single image; pair with --out-labels.
    #[arg(long, conflicts_with = "images", requires = "out_labels")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
    /// Every .pnm/.ppm/.pgm file in a directory; pair with --out-dir.
    #[arg(long, requires = "out_dir")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Pick the fastest convolution kernel per layer before running.
    #[arg(long)]
    pub autotune: bool,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Execute from a statically planned arena.
    #[arg(long)]
    pub plan: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Schema file with `id,name,category,void_flag` lines; defaults to Cityscapes.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Power log to average; alternatively give --watts.
    #[arg(long, requires = "power_format", conflicts_with = "watts")]
    pub power: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub power_format: Option<PowerFormatArg>,
    /// Constant power draw in watts.
    #[arg(long)]
    pub watts: Option<f64>,
    #[arg(long, default_value_t = segforge_core::bench::DEFAULT_IMAGES)]
    pub n_images: usize,
    /// Image to time on; a seeded random input of the model's size otherwise.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub autotune: bool,
    /// Let kernels use every worker thread while timing.
    #[arg(long)]
    pub parallel: bool,
    /// Text for the report's passes column.
    #[arg(long, default_value = "none")]
    pub passes_label: String,
    /// Also write the report here, as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 35)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Constant draw written to the INA log.
    #[arg(long, default_value_t = 4.16)]
    pub ina_watts: f64,
    /// Constant draw written to the GPU tool log.
    #[arg(long, default_value_t = 35.27)]
    pub smi_watts: f64,
    #[arg(long, default_value_t = 60)]
    pub power_samples: usize,
}

/// A problem with the arguments rather than with the data or the machine.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_) | Error::UnknownPass { .. }) => 2,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("SEGFORGE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("SEGFORGE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Build(a) => commands::build(&a, cli.format),
        Command::Optimize(a) => commands::optimize(&a, cli.format),
        Command::Estimate(a) => commands::estimate(&a, cli.format),
        Command::Run(a) => commands::run(&a, cli.format),
        Command::Eval(a) => commands::eval(&a, cli.format),
        Command::Bench(a) => commands::bench(&a, cli.format),
        Command::Fixtures(a) => fixtures::write(&a, cli.format),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
