mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use biosynth::adapt::AdaptError;
use biosynth::growth::GrowthError;
use biosynth::nifti::NiftiError;
use biosynth::pipeline::PipelineError;
use biosynth::registration::RegistrationError;
use biosynth::synth::SynthError;
use biosynth::VolumeError;
use clap::{Args, Parser, Subcommand};

use settings::Globals;

#[derive(Parser, Debug)]
#[command(name = "biosynth", version, about = "Synthetic tumor-bearing multimodal MR volumes")]
struct Cli {
    /// JSON file with settings; keys mirror the long flag names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Grow a tumor on a tissue label map.
    Simulate(SimulateArgs),
    /// Register a moving volume to a fixed one.
    Register(RegisterArgs),
    /// Add healthy-tissue labels to a case by atlas fusion.
    EnrichLabels(EnrichArgs),
    /// Render the four modalities from a label map.
    Synthesize(SynthesizeArgs),
    /// Match case intensities to a reference distribution.
    Adapt(AdaptArgs),
    /// Generate a complete dataset.
    Generate(GenerateArgs),
    /// Check a generated dataset.
    Validate(ValidateArgs),
    /// Region Dice between two label maps.
    Dice(DiceArgs),
    /// Class frequencies and intensity summaries.
    Stats(StatsArgs),
    /// Write a phantom atlas set, reference corpus and config.
    Phantom(PhantomArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Tissue label map (NIfTI).
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// Label map whose tumor voxels (dilated by two) are ignored.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Labels to carry along with the moving image.
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnrichArgs {
    /// Case directory with t1/t1ce/t2/flair and seg.nii.
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long)]
    pub atlas_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// intensity_model.json or a directory of labeled cases.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory with p.nii, i.nii and n.nii from `simulate`.
    #[arg(long)]
    pub species: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// reference_dist.json or a directory of reference cases.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub atlas_dir: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub intensity_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    pub dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiceArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Regions to score (ET, WT, TC or a label); defaults to ET, WT, TC.
    #[arg(long, value_delimiter = ',')]
    pub regions: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// A label map to count.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Label map whose nonzero voxels form the brain mask.
    #[arg(long)]
    pub brain: Option<PathBuf>,
    /// Count only tumor labels.
    #[arg(long)]
    pub tumor_only: bool,
    /// A generated case directory.
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub atlases: Option<usize>,
    #[arg(long)]
    pub reference_cases: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub spacing: Option<f32>,
}

/// An error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    if e.is_numerical() {
        return 3;
    }
    match e {
        PipelineError::Config(_)
        | PipelineError::Growth(GrowthError::InvalidParams(_))
        | PipelineError::Growth(GrowthError::SeedOutsideGrid { .. })
        | PipelineError::Growth(GrowthError::SeedInInertTissue { .. })
        | PipelineError::Registration(RegistrationError::InvalidParams(_))
        | PipelineError::Synth(SynthError::InvalidParams(_)) => 1,
        _ => 2,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}

via_pipeline!(NiftiError, VolumeError, GrowthError, RegistrationError, SynthError, AdaptError);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let globals = Globals { config: cli.config, seed: cli.seed, jobs: cli.jobs, output: cli.output };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&globals, a),
        Command::Register(a) => commands::register(&globals, a),
        Command::EnrichLabels(a) => commands::enrich_labels(&globals, a),
        Command::Synthesize(a) => commands::synthesize(&globals, a),
        Command::Adapt(a) => commands::adapt(&globals, a),
        Command::Generate(a) => commands::generate(&globals, a),
        Command::Validate(a) => commands::validate(&globals, a),
        Command::Dice(a) => commands::dice(&globals, a),
        Command::Stats(a) => commands::stats(&globals, a),
        Command::Phantom(a) => commands::phantom(&globals, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
