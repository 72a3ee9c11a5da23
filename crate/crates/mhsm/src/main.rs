//! Command-line front end: each subcommand runs one pipeline stage against
//! an output directory, reading prerequisites written by earlier stages.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mhsm::config::RunConfig;
use mhsm::mosaic::ModelKind;
use mhsm::pipeline::{self, Workspace};

#[derive(Parser)]
#[command(
    name = "mhsm",
    about = "Zone-wise flood/landslide multi-hazard susceptibility mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the run-configuration JSON.
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Output directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Comma-separated model subset (ef,lf,moe).
    #[arg(long, global = true, value_delimiter = ',')]
    models: Vec<String>,

    /// Comma-separated zone-id filter for train/select-features/geodetector.
    #[arg(long, global = true, value_delimiter = ',')]
    zones: Vec<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic study area (factors, zones, inventories).
    Synth,
    /// Build the computational-unit lattice and tile index.
    Partition,
    /// Augment inventories, draw negatives, assemble the sample table.
    Augment,
    /// Zone-wise Pearson screen and SHAP-based feature retention.
    SelectFeatures,
    /// Train the per-zone experts and gate.
    Train,
    /// Tile-wise inference over the computational units.
    Predict,
    /// IDW-merge overlapping tiles into study-area maps.
    Merge,
    /// Jenks thresholds and bivariate class maps.
    Classify,
    /// Test-split metrics, inventory density, spatial agreement.
    Evaluate,
    /// Stratified-heterogeneity analysis of the susceptibility maps.
    Geodetector,
    /// Regenerate CSV/PPM artifacts from stored models and maps.
    Report,
}

fn parse_models(raw: &[String]) -> mhsm::Result<Vec<ModelKind>> {
    if raw.is_empty() {
        return Ok(ModelKind::ALL.to_vec());
    }
    raw.iter().map(|s| ModelKind::parse(s)).collect()
}

fn run(cli: Cli) -> mhsm::Result<()> {
    let cfg = RunConfig::from_path(&cli.config)?;
    let ws = Workspace::new(cfg, &cli.out)?;
    let models = parse_models(&cli.models)?;
    match cli.command {
        Command::Synth => pipeline::stage_synth(&ws),
        Command::Partition => pipeline::stage_partition(&ws),
        Command::Augment => pipeline::stage_augment(&ws),
        Command::SelectFeatures => pipeline::stage_select_features(&ws, &cli.zones),
        Command::Train => pipeline::stage_train(&ws, &models, &cli.zones),
        Command::Predict => pipeline::stage_predict(&ws, &models),
        Command::Merge => pipeline::stage_merge(&ws, &models),
        Command::Classify => pipeline::stage_classify(&ws, &models),
        Command::Evaluate => pipeline::stage_evaluate(&ws, &models),
        Command::Geodetector => pipeline::stage_geodetector(&ws, &cli.zones),
        Command::Report => pipeline::stage_report(&ws, &models),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
