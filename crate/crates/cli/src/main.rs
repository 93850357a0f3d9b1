//! `landsynth`: data preparation, GAN training, synthesis, segmenter
//! training, evaluation and flood editing.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use landsynth::config::Pairs;
use landsynth::segmentation::SegmenterConfig;

use commands::{EvalSettings, FloodSettings, PrepareSettings, SynthSettings, TrainSettings};
use settings::{defaults_help, parse_sets, resolve, CliResult, Failure, Keyed};

#[derive(Parser)]
#[command(name = "landsynth", version, about = "Remote-sensing image synthesis from land cover and auxiliary rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset root (default: data_root from the config file, then $LANDSYNTH_DATA_ROOT).
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long = "out", value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset root and write its manifest, or generate a synthetic dataset.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// geonrw, geonrw_sar, dfc2020 or custom.
        #[arg(long)]
        dataset: Option<String>,
        /// Generate a small procedural dataset inside the run directory.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        train_tiles: Option<usize>,
        #[arg(long)]
        test_tiles: Option<usize>,
        #[arg(long)]
        tile_size: Option<usize>,
    },
    /// Train the GAN.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// fusion, label_only, raster_only or concat.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        /// Continue from a checkpoint (its configuration is kept except for epochs).
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Generate images for dataset tiles with a trained generator.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// train or test.
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated tile ids (default: the whole split).
        #[arg(long)]
        ids: Option<String>,
    },
    /// Train the U-Net segmenter on real images.
    TrainSegmenter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        dataset: Option<String>,
        /// rgb or sar.
        #[arg(long)]
        image: Option<String>,
    },
    /// Score synthesized tiles with a trained segmenter.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        segmenter: Option<PathBuf>,
        /// Directory of synthesized `<id>.tif` files.
        #[arg(long, value_name = "DIR")]
        fakes: Option<PathBuf>,
        /// Use copies of the real tiles as fakes (checks the harness).
        #[arg(long)]
        self_test: bool,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        ids: Option<String>,
    },
    /// Flood low terrain in DEM and land cover, optionally synthesizing the result.
    EditFlood {
        #[command(flatten)]
        common: Common,
        /// Threshold height in meters; pixels at or below it become water.
        #[arg(long, value_name = "METERS", allow_negative_numbers = true)]
        h_min: Option<f64>,
        /// Further comma-separated levels to sweep.
        #[arg(long, value_name = "A,B,C", allow_negative_numbers = true)]
        levels: Option<String>,
        /// Erosion radius in pixels.
        #[arg(long, value_name = "PX")]
        radius: Option<usize>,
        #[arg(long, value_name = "ID")]
        water_class: Option<u8>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        ids: Option<String>,
        /// Generator checkpoint to synthesize the edited tiles with.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Default)]
struct Flags(Pairs);

impl Flags {
    fn add<T: ToString>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &str, value: Option<PathBuf>) -> &mut Self {
        self.add(key, value.map(|p| p.display().to_string()))
    }

    fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        self.add(key, on.then_some(true))
    }
}

fn run_with<T: Keyed>(common: Common, mut flags: Flags, body: fn(settings::Resolved<T>) -> CliResult<()>) -> CliResult<()> {
    flags
        .path("data_root", common.data_root)
        .path("out_dir", common.out_dir)
        .add("seed", common.seed);
    let mut pairs = flags.0;
    pairs.extend(parse_sets(&common.sets)?);
    body(resolve::<T>(common.config.as_deref(), pairs)?)
}

fn dispatch(command: Command) -> CliResult<()> {
    let mut f = Flags::default();
    match command {
        Command::PrepareData { common, dataset, synthetic, train_tiles, test_tiles, tile_size } => {
            // A synthetic dataset is always a custom one.
            let dataset = dataset.or_else(|| synthetic.then(|| "custom".to_string()));
            f.add("dataset", dataset)
                .switch("synthetic", synthetic)
                .add("train_tiles", train_tiles)
                .add("test_tiles", test_tiles)
                .add("tile_size", tile_size);
            run_with::<PrepareSettings>(common, f, commands::prepare)
        }
        Command::Train { common, epochs, batch_size, variant, dataset, resume } => {
            f.add("epochs", epochs)
                .add("batch_size", batch_size)
                .add("variant", variant)
                .add("dataset", dataset)
                .path("resume", resume);
            run_with::<TrainSettings>(common, f, commands::train)
        }
        Command::Synthesize { common, checkpoint, split, ids } => {
            f.path("checkpoint", checkpoint).add("split", split).add("ids", ids);
            run_with::<SynthSettings>(common, f, commands::synthesize)
        }
        Command::TrainSegmenter { common, epochs, batch_size, dataset, image } => {
            f.add("epochs", epochs)
                .add("batch_size", batch_size)
                .add("dataset", dataset)
                .add("image", image);
            run_with::<SegmenterConfig>(common, f, commands::train_seg)
        }
        Command::Evaluate { common, segmenter, fakes, self_test, split, ids } => {
            f.path("segmenter", segmenter)
                .path("fakes", fakes)
                .switch("self_test", self_test)
                .add("split", split)
                .add("ids", ids);
            run_with::<EvalSettings>(common, f, commands::evaluate)
        }
        Command::EditFlood { common, h_min, levels, radius, water_class, dataset, split, ids, checkpoint } => {
            f.add("h_min", h_min)
                .add("levels", levels)
                .add("radius", radius)
                .add("water_class", water_class)
                .add("dataset", dataset)
                .add("split", split)
                .add("ids", ids)
                .path("checkpoint", checkpoint);
            run_with::<FloodSettings>(common, f, commands::edit_flood)
        }
    }
}

fn command_with_defaults() -> clap::Command {
    Cli::command()
        .mut_subcommand("prepare-data", |c| c.after_help(defaults_help::<PrepareSettings>()))
        .mut_subcommand("train", |c| c.after_help(defaults_help::<TrainSettings>()))
        .mut_subcommand("synthesize", |c| c.after_help(defaults_help::<SynthSettings>()))
        .mut_subcommand("train-segmenter", |c| c.after_help(defaults_help::<SegmenterConfig>()))
        .mut_subcommand("evaluate", |c| c.after_help(defaults_help::<EvalSettings>()))
        .mut_subcommand("edit-flood", |c| c.after_help(defaults_help::<FloodSettings>()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command_with_defaults().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command_with_defaults().debug_assert();
    }
}
