//! Settings and bodies of the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use landsynth::config::{parse_bool, parse_value, Pairs};
use landsynth::data::{load_manifest, synthetic, DatasetKind, DatasetManifest, Split};
use landsynth::editing::{write_flooded_dataset, FloodSpec, DEFAULT_WATER_CLASS};
use landsynth::metrics::{evaluate_run, reports_to_csv, reports_to_table, FakeSource};
use landsynth::segmentation::{train_segmenter, Segmenter, SegmenterConfig};
use landsynth::training::{checkpoint_name, fit, Synthesizer, TrainConfig, Trainer};
use landsynth::{Error, Result};

use crate::settings::{optional_path, path_pair, usage, CliResult, Keyed, Resolved};

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key '{key}'"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn pair(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn manifest_at(root: &Path, kind: DatasetKind) -> CliResult<DatasetManifest> {
    Ok(load_manifest(root, kind).with_context(|| format!("loading dataset at {}", root.display()))?)
}

/// Explicit ids, or every tile of the split.
fn select_ids(manifest: &DatasetManifest, ids: &[String], split: Split) -> CliResult<Vec<String>> {
    if ids.is_empty() {
        return Ok(manifest.ids(split).to_vec());
    }
    for id in ids {
        manifest.files(id)?;
    }
    Ok(ids.to_vec())
}

// ---------------------------------------------------------------- prepare-data

pub struct PrepareSettings {
    pub dataset: DatasetKind,
    pub synthetic: bool,
    pub train_tiles: usize,
    pub test_tiles: usize,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        PrepareSettings {
            dataset: DatasetKind::GeoNrw,
            synthetic: false,
            train_tiles: 8,
            test_tiles: 16,
            tile_size: 64,
            seed: 0,
        }
    }
}

impl Keyed for PrepareSettings {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.parse()?,
            "synthetic" => self.synthetic = parse_bool(key, v)?,
            "train_tiles" => self.train_tiles = parse_value(key, v)?,
            "test_tiles" => self.test_tiles = parse_value(key, v)?,
            "tile_size" => self.tile_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Pairs {
        vec![
            pair("dataset", self.dataset),
            pair("synthetic", self.synthetic),
            pair("train_tiles", self.train_tiles),
            pair("test_tiles", self.test_tiles),
            pair("tile_size", self.tile_size),
            pair("seed", self.seed),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.synthetic && self.dataset != DatasetKind::Custom {
            return Err(Error::Config("synthetic datasets use dataset = custom".into()));
        }
        if self.synthetic && self.tile_size < 16 {
            return Err(Error::Config("synthetic tiles must be at least 16 pixels".into()));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

/// Validates a dataset root (or generates a synthetic one inside the run
/// directory) and writes its manifest.
pub fn prepare(r: Resolved<PrepareSettings>) -> CliResult<()> {
    let s = &r.cfg;
    let root = if s.synthetic {
        None
    } else {
        Some(r.data_root()?.to_path_buf())
    };
    let run = r.create_run_dir("prepare-data")?;
    let root = match root {
        Some(root) => root,
        None => {
            let root = run.join("dataset");
            synthetic::write_dataset(&root, s.train_tiles, s.test_tiles, s.tile_size, s.seed)?;
            root
        }
    };
    let manifest = manifest_at(&root, s.dataset)?;
    manifest.write_text(&run.join("manifest.txt"))?;
    println!("dataset root: {}", root.display());
    println!(
        "{} training and {} test tiles, {} classes",
        manifest.ids(Split::Train).len(),
        manifest.ids(Split::Test).len(),
        manifest.num_classes
    );
    Ok(())
}

// ----------------------------------------------------------------------- train

#[derive(Default)]
pub struct TrainSettings {
    pub cfg: TrainConfig,
    /// Continue from this checkpoint; only `epochs` is taken from the settings.
    pub resume: Option<PathBuf>,
}

impl Keyed for TrainSettings {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "resume" => self.resume = optional_path(v),
            _ => self.cfg.set(key, v)?,
        }
        Ok(())
    }

    fn to_pairs(&self) -> Pairs {
        let mut p = self.cfg.to_pairs();
        p.extend(path_pair("resume", &self.resume));
        p
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }
}

pub fn train(r: Resolved<TrainSettings>) -> CliResult<()> {
    let cfg = &r.cfg.cfg;
    // An initialization checkpoint needs no data beyond the class list.
    let manifest = match (r.data_root.as_deref(), cfg.epochs) {
        (None, 0) if r.cfg.resume.is_none() => None,
        _ => Some(manifest_at(r.data_root()?, cfg.dataset)?),
    };
    let run = r.create_run_dir("train")?;
    let mut trainer = match &r.cfg.resume {
        Some(path) => Trainer::resume(path, Some(cfg.epochs))?,
        None => {
            let names = manifest
                .as_ref()
                .map_or_else(|| cfg.dataset.default_class_names(), |m| m.class_names.clone());
            Trainer::new(cfg, names)?
        }
    };
    let last = match &manifest {
        Some(m) => fit(&mut trainer, m, &run)?.checkpoints.last().cloned(),
        None => {
            let dir = run.join("checkpoints");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(checkpoint_name(0));
            trainer.save(&path)?;
            Some(path)
        }
    };
    if let Some(path) = last {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

// ------------------------------------------------------------------ synthesize

#[derive(Default)]
pub struct SynthSettings {
    pub checkpoint: Option<PathBuf>,
    pub split: Option<Split>,
    pub ids: Vec<String>,
    pub seed: u64,
}

impl Keyed for SynthSettings {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "checkpoint" => self.checkpoint = optional_path(v),
            "split" => self.split = Some(v.parse()?),
            "ids" => self.ids = parse_list(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Pairs {
        let mut p: Pairs = path_pair("checkpoint", &self.checkpoint).into_iter().collect();
        p.push(pair("split", self.split.unwrap_or(Split::Test)));
        p.push(pair("ids", join(&self.ids)));
        p.push(pair("seed", self.seed));
        p
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

pub fn synthesize(r: Resolved<SynthSettings>) -> CliResult<()> {
    let s = &r.cfg;
    let ckpt = s
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("missing --checkpoint <FILE> (generator checkpoint to synthesize with)"))?;
    let root = r.data_root()?.to_path_buf();
    let synth = Synthesizer::load(ckpt)?;
    let manifest = manifest_at(&root, synth.spec().kind)?;
    let ids = select_ids(&manifest, &s.ids, s.split.unwrap_or(Split::Test))?;
    let run = r.create_run_dir("synthesize")?;
    let out = run.join("synthesized");
    let written = synth.synthesize_ids(&manifest, &ids, &out)?;
    println!("synthesized {} tiles into {}", written.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------- train-segmenter

impl Keyed for SegmenterConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        SegmenterConfig::set(self, key, v)
    }

    fn to_pairs(&self) -> Pairs {
        SegmenterConfig::to_pairs(self)
    }

    fn validate(&self) -> Result<()> {
        SegmenterConfig::validate(self)
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

pub fn train_seg(r: Resolved<SegmenterConfig>) -> CliResult<()> {
    let manifest = manifest_at(r.data_root()?, r.cfg.dataset)?;
    let run = r.create_run_dir("train-segmenter")?;
    let (_, report) = train_segmenter(&r.cfg, &manifest, &run)?;
    if let (Some(first), Some(last)) = (report.history.first(), report.history.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.1, last.1, last.0);
    }
    println!("checkpoint: {}", report.checkpoint.display());
    Ok(())
}

// -------------------------------------------------------------------- evaluate

#[derive(Default)]
pub struct EvalSettings {
    pub segmenter: Option<PathBuf>,
    pub fakes: Option<PathBuf>,
    /// Score copies of the real tiles instead of synthesized ones.
    pub self_test: bool,
    pub split: Option<Split>,
    pub ids: Vec<String>,
    pub seed: u64,
}

impl Keyed for EvalSettings {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "segmenter" => self.segmenter = optional_path(v),
            "fakes" => self.fakes = optional_path(v),
            "self_test" => self.self_test = parse_bool(key, v)?,
            "split" => self.split = Some(v.parse()?),
            "ids" => self.ids = parse_list(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Pairs {
        let mut p: Pairs = path_pair("segmenter", &self.segmenter).into_iter().collect();
        p.extend(path_pair("fakes", &self.fakes));
        p.push(pair("self_test", self.self_test));
        p.push(pair("split", self.split.unwrap_or(Split::Test)));
        p.push(pair("ids", join(&self.ids)));
        p.push(pair("seed", self.seed));
        p
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

pub fn evaluate(r: Resolved<EvalSettings>) -> CliResult<()> {
    let s = &r.cfg;
    let seg_path = s
        .segmenter
        .as_ref()
        .ok_or_else(|| usage("missing --segmenter <FILE> (segmenter checkpoint from train-segmenter)"))?;
    let fakes = match (&s.fakes, s.self_test) {
        (Some(_), true) => return Err(usage("--fakes and --self-test are mutually exclusive")),
        (Some(dir), false) => FakeSource::Directory(dir),
        (None, true) => FakeSource::RealCopies,
        (None, false) => return Err(usage("missing --fakes <DIR> (or --self-test)")),
    };
    let root = r.data_root()?.to_path_buf();
    let seg = Segmenter::load(seg_path)?;
    let manifest = manifest_at(&root, seg.cfg().dataset)?;
    let ids = select_ids(&manifest, &s.ids, s.split.unwrap_or(Split::Test))?;
    let run = r.create_run_dir("evaluate")?;
    let reports = evaluate_run(&seg, &manifest, &ids, fakes)?;
    let write = |name: &str, text: String| -> CliResult<()> {
        let p = run.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    };
    write("report.csv", reports_to_csv(&reports))?;
    write("report.txt", reports_to_table(&reports))?;
    write(
        "report.json",
        serde_json::to_string_pretty(&reports).context("serializing the report")?,
    )?;
    print!("{}", reports_to_table(&reports));
    Ok(())
}

// ------------------------------------------------------------------ edit-flood

pub struct FloodSettings {
    pub dataset: DatasetKind,
    pub h_min: Option<f64>,
    /// Extra levels; every level in `{h_min} ∪ levels` is written.
    pub levels: Vec<f64>,
    pub radius: usize,
    pub water_class: u8,
    pub split: Split,
    pub ids: Vec<String>,
    /// When set, the edited tiles are also synthesized with this generator.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FloodSettings {
    fn default() -> Self {
        FloodSettings {
            dataset: DatasetKind::GeoNrw,
            h_min: None,
            levels: Vec::new(),
            radius: 1,
            water_class: DEFAULT_WATER_CLASS,
            split: Split::Test,
            ids: Vec::new(),
            checkpoint: None,
            seed: 0,
        }
    }
}

impl Keyed for FloodSettings {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.parse()?,
            "h_min" => self.h_min = Some(parse_value(key, v)?),
            "levels" => self.levels = parse_list(key, v)?,
            "radius" => self.radius = parse_value(key, v)?,
            "water_class" => self.water_class = parse_value(key, v)?,
            "split" => self.split = v.parse()?,
            "ids" => self.ids = parse_list(key, v)?,
            "checkpoint" => self.checkpoint = optional_path(v),
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Pairs {
        let mut p = vec![pair("dataset", self.dataset)];
        p.extend(self.h_min.map(|h| pair("h_min", h)));
        p.push(pair("levels", join(&self.levels)));
        p.push(pair("radius", self.radius));
        p.push(pair("water_class", self.water_class));
        p.push(pair("split", self.split));
        p.push(pair("ids", join(&self.ids)));
        p.extend(path_pair("checkpoint", &self.checkpoint));
        p.push(pair("seed", self.seed));
        p
    }

    fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::Config("radius must be at least 1".into()));
        }
        if self.h_min.into_iter().chain(self.levels.iter().copied()).any(|h| !h.is_finite()) {
            return Err(Error::Config("flood levels must be finite".into()));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

pub fn edit_flood(r: Resolved<FloodSettings>) -> CliResult<()> {
    let s = &r.cfg;
    let h_min = s
        .h_min
        .ok_or_else(|| usage("missing --h-min <METERS> (flood threshold)"))?;
    let manifest = manifest_at(r.data_root()?, s.dataset)?;
    let spec = FloodSpec {
        erosion_radius: s.radius,
        water_class: s.water_class,
        ..FloodSpec::new(h_min)
    };
    spec.validate(manifest.num_classes).map_err(|e| usage(e.to_string()))?;
    let synth = s.checkpoint.as_deref().map(Synthesizer::load).transpose()?;
    let ids = select_ids(&manifest, &s.ids, s.split)?;
    let mut levels = vec![h_min];
    levels.extend(s.levels.iter().copied().filter(|&l| l != h_min));
    let run = r.create_run_dir("edit-flood")?;
    let out = run.join("flooded");
    let written = write_flooded_dataset(&manifest, &ids, &levels, &spec, &out)?;
    println!("wrote {} edited tiles to {}", written.len(), out.display());
    if let Some(synth) = synth {
        let edited = manifest_at(&out, DatasetKind::Custom)?;
        let dir = run.join("synthesized");
        synth.synthesize_ids(&edited, &written, &dir)?;
        println!("synthesized the edited tiles into {}", dir.display());
    }
    Ok(())
}
