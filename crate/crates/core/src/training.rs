//! GAN training: configuration, the per-batch update, the epoch loop with
//! checkpoints and resume, and tiled inference.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, RngState, FORMAT_VERSION};
use crate::config::{parse_bool, parse_value, Pairs};
use crate::data::raster_io::{write_png, write_tiff_f32, GeoTags};
use crate::data::{
    load_tile, BatchAssembler, Batch, DatasetKind, DatasetManifest, InputRaster, Sample,
    SampleSpec, Split, TargetImage, TargetRange,
};
use crate::error::{Error, Result};
use crate::losses::{d_hinge, g_total, scalar, LossWeights};
use crate::nets::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, ParamBuilder,
    ParamStore, Variant,
};
use crate::optim::{Adam, AdamConfig};

/// Every knob of a training run. Defaults are the full-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Square training crop; also the inference window.
    pub crop: usize,
    pub seed: u64,
    pub variant: Variant,
    pub dataset: DatasetKind,
    pub input: InputRaster,
    pub target: TargetImage,
    pub target_range: TargetRange,
    pub dem_mean_subtract: bool,
    pub sar_db_factor: f64,
    pub loss: LossWeights,
    pub base_width: usize,
    pub spade_hidden: usize,
    pub body_blocks: usize,
    pub d_base_width: usize,
    /// Discriminator scales; 0 picks 2 for crops below 512 and 3 otherwise.
    pub d_scales: usize,
    pub spectral_norm: bool,
    pub flip: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr_g: 1e-4,
            lr_d: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            crop: 256,
            seed: 0,
            variant: Variant::Fusion,
            dataset: DatasetKind::GeoNrw,
            input: InputRaster::Dem,
            target: TargetImage::Rgb,
            target_range: TargetRange::Unit,
            dem_mean_subtract: false,
            sar_db_factor: 10.0,
            loss: LossWeights::default(),
            base_width: 64,
            spade_hidden: 128,
            body_blocks: 9,
            d_base_width: 64,
            d_scales: 0,
            spectral_norm: true,
            flip: false,
            checkpoint_every: 10,
            log_every: 50,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Narrow networks on 64-pixel crops: 300 steps over 8 tiles at batch 4.
    pub fn smoke() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 4,
            crop: 64,
            dataset: DatasetKind::Custom,
            base_width: 8,
            spade_hidden: 16,
            d_base_width: 8,
            checkpoint_every: 50,
            ..TrainConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr_g" => self.lr_g = parse_value(key, v)?,
            "lr_d" => self.lr_d = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "crop" => self.crop = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "variant" => self.variant = v.parse()?,
            "dataset" => self.dataset = v.parse()?,
            "input" => self.input = v.parse()?,
            "target" => self.target = v.parse()?,
            "target_range" => self.target_range = v.parse()?,
            "dem_mean_subtract" => self.dem_mean_subtract = parse_bool(key, v)?,
            "sar_db_factor" => self.sar_db_factor = parse_value(key, v)?,
            "lambda_fm" => self.loss.lambda_fm = parse_value(key, v)?,
            "base_width" => self.base_width = parse_value(key, v)?,
            "spade_hidden" => self.spade_hidden = parse_value(key, v)?,
            "body_blocks" => self.body_blocks = parse_value(key, v)?,
            "d_base_width" => self.d_base_width = parse_value(key, v)?,
            "d_scales" => self.d_scales = parse_value(key, v)?,
            "spectral_norm" => self.spectral_norm = parse_bool(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "log_every" => self.log_every = parse_value(key, v)?,
            "workers" => self.workers = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown training key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Pairs {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("epochs", self.epochs.to_string()),
            p("batch_size", self.batch_size.to_string()),
            p("lr_g", self.lr_g.to_string()),
            p("lr_d", self.lr_d.to_string()),
            p("adam_beta1", self.adam_beta1.to_string()),
            p("adam_beta2", self.adam_beta2.to_string()),
            p("crop", self.crop.to_string()),
            p("seed", self.seed.to_string()),
            p("variant", self.variant.to_string()),
            p("dataset", self.dataset.to_string()),
            p("input", self.input.to_string()),
            p("target", self.target.to_string()),
            p("target_range", self.target_range.to_string()),
            p("dem_mean_subtract", self.dem_mean_subtract.to_string()),
            p("sar_db_factor", self.sar_db_factor.to_string()),
            p("lambda_fm", self.loss.lambda_fm.to_string()),
            p("base_width", self.base_width.to_string()),
            p("spade_hidden", self.spade_hidden.to_string()),
            p("body_blocks", self.body_blocks.to_string()),
            p("d_base_width", self.d_base_width.to_string()),
            p("d_scales", self.d_scales.to_string()),
            p("spectral_norm", self.spectral_norm.to_string()),
            p("flip", self.flip.to_string()),
            p("checkpoint_every", self.checkpoint_every.to_string()),
            p("log_every", self.log_every.to_string()),
            p("workers", self.workers.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers != 1 {
            return Err(Error::Config(format!(
                "workers = {}: data-parallel training needs synchronized batch \
                 normalization, which this build does not provide; use workers = 1",
                self.workers
            )));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.crop == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, crop, log_every and checkpoint_every must be positive".into(),
            ));
        }
        if self.crop % 16 != 0 {
            return Err(Error::Config(format!("crop {} must be a multiple of 16", self.crop)));
        }
        match (self.variant, self.input) {
            (Variant::LabelOnly, i) if i != InputRaster::None => {
                return Err(Error::Config(
                    "variant label_only takes no raster input; set input = none".into(),
                ))
            }
            (v, InputRaster::None) if v != Variant::LabelOnly => {
                return Err(Error::Config(format!("variant {v} needs input = dem or sar")))
            }
            _ => {}
        }
        self.loss.validate()?;
        AdamConfig::new(self.lr_g, self.adam_beta1, self.adam_beta2).validate()?;
        Ok(())
    }

    pub fn sample_spec(&self, num_classes: usize) -> SampleSpec {
        SampleSpec {
            num_classes,
            target_range: self.target_range,
            dem_mean_subtract: self.dem_mean_subtract,
            sar_db_factor: self.sar_db_factor,
            ..SampleSpec::new(self.dataset, self.input, self.target)
        }
    }

    pub fn generator_config(&self, num_classes: usize) -> GeneratorConfig {
        let spec = self.sample_spec(num_classes);
        GeneratorConfig {
            base_width: self.base_width,
            spade_hidden: self.spade_hidden,
            body_blocks: self.body_blocks,
            train_size: self.crop,
            spectral: self.spectral_norm,
            ..GeneratorConfig::new(
                self.variant,
                spec.raster_channels(),
                num_classes,
                spec.target_channels(),
            )
        }
    }

    pub fn discriminator_config(&self, num_classes: usize) -> DiscriminatorConfig {
        let spec = self.sample_spec(num_classes);
        let condition = match self.variant {
            Variant::LabelOnly => num_classes,
            _ => spec.raster_channels() + num_classes,
        };
        let scales = if self.d_scales == 0 {
            DiscriminatorConfig::scales_for(self.crop)
        } else {
            self.d_scales
        };
        DiscriminatorConfig {
            base_width: self.d_base_width,
            spectral: self.spectral_norm,
            ..DiscriminatorConfig::new(spec.target_channels() + condition, scales)
        }
    }
}

/// Generator and discriminator with their parameter stores.
pub struct Gan {
    pub cfg: TrainConfig,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub spec: SampleSpec,
    pub g: Generator,
    pub d: Discriminator,
    pub g_params: ParamStore,
    pub d_params: ParamStore,
}

impl Gan {
    pub fn new(cfg: &TrainConfig, class_names: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        let num_classes = class_names.len();
        let spec = cfg.sample_spec(num_classes);
        spec.validate()?;
        let g_params = ParamStore::new(DType::F32);
        let d_params = ParamStore::new(DType::F32);
        let g = Generator::new(&ParamBuilder::new(&g_params, cfg.seed), cfg.generator_config(num_classes))?;
        let d = Discriminator::new(
            &ParamBuilder::new(&d_params, cfg.seed.wrapping_add(1)),
            cfg.discriminator_config(num_classes),
        )?;
        d.check_input_size(cfg.crop);
        Ok(Gan {
            cfg: cfg.clone(),
            num_classes,
            class_names,
            spec,
            g,
            d,
            g_params,
            d_params,
        })
    }

    fn raster<'a>(&self, batch: &'a Batch) -> Result<Option<&'a Tensor>> {
        if !self.cfg.variant.uses_raster() {
            return Ok(None);
        }
        batch
            .raster
            .as_ref()
            .map(Some)
            .ok_or_else(|| Error::Dataset(format!("variant {} needs a raster input", self.cfg.variant)))
    }

    pub fn generate(&self, batch: &Batch, mode: Mode) -> Result<Tensor> {
        self.g.forward(self.raster(batch)?, Some(&batch.onehot), mode)
    }

    /// Conditioning input of the discriminator.
    pub fn condition(&self, batch: &Batch) -> Result<Tensor> {
        match self.raster(batch)? {
            None => Ok(batch.onehot.clone()),
            Some(r) => Ok(Tensor::cat(&[r, &batch.onehot], 1)?),
        }
    }

    pub fn metadata_config(&self) -> serde_json::Value {
        serde_json::json!({
            "train": self.cfg,
            "class_names": self.class_names,
        })
    }

    pub fn normalization(&self) -> serde_json::Value {
        serde_json::json!({
            "sample": self.spec,
            "target": self.spec.target_norm(),
            "input": self.spec.input_norm(),
        })
    }

    /// Rebuilds the networks described by a checkpoint and loads its weights.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, BTreeMap<String, Tensor>, CheckpointMeta)> {
        let (tensors, meta) = checkpoint::load(path)?;
        if meta.kind != "gan" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, not a GAN",
                path.display(),
                meta.kind
            )));
        }
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let cfg: TrainConfig = serde_json::from_value(meta.config["train"].clone()).map_err(bad)?;
        let names: Vec<String> = serde_json::from_value(meta.config["class_names"].clone()).map_err(bad)?;
        let gan = Gan::new(&cfg, names)?;
        gan.g_params.restore(&with_prefix(&tensors, "g."))?;
        gan.d_params.restore(&with_prefix(&tensors, "d."))?;
        Ok((gan, tensors, meta))
    }
}

fn with_prefix(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_d: f64,
    /// Full generator objective.
    pub loss_g: f64,
    pub loss_g_adv: f64,
    pub loss_fm: f64,
}

/// Everything that evolves during training.
pub struct Trainer {
    pub gan: Gan,
    opt_g: Adam,
    opt_d: Adam,
    /// Drives shuffling, cropping and flipping.
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, class_names: Vec<String>) -> Result<Self> {
        let gan = Gan::new(cfg, class_names)?;
        let (opt_g, opt_d) = Self::optimizers(&gan)?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            gan,
            opt_g,
            opt_d,
            epoch: 0,
            step: 0,
        })
    }

    fn optimizers(gan: &Gan) -> Result<(Adam, Adam)> {
        let c = &gan.cfg;
        let mk = |lr: f64| AdamConfig::new(lr, c.adam_beta1, c.adam_beta2);
        Ok((
            Adam::new(gan.g_params.trainable(), mk(c.lr_g))?,
            Adam::new(gan.d_params.trainable(), mk(c.lr_d))?,
        ))
    }

    /// Continues a run from a checkpoint, optionally with a new epoch target.
    pub fn resume(path: &Path, epochs: Option<u64>) -> Result<Self> {
        let (mut gan, tensors, meta) = Gan::from_checkpoint(path)?;
        if let Some(e) = epochs {
            gan.cfg.epochs = e;
        }
        let (mut opt_g, mut opt_d) = Self::optimizers(&gan)?;
        opt_g.load_state("opt_g", &tensors, meta.step)?;
        opt_d.load_state("opt_d", &tensors, meta.step)?;
        Ok(Trainer {
            gan,
            opt_g,
            opt_d,
            rng: meta.rng.restore()?,
            epoch: meta.epoch,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.gan.g_params.snapshot() {
            tensors.insert(format!("g.{k}"), v);
        }
        for (k, v) in self.gan.d_params.snapshot() {
            tensors.insert(format!("d.{k}"), v);
        }
        tensors.extend(self.opt_g.state("opt_g"));
        tensors.extend(self.opt_d.state("opt_d"));
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: "gan".into(),
            config: self.gan.metadata_config(),
            normalization: self.gan.normalization(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
            step: self.step,
        };
        checkpoint::save(path, &tensors, &meta)
    }

    /// One discriminator update on real and detached fake images, then one
    /// generator update against the freshly updated discriminator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let gan = &self.gan;
        let real = batch
            .target
            .as_ref()
            .ok_or_else(|| Error::Dataset("training batch has no target image".into()))?;
        let n = real.dim(0)?;
        let step = self.step + 1;
        let non_finite = |what: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                log::error!("{what} is {v} at step {step}; tiles: {:?}", batch.ids);
                Err(Error::NonFiniteLoss {
                    step,
                    tiles: batch.ids.clone(),
                })
            }
        };
        let fake = gan.generate(batch, Mode::Train)?;
        let cond = gan.condition(batch)?;
        let cond2 = Tensor::cat(&[&cond, &cond], 0)?;

        let d_out = gan.d.forward(&Tensor::cat(&[&fake.detach(), real], 0)?, &cond2, Mode::Train)?;
        let (d_fake, d_real) = d_out.split_batch(n)?;
        let loss_d = d_hinge(&d_real.scores(), &d_fake.scores())?;
        let loss_d_value = scalar(&loss_d)?;
        non_finite("discriminator loss", loss_d_value)?;
        self.opt_d.step(&loss_d.backward()?)?;

        let d_out = gan.d.forward(&Tensor::cat(&[&fake, real], 0)?, &cond2, Mode::Train)?;
        let (d_fake, d_real) = d_out.split_batch(n)?;
        let g_loss = g_total(&d_fake.scores(), &d_fake.features(), &d_real.features(), gan.cfg.loss)?;
        let loss_g = scalar(&g_loss.total)?;
        non_finite("generator loss", loss_g)?;
        self.opt_g.step(&g_loss.total.backward()?)?;

        self.step = step;
        Ok(StepMetrics {
            step,
            loss_d: loss_d_value,
            loss_g,
            loss_g_adv: scalar(&g_loss.adversarial)?,
            loss_fm: scalar(&g_loss.feature_match)?,
        })
    }
}

/// Loads and normalizes tiles, keeping small datasets in memory.
pub struct SampleSource<'a> {
    manifest: &'a DatasetManifest,
    spec: SampleSpec,
    cache: Option<HashMap<String, Sample>>,
}

const CACHE_LIMIT: usize = 512;

impl<'a> SampleSource<'a> {
    pub fn new(manifest: &'a DatasetManifest, spec: SampleSpec, ids: &[String]) -> Result<Self> {
        let mut src = SampleSource {
            manifest,
            spec,
            cache: None,
        };
        if ids.len() <= CACHE_LIMIT {
            let mut cache = HashMap::new();
            for id in ids {
                cache.insert(id.clone(), src.load(id)?);
            }
            src.cache = Some(cache);
        }
        Ok(src)
    }

    fn load(&self, id: &str) -> Result<Sample> {
        self.spec.prepare(&load_tile(self.manifest, id)?)
    }

    pub fn get(&self, id: &str) -> Result<Sample> {
        match self.cache.as_ref().and_then(|c| c.get(id)) {
            Some(s) => Ok(s.clone()),
            None => self.load(id),
        }
    }
}

pub struct FitReport {
    pub history: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub curve: PathBuf,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.safetensors")
}

/// Trains until `trainer.gan.cfg.epochs` epochs are complete, writing
/// checkpoints under `out_dir/checkpoints` and the loss curve to
/// `out_dir/training_curve.csv`.
pub fn fit(trainer: &mut Trainer, manifest: &DatasetManifest, out_dir: &Path) -> Result<FitReport> {
    let cfg = trainer.gan.cfg.clone();
    if manifest.num_classes != trainer.gan.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the model was built for {}",
            manifest.num_classes, trainer.gan.num_classes
        )));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let curve = out_dir.join("training_curve.csv");
    let mut csv = BufWriter::new(File::create(&curve).map_err(|e| Error::io(&curve, e))?);
    writeln!(csv, "step,loss_d,loss_g,loss_fm").map_err(|e| Error::io(&curve, e))?;

    let mut report = FitReport {
        history: Vec::new(),
        checkpoints: Vec::new(),
        curve: curve.clone(),
    };
    let save = |trainer: &Trainer, report: &mut FitReport| -> Result<()> {
        let path = ckpt_dir.join(checkpoint_name(trainer.epoch));
        trainer.save(&path)?;
        log::info!("saved {}", path.display());
        report.checkpoints.push(path);
        Ok(())
    };
    if cfg.epochs == 0 && trainer.epoch == 0 {
        save(trainer, &mut report)?;
        csv.flush().map_err(|e| Error::io(&curve, e))?;
        return Ok(report);
    }

    let ids = manifest.ids(Split::Train).to_vec();
    if ids.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let source = SampleSource::new(manifest, trainer.gan.spec, &ids)?;
    let assembler = BatchAssembler {
        num_classes: trainer.gan.num_classes,
        crop: Some(cfg.crop),
        flip: cfg.flip,
    };
    let drop_last = ids.len() >= cfg.batch_size;
    while trainer.epoch < cfg.epochs {
        let mut order = ids.clone();
        order.shuffle(&mut trainer.rng);
        for chunk in order.chunks(cfg.batch_size) {
            if drop_last && chunk.len() < cfg.batch_size {
                continue;
            }
            let samples = chunk.iter().map(|id| source.get(id)).collect::<Result<Vec<_>>>()?;
            let batch = assembler.assemble(&samples, &mut trainer.rng)?;
            let m = trainer.train_step(&batch)?;
            if m.step % cfg.log_every == 0 {
                writeln!(csv, "{},{},{},{}", m.step, m.loss_d, m.loss_g, m.loss_fm)
                    .map_err(|e| Error::io(&curve, e))?;
                csv.flush().map_err(|e| Error::io(&curve, e))?;
                log::info!(
                    "epoch {} step {}: loss_d {:.4} loss_g {:.4} fm {:.4}",
                    trainer.epoch + 1,
                    m.step,
                    m.loss_d,
                    m.loss_g,
                    m.loss_fm
                );
            }
            report.history.push(m);
        }
        trainer.epoch += 1;
        if trainer.epoch % cfg.checkpoint_every == 0 || trainer.epoch == cfg.epochs {
            save(trainer, &mut report)?;
        }
    }
    csv.flush().map_err(|e| Error::io(&curve, e))?;
    Ok(report)
}

/// Frozen generator applied tile by tile.
pub struct Synthesizer {
    pub gan: Gan,
}

fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Shape(e.to_string()))
}

/// Pads rows and columns up to `(h, w)` by repeating the last row/column.
fn pad_edge3(a: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, sh, sw) = a.dim();
    Array3::from_shape_fn((c, h, w), |(k, r, q)| a[[k, r.min(sh - 1), q.min(sw - 1)]])
}

fn pad_edge2(a: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (sh, sw) = a.dim();
    Array2::from_shape_fn((h, w), |(r, q)| a[[r.min(sh - 1), q.min(sw - 1)]])
}

impl Synthesizer {
    pub fn load(path: &Path) -> Result<Self> {
        let (gan, _, _) = Gan::from_checkpoint(path)?;
        Ok(Synthesizer { gan })
    }

    pub fn spec(&self) -> &SampleSpec {
        &self.gan.spec
    }

    /// Normalized generator output for a whole sample, clamped to the target
    /// range. Frames are padded to a multiple of the training crop, cut
    /// into non-overlapping windows and stitched back.
    pub fn generate(&self, sample: &Sample) -> Result<Array3<f32>> {
        let win = self.gan.cfg.crop;
        let (h, w) = (sample.height(), sample.width());
        let (ph, pw) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        let padded = Sample {
            id: sample.id.clone(),
            raster: sample.raster.as_ref().map(|r| pad_edge3(r, ph, pw)),
            labels: pad_edge2(&sample.labels, ph, pw),
            target: None,
        };
        let assembler = BatchAssembler {
            num_classes: self.gan.num_classes,
            crop: None,
            flip: false,
        };
        let channels = self.gan.spec.target_channels();
        let mut out = Array3::<f32>::zeros((channels, ph, pw));
        let (lo, hi) = self.gan.spec.target_norm().target;
        for top in (0..ph).step_by(win) {
            for left in (0..pw).step_by(win) {
                let batch = assembler.stack(vec![padded.crop(top, left, win, win)])?;
                let y = self.gan.generate(&batch, Mode::Eval)?.squeeze(0)?;
                let y = tensor_to_array3(&y)?;
                out.slice_mut(ndarray::s![.., top..top + win, left..left + win])
                    .assign(&y);
            }
        }
        let out = out.slice(ndarray::s![.., ..h, ..w]).to_owned();
        Ok(out.mapv(|v| (f64::from(v).clamp(lo, hi)) as f32))
    }

    /// Generator output converted back to the target sensor's units.
    pub fn to_native(&self, normalized: &Array3<f32>) -> Result<Array3<f32>> {
        self.gan.spec.target_norm().denormalize_saturating(normalized)
    }

    /// 8-bit preview of a normalized output: the target range mapped to
    /// 0..=255, first band only for two-band SAR.
    pub fn preview(&self, normalized: &Array3<f32>) -> Array3<u8> {
        let (lo, hi) = self.gan.spec.target_norm().target;
        let bands = if normalized.dim().0 == 3 { 3 } else { 1 };
        let view = normalized.slice(ndarray::s![..bands, .., ..]);
        view.mapv(|v| ((f64::from(v) - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
    }

    /// Writes `<out_dir>/<id>.tif` (float32, native units, georeferenced like
    /// the input tile) and `<out_dir>/<id>.png` for every id.
    pub fn synthesize_ids(&self, manifest: &DatasetManifest, ids: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for id in ids {
            let tile = load_tile(manifest, id)?;
            let sample = self.gan.spec.prepare_input(&tile)?;
            let normalized = self.generate(&sample)?;
            let native = self.to_native(&normalized)?;
            let tif = output_path(out_dir, id, "tif");
            if let Some(dir) = tif.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let geo = crate::data::tile_geotags(manifest, id)
                .unwrap_or_else(|_| GeoTags::with_pixel_size(tile.pixel_size_m));
            write_tiff_f32(&tif, &native, &geo)?;
            write_png(&output_path(out_dir, id, "png"), &self.preview(&normalized))?;
            written.push(tif);
        }
        Ok(written)
    }
}

/// Location of a synthesized tile below `dir`, mirroring the tile id.
pub fn output_path(dir: &Path, id: &str, ext: &str) -> PathBuf {
    dir.join(format!("{id}.{ext}"))
}
