//! U-Net segmenter used to score synthesized images: training on real
//! images, label inference and feature extraction.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, RngState, FORMAT_VERSION};
use crate::config::{parse_value, Pairs};
use crate::data::{
    BatchAssembler, DatasetKind, DatasetManifest, InputRaster, Sample, SampleSpec, Split,
    TargetImage, TargetRange,
};
use crate::error::{Error, Result};
use crate::losses::scalar;
use crate::nets::layers::{BatchNorm, Conv2d, ConvSpec, Mode};
use crate::nets::ops::{max_pool2x, upsample_bilinear2x};
use crate::nets::{ParamBuilder, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::training::SampleSource;

pub const CHECKPOINT_KIND: &str = "segmenter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub levels: usize,
    pub base_width: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Square training crop; 0 trains on whole tiles.
    pub crop: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    /// Image type the segmenter reads.
    pub image: TargetImage,
    pub target_range: TargetRange,
    pub sar_db_factor: f64,
    pub log_every: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            levels: 5,
            base_width: 64,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 100,
            batch_size: 32,
            crop: 0,
            seed: 0,
            dataset: DatasetKind::GeoNrw,
            image: TargetImage::Rgb,
            target_range: TargetRange::Unit,
            sar_db_factor: 10.0,
            log_every: 10,
        }
    }
}

impl SegmenterConfig {
    /// Narrow five-level U-Net on 64-pixel crops of a handful of tiles.
    pub fn smoke() -> Self {
        SegmenterConfig {
            base_width: 8,
            epochs: 20,
            batch_size: 4,
            crop: 64,
            dataset: DatasetKind::Custom,
            log_every: 1,
            ..SegmenterConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "levels" => self.levels = parse_value(key, v)?,
            "base_width" => self.base_width = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "crop" => self.crop = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "dataset" => self.dataset = v.parse()?,
            "image" => self.image = v.parse()?,
            "target_range" => self.target_range = v.parse()?,
            "sar_db_factor" => self.sar_db_factor = parse_value(key, v)?,
            "log_every" => self.log_every = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown segmenter key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Pairs {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("levels", self.levels.to_string()),
            p("base_width", self.base_width.to_string()),
            p("lr", self.lr.to_string()),
            p("adam_beta1", self.adam_beta1.to_string()),
            p("adam_beta2", self.adam_beta2.to_string()),
            p("epochs", self.epochs.to_string()),
            p("batch_size", self.batch_size.to_string()),
            p("crop", self.crop.to_string()),
            p("seed", self.seed.to_string()),
            p("dataset", self.dataset.to_string()),
            p("image", self.image.to_string()),
            p("target_range", self.target_range.to_string()),
            p("sar_db_factor", self.sar_db_factor.to_string()),
            p("log_every", self.log_every.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("U-Net needs at least 2 levels, got {}", self.levels)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("segmenter lr must be positive, got {}", self.lr)));
        }
        if self.base_width == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("base_width, batch_size and log_every must be positive".into()));
        }
        if self.crop % self.multiple() != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a multiple of {}",
                self.crop,
                self.multiple()
            )));
        }
        AdamConfig::new(self.lr, self.adam_beta1, self.adam_beta2).validate()
    }

    /// Spatial sizes must be divisible by this.
    pub fn multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Length of the pooled bottleneck feature vector.
    pub fn feature_len(&self) -> usize {
        self.width(self.levels - 1)
    }

    /// How images are read and normalized (same as the GAN target).
    pub fn sample_spec(&self, num_classes: usize) -> SampleSpec {
        SampleSpec {
            num_classes,
            target_range: self.target_range,
            sar_db_factor: self.sar_db_factor,
            ..SampleSpec::new(self.dataset, InputRaster::None, self.image)
        }
    }
}

/// (3×3 conv, batch norm, ReLU) twice.
#[derive(Clone)]
struct DoubleConv {
    layers: [(Conv2d, BatchNorm); 2],
}

impl DoubleConv {
    fn new(pb: &ParamBuilder, fin: usize, fout: usize) -> Result<Self> {
        let layer = |i: usize, c_in: usize| -> Result<(Conv2d, BatchNorm)> {
            Ok((
                Conv2d::new(&pb.pp(format!("conv_{i}")), ConvSpec::new(c_in, fout, 3).bias(false))?,
                BatchNorm::new(&pb.pp(format!("bn_{i}")), fout, true)?,
            ))
        };
        Ok(DoubleConv {
            layers: [layer(0, fin)?, layer(1, fout)?],
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for (conv, bn) in &self.layers {
            y = bn.forward(&conv.forward(&y, mode)?, mode)?.relu()?;
        }
        Ok(y)
    }
}

pub struct UNet {
    pub cfg: SegmenterConfig,
    pub in_channels: usize,
    pub num_classes: usize,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl UNet {
    pub fn new(pb: &ParamBuilder, cfg: &SegmenterConfig, in_channels: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut down = Vec::new();
        let mut fin = in_channels;
        for l in 0..cfg.levels {
            down.push(DoubleConv::new(&pb.pp(format!("down_{l}")), fin, cfg.width(l))?);
            fin = cfg.width(l);
        }
        let mut up = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            up.push(DoubleConv::new(
                &pb.pp(format!("up_{l}")),
                cfg.width(l + 1) + cfg.width(l),
                cfg.width(l),
            )?);
        }
        let head = Conv2d::new(&pb.pp("head"), ConvSpec::new(cfg.width(0), num_classes, 1))?;
        Ok(UNet {
            cfg: cfg.clone(),
            in_channels,
            num_classes,
            down,
            up,
            head,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "segmenter expects {} image channels, got {c}",
                self.in_channels
            )));
        }
        let m = self.cfg.multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("segmenter input {h}x{w} is not a multiple of {m}")));
        }
        Ok(())
    }

    /// Logits `N × C × H × W` and the bottleneck activation.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        self.check(x)?;
        let mut skips = Vec::new();
        let mut y = x.clone();
        for (l, block) in self.down.iter().enumerate() {
            if l > 0 {
                y = max_pool2x(&y)?;
            }
            y = block.forward(&y, mode)?;
            skips.push(y.clone());
        }
        let bottleneck = skips.pop().expect("at least two levels");
        y = bottleneck.clone();
        for block in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            y = block.forward(&Tensor::cat(&[&upsample_bilinear2x(&y)?, &skip], 1)?, mode)?;
        }
        Ok((self.head.forward(&y, mode)?, bottleneck))
    }
}

/// Mean per-pixel cross entropy between logits and one-hot targets.
pub fn cross_entropy(logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    if logits.dims() != onehot.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} and targets {:?} differ",
            logits.dims(),
            onehot.dims()
        )));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let picked = (shifted * onehot)?.sum_keepdim(1)?;
    Ok((lse - picked)?.mean_all()?)
}

fn to_tensor(a: &Array3<f32>) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data = a.as_standard_layout().iter().copied().collect::<Vec<_>>();
    Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?)
}

fn pad_to_multiple(a: &Array3<f32>, m: usize) -> Array3<f32> {
    let (c, h, w) = a.dim();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return a.clone();
    }
    Array3::from_shape_fn((c, ph, pw), |(k, r, q)| a[[k, r.min(h - 1), q.min(w - 1)]])
}

/// Trained network plus what is needed to feed it.
pub struct Segmenter {
    pub net: UNet,
    pub params: ParamStore,
    pub spec: SampleSpec,
    pub class_names: Vec<String>,
}

impl Segmenter {
    pub fn new(cfg: &SegmenterConfig, class_names: Vec<String>) -> Result<Self> {
        let num_classes = class_names.len();
        let spec = cfg.sample_spec(num_classes);
        spec.validate()?;
        let params = ParamStore::new(DType::F32);
        let net = UNet::new(&ParamBuilder::new(&params, cfg.seed), cfg, spec.target_channels(), num_classes)?;
        Ok(Segmenter {
            net,
            params,
            spec,
            class_names,
        })
    }

    pub fn cfg(&self) -> &SegmenterConfig {
        &self.net.cfg
    }

    fn metadata(&self, rng: &ChaCha8Rng, epoch: u64, step: u64) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::json!({
                "segmenter": self.net.cfg,
                "class_names": self.class_names,
                "in_channels": self.net.in_channels,
                "image": self.spec.target,
            }),
            normalization: serde_json::json!({
                "sample": self.spec,
                "image": self.spec.target_norm(),
            }),
            rng: RngState::capture(rng),
            epoch,
            step,
        }
    }

    pub fn save(&self, path: &Path, rng: &ChaCha8Rng, epoch: u64, step: u64) -> Result<()> {
        checkpoint::save(path, &self.params.snapshot(), &self.metadata(rng, epoch, step))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load(path)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, not a segmenter",
                path.display(),
                meta.kind
            )));
        }
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let cfg: SegmenterConfig = serde_json::from_value(meta.config["segmenter"].clone()).map_err(bad)?;
        let names: Vec<String> = serde_json::from_value(meta.config["class_names"].clone()).map_err(bad)?;
        let seg = Segmenter::new(&cfg, names)?;
        seg.params.restore(&tensors)?;
        Ok(seg)
    }

    fn check_image(&self, image: &Array3<f32>) -> Result<()> {
        if image.dim().0 != self.net.in_channels {
            return Err(Error::Shape(format!(
                "segmenter expects {} image channels, got {}",
                self.net.in_channels,
                image.dim().0
            )));
        }
        Ok(())
    }

    /// Per-class logits `C × H × W` of a normalized image of any size.
    pub fn logits(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        self.check_image(image)?;
        let (_, h, w) = image.dim();
        let x = to_tensor(&pad_to_multiple(image, self.net.cfg.multiple()))?;
        let (logits, _) = self.net.forward(&x, Mode::Eval)?;
        let logits = logits.squeeze(0)?.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let (c, _, _) = logits.dims3()?;
        let v = logits.flatten_all()?.to_vec1::<f32>()?;
        Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Per-pixel argmax label map.
    pub fn segment(&self, image: &Array3<f32>) -> Result<Array2<u8>> {
        Ok(crate::data::argmax_planes(&self.logits(image)?))
    }

    /// Spatially averaged bottleneck activation.
    pub fn features(&self, image: &Array3<f32>) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let x = to_tensor(&pad_to_multiple(image, self.net.cfg.multiple()))?;
        let (_, bottleneck) = self.net.forward(&x, Mode::Eval)?;
        Ok(bottleneck
            .mean((2, 3))?
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Label maps and features of several equally sized images in one pass.
    pub fn segment_batch(&self, images: &[Array3<f32>]) -> Result<(Vec<Array2<u8>>, Vec<Vec<f64>>)> {
        if images.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let dims = images[0].dim();
        for im in images {
            self.check_image(im)?;
            if im.dim() != dims {
                return Err(Error::Shape("batched images differ in size".into()));
            }
        }
        let (_, h, w) = dims;
        let m = self.net.cfg.multiple();
        let xs = images
            .iter()
            .map(|im| to_tensor(&pad_to_multiple(im, m)))
            .collect::<Result<Vec<_>>>()?;
        let (logits, bottleneck) = self.net.forward(&Tensor::cat(&xs, 0)?, Mode::Eval)?;
        let labels = logits
            .narrow(2, 0, h)?
            .narrow(3, 0, w)?
            .argmax(1)?
            .to_dtype(DType::U8)?;
        let feats = bottleneck.mean((2, 3))?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut maps = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let v = labels.get(i)?.flatten_all()?.to_vec1::<u8>()?;
            maps.push(Array2::from_shape_vec((h, w), v).map_err(|e| Error::Shape(e.to_string()))?);
        }
        Ok((maps, feats))
    }
}

pub struct SegmenterFitReport {
    /// `(step, loss)` for every step.
    pub history: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Trains a fresh segmenter on the real images of the training split and
/// writes `out_dir/segmenter.safetensors` and `out_dir/segmenter_curve.csv`.
pub fn train_segmenter(cfg: &SegmenterConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<(Segmenter, SegmenterFitReport)> {
    let seg = Segmenter::new(cfg, manifest.class_names.clone())?;
    let ids = manifest.ids(Split::Train).to_vec();
    if ids.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let source = SampleSource::new(manifest, seg.spec, &ids)?;
    warn_absent_classes(&source, &ids, &seg.class_names)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let curve = out_dir.join("segmenter_curve.csv");
    let mut csv = BufWriter::new(File::create(&curve).map_err(|e| Error::io(&curve, e))?);
    writeln!(csv, "step,loss").map_err(|e| Error::io(&curve, e))?;

    let mut opt = Adam::new(
        seg.params.trainable(),
        AdamConfig::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let assembler = BatchAssembler {
        num_classes: seg.class_names.len(),
        crop: (cfg.crop > 0).then_some(cfg.crop),
        flip: false,
    };
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|id| source.get(id).map(|s| as_image_sample(s, cfg.multiple())))
                .collect::<Result<Vec<_>>>()?;
            let batch = assembler.assemble(&samples, &mut rng)?;
            let image = batch
                .target
                .as_ref()
                .ok_or_else(|| Error::Dataset("segmenter batch has no image".into()))?;
            let (logits, _) = seg.net.forward(image, Mode::Train)?;
            let loss = cross_entropy(&logits, &batch.onehot)?;
            let value = scalar(&loss)?;
            step += 1;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    tiles: batch.ids.clone(),
                });
            }
            opt.step(&loss.backward()?)?;
            history.push((step, value));
            if step % cfg.log_every == 0 || step == 1 {
                writeln!(csv, "{step},{value}").map_err(|e| Error::io(&curve, e))?;
                log::info!("segmenter epoch {} step {step}: loss {value:.4}", epoch + 1);
            }
        }
    }
    csv.flush().map_err(|e| Error::io(&curve, e))?;
    let checkpoint = out_dir.join("segmenter.safetensors");
    seg.save(&checkpoint, &rng, cfg.epochs, step)?;
    Ok((
        seg,
        SegmenterFitReport {
            history,
            checkpoint,
            curve,
        },
    ))
}

/// Whole-tile samples are edge-padded so the U-Net ladder divides them.
fn as_image_sample(s: Sample, multiple: usize) -> Sample {
    let (h, w) = (s.height(), s.width());
    if h % multiple == 0 && w % multiple == 0 {
        return s;
    }
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    Sample {
        id: s.id,
        raster: None,
        labels: Array2::from_shape_fn((ph, pw), |(r, c)| s.labels[[r.min(h - 1), c.min(w - 1)]]),
        target: s.target.map(|t| pad_to_multiple(&t, multiple)),
    }
}

fn warn_absent_classes(source: &SampleSource, ids: &[String], names: &[String]) -> Result<()> {
    let mut seen = vec![false; names.len()];
    for id in ids {
        for &v in source.get(id)?.labels.iter() {
            seen[usize::from(v)] = true;
        }
    }
    let absent: Vec<&str> = names
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| !s)
        .map(|(n, _)| n.as_str())
        .collect();
    if !absent.is_empty() {
        log::warn!(
            "classes absent from the segmenter training data (their IoU will be undefined): {}",
            absent.join(", ")
        );
    }
    Ok(())
}
