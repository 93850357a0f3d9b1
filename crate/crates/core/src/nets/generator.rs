use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::layers::{
    leaky_relu, resize_nearest, upsample_nearest2x, Conv2d, ConvSpec, Mode, Padding,
};
use crate::nets::params::ParamBuilder;
use crate::nets::resnet::{Norm, NormKind, ResnetBlock, LEAKY_SLOPE};

/// How the generator combines the auxiliary raster and the land-cover map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder on the raster, SPADE conditioning on the map everywhere.
    Fusion,
    /// Decoder only, driven by the map.
    LabelOnly,
    /// Encoder on the raster with batch normalization; the map is unused.
    RasterOnly,
    /// Raster and one-hot map stacked as encoder input, batch normalization.
    Concat,
}

impl Variant {
    pub fn uses_raster(self) -> bool {
        self != Variant::LabelOnly
    }

    pub fn uses_segmap(self) -> bool {
        self != Variant::RasterOnly
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Variant::Fusion),
            "label_only" => Ok(Variant::LabelOnly),
            "raster_only" => Ok(Variant::RasterOnly),
            "concat" => Ok(Variant::Concat),
            _ => Err(Error::Config(format!(
                "unknown variant '{s}' (expected fusion, label_only, raster_only or concat)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fusion => "fusion",
            Variant::LabelOnly => "label_only",
            Variant::RasterOnly => "raster_only",
            Variant::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub in_raster_channels: usize,
    pub num_classes: usize,
    pub out_channels: usize,
    pub stages: usize,
    pub body_blocks: usize,
    pub base_width: usize,
    pub spade_hidden: usize,
    pub train_size: usize,
    pub spectral: bool,
}

impl GeneratorConfig {
    pub fn new(variant: Variant, in_raster_channels: usize, num_classes: usize, out_channels: usize) -> Self {
        GeneratorConfig {
            variant,
            in_raster_channels,
            num_classes,
            out_channels,
            stages: 4,
            body_blocks: 9,
            base_width: 64,
            spade_hidden: 128,
            train_size: 256,
            spectral: true,
        }
    }

    /// Width after encoder stage `i` (`i = 0` is the stem).
    pub fn width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width(self.stages)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages != 4 {
            return Err(Error::Config(format!("stages must be 4, got {}", self.stages)));
        }
        if !(1..=3).contains(&self.out_channels) {
            return Err(Error::Config(format!(
                "output channels must be 1, 2 or 3, got {}",
                self.out_channels
            )));
        }
        if self.num_classes == 0 || self.base_width == 0 || self.spade_hidden == 0 {
            return Err(Error::Config(
                "class count, base width and SPADE width must be positive".into(),
            ));
        }
        if self.variant.uses_raster() && self.in_raster_channels == 0 {
            return Err(Error::Config(format!(
                "variant {} needs at least one raster channel",
                self.variant
            )));
        }
        Ok(())
    }

    fn norm_kind(&self) -> NormKind {
        match self.variant {
            Variant::Fusion | Variant::LabelOnly => NormKind::Spade {
                classes: self.num_classes,
                hidden: self.spade_hidden,
            },
            Variant::RasterOnly | Variant::Concat => NormKind::Batch,
        }
    }

    fn encoder_in_channels(&self) -> usize {
        match self.variant {
            Variant::Concat => self.in_raster_channels + self.num_classes,
            _ => self.in_raster_channels,
        }
    }
}

#[derive(Clone)]
struct DownStage {
    conv: Conv2d,
    norm: Norm,
}

#[derive(Clone)]
enum Head {
    Encoder { stem: Conv2d, down: Vec<DownStage> },
    Label { conv: Conv2d },
}

/// Encoder (or label stem), residual body and upsampling decoder.
#[derive(Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    head: Head,
    body: Vec<ResnetBlock>,
    up: Vec<ResnetBlock>,
    out: Conv2d,
}

/// Output values are clamped just inside the open interval so that
/// saturated tanh units never reach ±1 in 32-bit.
pub const OUTPUT_BOUND: f64 = 1.0 - f32::EPSILON as f64 / 2.0;

impl Generator {
    pub fn new(pb: &ParamBuilder, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let sn = cfg.spectral;
        let norm = cfg.norm_kind();
        let head = if cfg.variant == Variant::LabelOnly {
            Head::Label {
                conv: Conv2d::new(
                    &pb.pp("label_stem"),
                    ConvSpec::new(cfg.num_classes, cfg.bottleneck_channels(), 3).spectral(sn),
                )?,
            }
        } else {
            let enc = pb.pp("encoder");
            let stem = Conv2d::new(
                &enc.pp("stem"),
                ConvSpec::new(cfg.encoder_in_channels(), cfg.width(0), 7)
                    .padding(Padding::Reflect(3))
                    .spectral(sn),
            )?;
            let mut down = Vec::new();
            for i in 0..cfg.stages {
                let p = enc.pp(format!("down_{i}"));
                down.push(DownStage {
                    conv: Conv2d::new(
                        &p.pp("conv"),
                        ConvSpec::new(cfg.width(i), cfg.width(i + 1), 3)
                            .stride(2)
                            .spectral(sn),
                    )?,
                    norm: Norm::new(&p.pp("norm"), norm, cfg.width(i + 1), sn)?,
                });
            }
            Head::Encoder { stem, down }
        };
        let top = cfg.bottleneck_channels();
        let body = (0..cfg.body_blocks)
            .map(|i| ResnetBlock::new(&pb.pp(format!("body_{i}")), top, top, norm, sn))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..cfg.stages)
            .map(|k| {
                let i = cfg.stages - k;
                ResnetBlock::new(&pb.pp(format!("up_{k}")), cfg.width(i), cfg.width(i - 1), norm, sn)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(
            &pb.pp("out"),
            ConvSpec::new(cfg.width(0), cfg.out_channels, 3).spectral(sn),
        )?;
        Ok(Generator {
            cfg,
            head,
            body,
            up,
            out,
        })
    }

    fn check_inputs(&self, raster: Option<&Tensor>, segmap: Option<&Tensor>) -> Result<(usize, usize, usize)> {
        let v = self.cfg.variant;
        let reference = match (v, raster, segmap) {
            (Variant::LabelOnly, Some(_), _) => {
                return Err(Error::Shape("label_only generator takes no raster input".into()))
            }
            (_, None, _) if v.uses_raster() => {
                return Err(Error::Shape(format!("variant {v} needs a raster input")))
            }
            (Variant::RasterOnly, Some(r), _) => r,
            (_, _, None) => return Err(Error::Shape(format!("variant {v} needs a segmentation map"))),
            (_, _, Some(s)) => s,
        };
        let (n, _, h, w) = reference.dims4()?;
        let factor = 1 << self.cfg.stages;
        if h % factor != 0 || w % factor != 0 || h < 2 * factor || w < 2 * factor {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a multiple of {factor} and at least {}",
                2 * factor
            )));
        }
        if let Some(r) = raster {
            let (rn, rc, rh, rw) = r.dims4()?;
            if (rn, rh, rw) != (n, h, w) || rc != self.cfg.in_raster_channels {
                return Err(Error::Shape(format!(
                    "raster is {rn}x{rc}x{rh}x{rw}, expected {n}x{}x{h}x{w}",
                    self.cfg.in_raster_channels
                )));
            }
        }
        if let (Some(s), true) = (segmap, v.uses_segmap()) {
            let (sn, sc, sh, sw) = s.dims4()?;
            if (sn, sh, sw) != (n, h, w) || sc != self.cfg.num_classes {
                return Err(Error::Shape(format!(
                    "segmentation map is {sn}x{sc}x{sh}x{sw}, expected {n}x{}x{h}x{w}",
                    self.cfg.num_classes
                )));
            }
        }
        Ok((n, h, w))
    }

    fn seg<'a>(&self, segmap: Option<&'a Tensor>) -> Option<&'a Tensor> {
        if self.cfg.variant.uses_segmap() {
            segmap
        } else {
            None
        }
    }

    /// Encoder output, `N × 1024 × H/16 × W/16` at the default width.
    pub fn encode(&self, raster: Option<&Tensor>, segmap: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let (_, h, w) = self.check_inputs(raster, segmap)?;
        let seg = self.seg(segmap);
        let factor = 1 << self.cfg.stages;
        match &self.head {
            Head::Label { conv } => {
                let s = resize_nearest(seg.unwrap(), h / factor, w / factor)?;
                conv.forward(&s, mode)
            }
            Head::Encoder { stem, down } => {
                let input = match self.cfg.variant {
                    Variant::Concat => Tensor::cat(&[raster.unwrap(), seg.unwrap()], 1)?,
                    _ => raster.unwrap().clone(),
                };
                let mut x = stem.forward(&input, mode)?.relu()?;
                for stage in down {
                    x = stage.conv.forward(&x, mode)?;
                    x = stage.norm.forward(&x, seg, mode)?.relu()?;
                }
                Ok(x)
            }
        }
    }

    pub fn decode(&self, bottleneck: &Tensor, segmap: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let seg = self.seg(segmap);
        let mut x = bottleneck.clone();
        for block in &self.body {
            x = block.forward(&x, seg, mode)?;
        }
        for block in &self.up {
            x = block.forward(&upsample_nearest2x(&x)?, seg, mode)?;
        }
        let x = self.out.forward(&leaky_relu(&x, LEAKY_SLOPE)?, mode)?;
        Ok(x.tanh()?.clamp(-OUTPUT_BOUND, OUTPUT_BOUND)?)
    }

    /// `N × ξ × H × W` in the open interval (−1, 1).
    pub fn forward(&self, raster: Option<&Tensor>, segmap: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let b = self.encode(raster, segmap, mode)?;
        self.decode(&b, segmap, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::ParamStore;
    use candle_core::{DType, Device};

    fn small(variant: Variant) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::new(variant, 1, 10, 3);
        cfg.base_width = 4;
        cfg.spade_hidden = 8;
        cfg.body_blocks = 2;
        cfg
    }

    fn build(cfg: GeneratorConfig) -> (ParamStore, Generator) {
        let store = ParamStore::new(DType::F32);
        let g = Generator::new(&ParamBuilder::new(&store, 0), cfg).unwrap();
        (store, g)
    }

    fn uniform_seg(n: usize, h: usize) -> Tensor {
        let mut v = vec![0f32; n * 10 * h * h];
        for b in 0..n {
            for i in 0..h * h {
                v[b * 10 * h * h + 2 * h * h + i] = 1.0;
            }
        }
        Tensor::from_vec(v, (n, 10, h, h), &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_raster_uniform_map_stays_inside_open_interval() {
        let (_, g) = build(small(Variant::Fusion));
        let raster = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let y = g
            .forward(Some(&raster), Some(&uniform_seg(2, 32)), Mode::Train)
            .unwrap();
        assert_eq!(y.dims4().unwrap(), (2, 3, 32, 32));
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite() && x.abs() < 1.0));
    }

    #[test]
    fn indivisible_size_and_missing_inputs_are_errors() {
        let (_, g) = build(small(Variant::Fusion));
        let r = Tensor::zeros((1, 1, 40, 40), DType::F32, &Device::Cpu).unwrap();
        let s = uniform_seg(1, 40);
        assert!(g.forward(Some(&r), Some(&s), Mode::Train).is_err());
        let r = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(g.forward(Some(&r), None, Mode::Train).is_err());
        let (_, lo) = build(small(Variant::LabelOnly));
        assert!(lo.forward(Some(&r), Some(&uniform_seg(1, 32)), Mode::Train).is_err());
        let y = lo.forward(None, Some(&uniform_seg(1, 32)), Mode::Eval).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 3, 32, 32));
    }

    #[test]
    fn parameter_counts_differ_only_in_normalization() {
        let not_norm = |n: &str| !n.contains("norm");
        let (fusion, _) = build(small(Variant::Fusion));
        let (raster, _) = build(small(Variant::RasterOnly));
        let (label, _) = build(small(Variant::LabelOnly));
        assert_eq!(fusion.count_where(not_norm), raster.count_where(not_norm));
        assert!(fusion.count_where(|n| n.contains("mlp_")) > 0);
        assert_eq!(raster.count_where(|n| n.contains("mlp_")), 0);
        assert_eq!(label.count_where(|n| n.starts_with("encoder")), 0);
        assert!(fusion.count_where(|n| n.starts_with("encoder")) > 0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Fusion, Variant::LabelOnly, Variant::RasterOnly, Variant::Concat] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }
}
