use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::layers::{avg_pool2, instance_norm, leaky_relu, Conv2d, ConvSpec, Mode, Padding};
use crate::nets::params::ParamBuilder;
use crate::nets::resnet::LEAKY_SLOPE;

const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const KERNEL: usize = 4;
const PAD: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub scales: usize,
    pub base_width: usize,
    pub spectral: bool,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize, scales: usize) -> Self {
        DiscriminatorConfig {
            in_channels,
            scales,
            base_width: 64,
            spectral: true,
        }
    }

    /// Two scales for 256-pixel training crops, three for 512.
    pub fn scales_for(size: usize) -> usize {
        if size >= 512 {
            3
        } else {
            2
        }
    }

    pub fn widths(&self) -> [usize; 5] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b, 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.scales) {
            return Err(Error::Config(format!(
                "discriminator scales must be 2 or 3, got {}",
                self.scales
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial size after one 4×4 conv with padding 2.
pub fn conv_out_size(n: usize, stride: usize) -> usize {
    (n + 2 * PAD - KERNEL) / stride + 1
}

/// Score-map side length for an `n`-pixel input at one scale.
pub fn score_map_size(n: usize) -> usize {
    STRIDES.iter().fold(n, |n, &s| conv_out_size(n, s))
}

pub struct ScaleOutput {
    pub score: Tensor,
    /// Activations of the four hidden layers, in order.
    pub features: Vec<Tensor>,
}

pub struct DiscriminatorOutput {
    pub scales: Vec<ScaleOutput>,
}

impl DiscriminatorOutput {
    pub fn scores(&self) -> Vec<Tensor> {
        self.scales.iter().map(|s| s.score.clone()).collect()
    }

    pub fn features(&self) -> Vec<Vec<Tensor>> {
        self.scales.iter().map(|s| s.features.clone()).collect()
    }

    /// Splits every tensor along the batch axis at `n`: `(first n, rest)`.
    pub fn split_batch(&self, n: usize) -> Result<(DiscriminatorOutput, DiscriminatorOutput)> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for s in &self.scales {
            let total = s.score.dim(0)?;
            let cut = |t: &Tensor| -> Result<(Tensor, Tensor)> {
                Ok((t.narrow(0, 0, n)?, t.narrow(0, n, total - n)?))
            };
            let (sa, sb) = cut(&s.score)?;
            let mut fa = Vec::new();
            let mut fb = Vec::new();
            for f in &s.features {
                let (x, y) = cut(f)?;
                fa.push(x);
                fb.push(y);
            }
            a.push(ScaleOutput { score: sa, features: fa });
            b.push(ScaleOutput { score: sb, features: fb });
        }
        Ok((DiscriminatorOutput { scales: a }, DiscriminatorOutput { scales: b }))
    }
}

#[derive(Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    nets: Vec<Vec<Conv2d>>,
}

impl Discriminator {
    pub fn new(pb: &ParamBuilder, cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let mut nets = Vec::new();
        for s in 0..cfg.scales {
            let p = pb.pp(format!("scale_{s}"));
            let mut convs = Vec::new();
            let mut fin = cfg.in_channels;
            for (l, (&fout, &stride)) in widths.iter().zip(STRIDES.iter()).enumerate() {
                convs.push(Conv2d::new(
                    &p.pp(format!("conv_{l}")),
                    ConvSpec::new(fin, fout, KERNEL)
                        .stride(stride)
                        .padding(Padding::Zeros(PAD))
                        .spectral(cfg.spectral),
                )?);
                fin = fout;
            }
            nets.push(convs);
        }
        Ok(Discriminator { cfg, nets })
    }

    pub fn final_convs(&self) -> Vec<&Conv2d> {
        self.nets.iter().map(|n| &n[4]).collect()
    }

    /// Warns when the scale count does not match the usual choice for `size`.
    pub fn check_input_size(&self, size: usize) {
        let expected = DiscriminatorConfig::scales_for(size);
        if expected != self.cfg.scales {
            log::warn!(
                "discriminator has {} scales; {size}-pixel inputs usually use {expected}",
                self.cfg.scales
            );
        }
    }

    pub fn forward(&self, image: &Tensor, condition: &Tensor, mode: Mode) -> Result<DiscriminatorOutput> {
        let (n, _, h, w) = image.dims4()?;
        let (cn, _, ch, cw) = condition.dims4()?;
        if (n, h, w) != (cn, ch, cw) {
            return Err(Error::Shape(format!(
                "image {n}x{h}x{w} and condition {cn}x{ch}x{cw} are not aligned"
            )));
        }
        let mut x = Tensor::cat(&[image, condition], 1)?;
        if x.dim(1)? != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {}",
                self.cfg.in_channels,
                x.dim(1)?
            )));
        }
        let mut scales = Vec::with_capacity(self.nets.len());
        for (s, convs) in self.nets.iter().enumerate() {
            if s > 0 {
                x = avg_pool2(&x)?;
            }
            let mut features = Vec::with_capacity(4);
            let mut y = x.clone();
            for (l, conv) in convs[..4].iter().enumerate() {
                y = conv.forward(&y, mode)?;
                if l > 0 {
                    y = instance_norm(&y)?;
                }
                y = leaky_relu(&y, LEAKY_SLOPE)?;
                features.push(y.clone());
            }
            let score = convs[4].forward(&y, mode)?;
            scales.push(ScaleOutput { score, features });
        }
        Ok(DiscriminatorOutput { scales })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn score_size_follows_conv_arithmetic() {
        // floor((n + 4 - 4) / s) + 1, five times
        assert_eq!(score_map_size(256), 35);
        assert_eq!(score_map_size(128), 19);
        assert_eq!(score_map_size(64), 11);
        let store = ParamStore::new(DType::F32);
        let mut cfg = DiscriminatorConfig::new(5, 2);
        cfg.base_width = 4;
        let d = Discriminator::new(&ParamBuilder::new(&store, 0), cfg).unwrap();
        let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let cond = Tensor::zeros((1, 2, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let out = d.forward(&img, &cond, Mode::Train).unwrap();
        assert_eq!(out.scales.len(), 2);
        assert_eq!(out.scales[0].score.dims4().unwrap(), (1, 1, 11, 11));
        assert_eq!(out.scales[1].score.dims4().unwrap(), (1, 1, 7, 7));
        let chans: Vec<usize> = out.scales[0].features.iter().map(|f| f.dim(1).unwrap()).collect();
        assert_eq!(chans, vec![4, 8, 16, 32]);
    }

    #[test]
    fn misaligned_inputs_and_bad_scale_counts_are_errors() {
        let store = ParamStore::new(DType::F32);
        assert!(Discriminator::new(&ParamBuilder::new(&store, 0), DiscriminatorConfig::new(4, 4)).is_err());
        let mut cfg = DiscriminatorConfig::new(4, 2);
        cfg.base_width = 2;
        let d = Discriminator::new(&ParamBuilder::new(&store, 0), cfg).unwrap();
        let img = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let cond = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(d.forward(&img, &cond, Mode::Train).is_err());
    }
}
