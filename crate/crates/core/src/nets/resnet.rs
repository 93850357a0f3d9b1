use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::layers::{leaky_relu, BatchNorm, Conv2d, ConvSpec, Mode};
use crate::nets::params::ParamBuilder;
use crate::nets::spade::Spade;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Normalization inside generator blocks.
#[derive(Clone)]
pub enum Norm {
    Spade(Spade),
    Batch(BatchNorm),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Spade { classes: usize, hidden: usize },
    Batch,
}

impl Norm {
    pub fn new(pb: &ParamBuilder, kind: NormKind, features: usize, spectral: bool) -> Result<Self> {
        Ok(match kind {
            NormKind::Spade { classes, hidden } => {
                Norm::Spade(Spade::new(pb, features, classes, hidden, spectral)?)
            }
            NormKind::Batch => Norm::Batch(BatchNorm::new(pb, features, true)?),
        })
    }

    pub fn forward(&self, x: &Tensor, segmap: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        match self {
            Norm::Spade(s) => {
                let seg = segmap.ok_or_else(|| {
                    Error::Shape("SPADE normalization needs a segmentation map".into())
                })?;
                s.forward(x, seg, mode)
            }
            Norm::Batch(b) => b.forward(x, mode),
        }
    }
}

/// Pre-activation residual block: two (norm, leaky ReLU, 3×3 conv) stages
/// plus a shortcut that is learned (norm, 1×1 conv) when the width changes.
#[derive(Clone)]
pub struct ResnetBlock {
    norm0: Norm,
    conv0: Conv2d,
    norm1: Norm,
    conv1: Conv2d,
    shortcut: Option<(Norm, Conv2d)>,
}

impl ResnetBlock {
    pub fn new(
        pb: &ParamBuilder,
        fin: usize,
        fout: usize,
        norm: NormKind,
        spectral: bool,
    ) -> Result<Self> {
        let mid = fin.min(fout);
        let shortcut = if fin != fout {
            Some((
                Norm::new(&pb.pp("norm_s"), norm, fin, spectral)?,
                Conv2d::new(
                    &pb.pp("conv_s"),
                    ConvSpec::new(fin, fout, 1).bias(false).spectral(spectral),
                )?,
            ))
        } else {
            None
        };
        Ok(ResnetBlock {
            norm0: Norm::new(&pb.pp("norm_0"), norm, fin, spectral)?,
            conv0: Conv2d::new(&pb.pp("conv_0"), ConvSpec::new(fin, mid, 3).spectral(spectral))?,
            norm1: Norm::new(&pb.pp("norm_1"), norm, mid, spectral)?,
            conv1: Conv2d::new(&pb.pp("conv_1"), ConvSpec::new(mid, fout, 3).spectral(spectral))?,
            shortcut,
        })
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.conv0, &self.conv1];
        if let Some((_, c)) = &self.shortcut {
            v.push(c);
        }
        v
    }

    pub fn forward(&self, x: &Tensor, segmap: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let skip = match &self.shortcut {
            Some((norm, conv)) => conv.forward(&norm.forward(x, segmap, mode)?, mode)?,
            None => x.clone(),
        };
        let dx = leaky_relu(&self.norm0.forward(x, segmap, mode)?, LEAKY_SLOPE)?;
        let dx = self.conv0.forward(&dx, mode)?;
        let dx = leaky_relu(&self.norm1.forward(&dx, segmap, mode)?, LEAKY_SLOPE)?;
        let dx = self.conv1.forward(&dx, mode)?;
        Ok((skip + dx)?)
    }
}
