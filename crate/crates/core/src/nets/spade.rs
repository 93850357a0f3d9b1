use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::layers::{resize_nearest, BatchNorm, Conv2d, ConvSpec, Mode, Padding};
use crate::nets::params::ParamBuilder;

/// Spatially adaptive normalization: parameter-free batch normalization
/// followed by a per-pixel scale and shift predicted from the one-hot map.
#[derive(Clone)]
pub struct Spade {
    norm: BatchNorm,
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new(
        pb: &ParamBuilder,
        features: usize,
        classes: usize,
        hidden: usize,
        spectral: bool,
    ) -> Result<Self> {
        // Reflection padding keeps a uniform map uniform at the borders.
        let conv = |name: &str, i: usize, o: usize| {
            Conv2d::new(
                &pb.pp(name),
                ConvSpec::new(i, o, 3)
                    .padding(Padding::Reflect(1))
                    .spectral(spectral),
            )
        };
        Ok(Spade {
            norm: BatchNorm::new(&pb.pp("bn"), features, false)?,
            shared: conv("mlp_shared", classes, hidden)?,
            gamma: conv("mlp_gamma", hidden, features)?,
            beta: conv("mlp_beta", hidden, features)?,
        })
    }

    pub fn gamma_conv(&self) -> &Conv2d {
        &self.gamma
    }

    pub fn beta_conv(&self) -> &Conv2d {
        &self.beta
    }

    /// `(γ, β)` at spatial size `h × w`.
    pub fn modulation(&self, segmap: &Tensor, h: usize, w: usize, mode: Mode) -> Result<(Tensor, Tensor)> {
        let seg = resize_nearest(segmap, h, w)?;
        let actv = self.shared.forward(&seg, mode)?.relu()?;
        Ok((self.gamma.forward(&actv, mode)?, self.beta.forward(&actv, mode)?))
    }

    pub fn forward(&self, x: &Tensor, segmap: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let (sn, _, sh, sw) = segmap.dims4()?;
        if n != sn {
            return Err(Error::Shape(format!(
                "features have batch size {n} but segmentation map has {sn}"
            )));
        }
        if h > sh || w > sw {
            return Err(Error::Shape(format!(
                "features {h}x{w} are larger than segmentation map {sh}x{sw}"
            )));
        }
        let normalized = self.norm.forward(x, mode)?;
        let (gamma, beta) = self.modulation(segmap, h, w, mode)?;
        Ok(((normalized.clone() * (gamma + 1.0)?)? + beta)?)
    }
}
