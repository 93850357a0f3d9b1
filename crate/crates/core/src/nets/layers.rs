use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::nets::ops;
use crate::nets::params::ParamBuilder;
use crate::nets::spectral::{spectral_norm_step, SPECTRAL_EPS};

/// Training mode updates normalization statistics and power-iteration
/// vectors; evaluation mode reads them frozen and builds no autograd graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Reads a parameter for the current mode.
pub(crate) fn param(var: &Var, mode: Mode) -> Tensor {
    match mode {
        Mode::Train => var.as_tensor().clone(),
        Mode::Eval => var.as_detached_tensor(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    Reflect(usize),
}

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub bias: bool,
    pub spectral: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: Padding::Zeros(kernel / 2),
            bias: true,
            spectral: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn spectral(mut self, spectral: bool) -> Self {
        self.spectral = spectral;
        self
    }
}

#[derive(Clone)]
struct SpectralState {
    u: Var,
    v: Var,
}

/// 2-D convolution, optionally spectrally normalized.
#[derive(Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    weight: Var,
    bias: Option<Var>,
    sn: Option<SpectralState>,
}

pub const INIT_STD: f64 = 0.02;

impl Conv2d {
    pub fn new(pb: &ParamBuilder, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let weight = pb.normal("weight", &[spec.out_ch, spec.in_ch, k, k], INIT_STD)?;
        let bias = if spec.bias {
            Some(pb.constant("bias", &[spec.out_ch], 0.0)?)
        } else {
            None
        };
        let sn = if spec.spectral {
            Some(SpectralState {
                u: pb.buffer_unit("sn_u", spec.out_ch)?,
                v: pb.buffer_unit("sn_v", spec.in_ch * k * k)?,
            })
        } else {
            None
        };
        Ok(Conv2d {
            spec,
            weight,
            bias,
            sn,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias_var(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    /// The weight actually used in the convolution (divided by σ̂ when
    /// spectrally normalized).
    pub fn effective_weight(&self, mode: Mode) -> Result<Tensor> {
        let w = param(&self.weight, mode);
        let Some(sn) = &self.sn else {
            return Ok(w);
        };
        let dims = w.dims4()?;
        let w2d = w.reshape((dims.0, dims.1 * dims.2 * dims.3))?;
        let (u, v) = match mode {
            Mode::Train => {
                let step = spectral_norm_step(
                    &w2d.detach(),
                    sn.u.as_tensor(),
                    Some(sn.v.as_tensor()),
                )?;
                sn.u.set(&step.u)?;
                sn.v.set(&step.v)?;
                (step.u, step.v)
            }
            Mode::Eval => (sn.u.as_detached_tensor(), sn.v.as_detached_tensor()),
        };
        let sigma = u
            .unsqueeze(0)?
            .matmul(&w2d)?
            .matmul(&v.unsqueeze(1)?)?
            .reshape(())?;
        let sigma = sigma.clamp(SPECTRAL_EPS, f64::INFINITY)?;
        Ok(w.broadcast_div(&sigma)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.spec.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.spec.in_ch
            )));
        }
        let w = self.effective_weight(mode)?;
        let y = match self.spec.padding {
            Padding::Zeros(p) => ops::conv2d(x, &w, p, self.spec.stride, false)?,
            Padding::Reflect(p) => ops::conv2d(x, &w, p, self.spec.stride, true)?,
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&param(b, mode).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-channel mean and biased variance over batch and space.
fn batch_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim((0, 2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
    Ok((mean, var))
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization with running statistics and an optional learned affine.
#[derive(Clone)]
pub struct BatchNorm {
    channels: usize,
    affine: Option<(Var, Var)>,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(pb: &ParamBuilder, channels: usize, affine: bool) -> Result<Self> {
        let affine = if affine {
            Some((
                pb.constant("weight", &[channels], 1.0)?,
                pb.constant("bias", &[channels], 0.0)?,
            ))
        } else {
            None
        };
        Ok(BatchNorm {
            channels,
            affine,
            running_mean: pb.buffer_constant("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer_constant("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = batch_moments(x)?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = BN_MOMENTUM;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let y = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        match &self.affine {
            Some((g, b)) => Ok(y
                .broadcast_mul(&param(g, mode).reshape((1, c, 1, 1))?)?
                .broadcast_add(&param(b, mode).reshape((1, c, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-sample, per-channel normalization without affine or running statistics.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    ops::upsample_nearest2x(x)
}

/// Nearest-neighbour resize to `(h, w)` of a non-differentiable map (one-hot
/// segmentation), by index gathering.
pub fn resize_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, sh, sw) = x.dims4()?;
    if (sh, sw) == (h, w) {
        return Ok(x.clone());
    }
    let rows: Vec<u32> = (0..h).map(|i| (i * sh / h) as u32).collect();
    let cols: Vec<u32> = (0..w).map(|j| (j * sw / w) as u32).collect();
    let rows = Tensor::new(rows, x.device())?;
    let cols = Tensor::new(cols, x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Mirror padding without repeating the edge pixel.
pub fn reflect_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if p >= h || p >= w {
        return Err(Error::Shape(format!(
            "reflection padding {p} needs spatial size > {p}, got {h}x{w}"
        )));
    }
    let pad_dim = |x: &Tensor, dim: usize, n: usize| -> Result<Tensor> {
        let mut parts = Vec::with_capacity(2 * p + 1);
        for i in (1..=p).rev() {
            parts.push(x.narrow(dim, i, 1)?);
        }
        parts.push(x.clone());
        for i in 1..=p {
            parts.push(x.narrow(dim, n - 1 - i, 1)?);
        }
        Ok(Tensor::cat(&parts, dim)?)
    };
    let x = pad_dim(x, 3, w)?;
    pad_dim(&x, 2, h)
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x downsampling needs even spatial size, got {h}x{w}"
        )));
    }
    Ok(x.avg_pool2d(2)?)
}

/// Mean over the spatial axes: `N × C × H × W → N × C`.
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}
