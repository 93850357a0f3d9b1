//! Power-iteration estimate of a weight matrix's largest singular value.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const SPECTRAL_EPS: f64 = 1e-12;

pub struct SpectralStep {
    /// `W / max(σ̂, ε)`.
    pub weight: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub sigma: f64,
}

fn norm(x: &Tensor) -> Result<f64> {
    Ok(x.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.sqrt())
}

/// One power iteration on `w` (`out × rest`) starting from unit vector `u`.
///
/// When a product vanishes (zero weight) the previous vector is kept, so
/// `u` and `v` stay unit-norm and σ̂ is 0.
pub fn spectral_norm_step(w: &Tensor, u: &Tensor, v_prev: Option<&Tensor>) -> Result<SpectralStep> {
    let (rows, cols) = w.dims2()?;
    if u.dims() != [rows] {
        return Err(Error::Shape(format!(
            "power-iteration vector has shape {:?}, expected [{rows}]",
            u.dims()
        )));
    }
    let wt_u = w.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?;
    let n = norm(&wt_u)?;
    let v = if n > SPECTRAL_EPS {
        (wt_u / n)?
    } else {
        match v_prev {
            Some(v) => v.copy()?,
            None => {
                let mut e = vec![0f64; cols];
                e[0] = 1.0;
                Tensor::new(e, w.device())?.to_dtype(w.dtype())?
            }
        }
    };
    let w_v = w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
    let n = norm(&w_v)?;
    let u_new = if n > SPECTRAL_EPS { (w_v / n)? } else { u.copy()? };
    let sigma = u_new
        .unsqueeze(0)?
        .matmul(&w.matmul(&v.unsqueeze(1)?)?)?
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?[0];
    let weight = (w / sigma.max(SPECTRAL_EPS))?;
    Ok(SpectralStep {
        weight,
        u: u_new,
        v,
        sigma,
    })
}
