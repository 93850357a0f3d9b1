//! Hinge adversarial losses and discriminator feature matching.
//!
//! All functions return the quantity that is minimized. Score and feature
//! lists are indexed by discriminator scale; every per-scale term is a mean,
//! and scales are averaged.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_fm: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm.is_finite() && self.lambda_fm >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_fm must be finite and non-negative, got {}",
                self.lambda_fm
            )));
        }
        Ok(())
    }
}

fn check_nonempty(scores: &[Tensor], what: &str) -> Result<()> {
    if scores.is_empty() || scores.iter().any(|s| s.elem_count() == 0) {
        return Err(Error::InvalidValue(format!("{what} scores are empty")));
    }
    Ok(())
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`, averaged over scales.
pub fn d_hinge(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    check_nonempty(real, "real")?;
    check_nonempty(fake, "fake")?;
    if real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "{} real score maps but {} fake",
            real.len(),
            fake.len()
        )));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            let lr = r.affine(-1.0, 1.0)?.relu()?.mean_all()?;
            let lf = f.affine(1.0, 1.0)?.relu()?.mean_all()?;
            Ok((lr + lf)?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(terms)
}

/// `−mean(fake)`, averaged over scales.
pub fn g_hinge(fake: &[Tensor]) -> Result<Tensor> {
    check_nonempty(fake, "fake")?;
    let terms = fake
        .iter()
        .map(|f| Ok(f.mean_all()?.neg()?))
        .collect::<Result<Vec<_>>>()?;
    mean_of(terms)
}

/// Mean absolute difference per layer, averaged over all (scale, layer)
/// pairs. Real features are detached.
pub fn feature_match(fake: &[Vec<Tensor>], real: &[Vec<Tensor>]) -> Result<Tensor> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Shape(format!(
            "feature lists have {} and {} scales",
            fake.len(),
            real.len()
        )));
    }
    let mut terms = Vec::new();
    for (s, (f, r)) in fake.iter().zip(real).enumerate() {
        if f.len() != r.len() || f.is_empty() {
            return Err(Error::Shape(format!(
                "scale {s}: {} fake and {} real feature layers",
                f.len(),
                r.len()
            )));
        }
        for (l, (a, b)) in f.iter().zip(r).enumerate() {
            if a.dims() != b.dims() {
                return Err(Error::Shape(format!(
                    "scale {s} layer {l}: fake {:?} vs real {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            terms.push((a - b.detach())?.abs()?.mean_all()?);
        }
    }
    mean_of(terms)
}

/// Generator objective and its parts.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub adversarial: Tensor,
    pub feature_match: Tensor,
}

/// `g_hinge + λ_fm · feature_match`.
pub fn g_total(
    fake_scores: &[Tensor],
    feats_fake: &[Vec<Tensor>],
    feats_real: &[Vec<Tensor>],
    weights: LossWeights,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let adversarial = g_hinge(fake_scores)?;
    let fm = feature_match(feats_fake, feats_real)?;
    let total = (&adversarial + (&fm * weights.lambda_fm)?)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        feature_match: fm,
    })
}

/// Scalar value of a 0-d loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
