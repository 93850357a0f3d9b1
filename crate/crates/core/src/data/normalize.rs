//! Per-sensor value normalization into the generator's output range.
//!
//! The forward transform is: optional decibel conversion, multiplication by
//! `scale`, clipping to `clip`, then an affine map of `clip` onto `target`.
//! Everything except the clip is inverted exactly by [`NormalizationSpec::denormalize_value`];
//! clipping saturates.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which interval normalized values land in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetRange {
    /// `(0, 1)`
    #[default]
    Unit,
    /// `(-1, 1)`, symmetric about the midpoint of tanh.
    Symmetric,
}

impl TargetRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            TargetRange::Unit => (0.0, 1.0),
            TargetRange::Symmetric => (-1.0, 1.0),
        }
    }
}

impl std::fmt::Display for TargetRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetRange::Unit => "unit",
            TargetRange::Symmetric => "symmetric",
        })
    }
}

impl std::str::FromStr for TargetRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" | "0,1" => Ok(TargetRange::Unit),
            "symmetric" | "-1,1" => Ok(TargetRange::Symmetric),
            other => Err(Error::Config(format!("unknown target range '{other}'"))),
        }
    }
}

/// A per-sensor normalization transform with an exact inverse on the clip interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Convert linear values to decibels before anything else.
    pub to_db: bool,
    /// `10` for power/intensity data, `20` for amplitude data.
    pub db_factor: f64,
    /// Multiplier applied after the optional dB conversion and before clipping.
    pub scale: f64,
    pub clip: (f64, f64),
    pub target: (f64, f64),
}

impl NormalizationSpec {
    /// Plain clip-and-rescale of `(lo, hi)` onto `(0, 1)`.
    pub fn linear(lo: f64, hi: f64) -> Self {
        NormalizationSpec {
            to_db: false,
            db_factor: 10.0,
            scale: 1.0,
            clip: (lo, hi),
            target: (0.0, 1.0),
        }
    }

    /// TerraSAR-X EEC backscatter: dB, divided by 100, clipped to `(0, 1)`.
    pub fn terrasar_x() -> Self {
        NormalizationSpec {
            to_db: true,
            db_factor: 10.0,
            scale: 0.01,
            clip: (0.0, 1.0),
            target: (0.0, 1.0),
        }
    }

    /// Sentinel-1 backscatter already in dB, clipped to `(-20, 5)`.
    pub fn sentinel1() -> Self {
        Self::linear(-20.0, 5.0)
    }

    /// Sentinel-2 RGB reflectance bands, clipped to `(0, 3500)`.
    pub fn sentinel2_rgb() -> Self {
        Self::linear(0.0, 3500.0)
    }

    /// 8-bit aerial photographs.
    pub fn aerial_rgb() -> Self {
        Self::linear(0.0, 255.0)
    }

    /// Maps `target` onto itself; useful for already-normalized data.
    pub fn identity(range: TargetRange) -> Self {
        let (lo, hi) = range.bounds();
        Self::linear(lo, hi).with_target(range)
    }

    pub fn with_target(mut self, range: TargetRange) -> Self {
        self.target = range.bounds();
        self
    }

    pub fn with_db_factor(mut self, factor: f64) -> Self {
        self.db_factor = factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clip;
        let (tlo, thi) = self.target;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid clip interval ({lo}, {hi})")));
        }
        if !(tlo.is_finite() && thi.is_finite() && tlo < thi) {
            return Err(Error::Config(format!(
                "invalid target interval ({tlo}, {thi})"
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if self.to_db && !(self.db_factor.is_finite() && self.db_factor > 0.0) {
            return Err(Error::Config(format!(
                "dB factor must be > 0, got {}",
                self.db_factor
            )));
        }
        Ok(())
    }

    pub fn normalize_value(&self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite input {v}")));
        }
        let v = if self.to_db {
            if v <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "cannot convert non-positive value {v} to decibels"
                )));
            }
            self.db_factor * v.log10()
        } else {
            v
        };
        let (lo, hi) = self.clip;
        let (tlo, thi) = self.target;
        let clipped = (v * self.scale).clamp(lo, hi);
        Ok(tlo + (clipped - lo) / (hi - lo) * (thi - tlo))
    }

    pub fn denormalize_value(&self, u: f64) -> Result<f64> {
        let (tlo, thi) = self.target;
        if !(u >= tlo && u <= thi) {
            return Err(Error::InvalidValue(format!(
                "value {u} outside target range [{tlo}, {thi}]"
            )));
        }
        let (lo, hi) = self.clip;
        let scaled = lo + (u - tlo) / (thi - tlo) * (hi - lo);
        let v = scaled / self.scale;
        Ok(if self.to_db {
            10f64.powf(v / self.db_factor)
        } else {
            v
        })
    }

    /// Element-wise [`normalize_value`](Self::normalize_value) over an array.
    pub fn normalize<D: Dimension>(&self, values: &Array<f32, D>) -> Result<Array<f32, D>> {
        self.validate()?;
        let mut out = values.clone();
        for v in out.iter_mut() {
            *v = self.normalize_value(f64::from(*v))? as f32;
        }
        Ok(out)
    }

    /// Element-wise inverse; errors on values outside the target range.
    pub fn denormalize<D: Dimension>(&self, values: &Array<f32, D>) -> Result<Array<f32, D>> {
        self.validate()?;
        let mut out = values.clone();
        for v in out.iter_mut() {
            *v = self.denormalize_value(f64::from(*v))? as f32;
        }
        Ok(out)
    }

    /// Clamps into the target range first, so generator outputs that
    /// overshoot a `(0, 1)` target saturate instead of erroring.
    pub fn denormalize_saturating<D: Dimension>(
        &self,
        values: &Array<f32, D>,
    ) -> Result<Array<f32, D>> {
        let (tlo, thi) = self.target;
        let clamped = values.mapv(|v| (f64::from(v).clamp(tlo, thi)) as f32);
        self.denormalize(&clamped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn terrasar_ten_linear_maps_to_a_tenth() {
        let u = NormalizationSpec::terrasar_x().normalize_value(10.0).unwrap();
        assert!((u - 0.10).abs() < 1e-12, "{u}");
    }

    #[test]
    fn sentinel1_midpoint() {
        let s = NormalizationSpec::sentinel1();
        assert!((s.normalize_value(-7.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((s.denormalize_value(0.5).unwrap() + 7.5).abs() < 1e-12);
    }

    #[test]
    fn sentinel2_clip_and_midpoint() {
        let s = NormalizationSpec::sentinel2_rgb();
        assert_eq!(s.normalize_value(4000.0).unwrap(), 1.0);
        assert_eq!(s.normalize_value(-3.0).unwrap(), 0.0);
        assert!((s.normalize_value(1750.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(s.denormalize_value(0.0).unwrap(), 0.0);
    }

    #[test]
    fn db_of_non_positive_is_an_error() {
        let s = NormalizationSpec::terrasar_x();
        assert!(s.normalize_value(0.0).is_err());
        assert!(s.normalize_value(-1.0).is_err());
    }

    #[test]
    fn nan_is_an_error() {
        assert!(NormalizationSpec::sentinel1()
            .normalize(&array![0.0f32, f32::NAN])
            .is_err());
    }

    #[test]
    fn denormalize_rejects_out_of_range() {
        let s = NormalizationSpec::sentinel1();
        assert!(s.denormalize_value(1.01).is_err());
        assert!(s.denormalize_value(-0.01).is_err());
        let sym = s.with_target(TargetRange::Symmetric);
        assert!((sym.denormalize_value(-1.0).unwrap() + 20.0).abs() < 1e-12);
    }

    #[test]
    fn amplitude_db_factor() {
        let s = NormalizationSpec::terrasar_x().with_db_factor(20.0);
        // 20*log10(10) = 20 dB -> 0.2
        assert!((s.normalize_value(10.0).unwrap() - 0.2).abs() < 1e-12);
    }

    fn in_clip_native(spec: &NormalizationSpec, t: f64) -> f64 {
        let (lo, hi) = spec.clip;
        let s = (lo + t * (hi - lo)) / spec.scale;
        if spec.to_db {
            10f64.powf(s / spec.db_factor)
        } else {
            s
        }
    }

    #[test]
    fn round_trip_on_in_clip_values_for_every_sensor() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for spec in [
            NormalizationSpec::terrasar_x(),
            NormalizationSpec::sentinel1(),
            NormalizationSpec::sentinel2_rgb(),
        ] {
            for _ in 0..1000 {
                let v = in_clip_native(&spec, rng.random::<f64>());
                let back = spec
                    .denormalize_value(spec.normalize_value(v).unwrap())
                    .unwrap();
                let (lo, hi) = spec.clip;
                let tol = if spec.to_db {
                    1e-6 * v.abs()
                } else {
                    1e-6 * (hi - lo)
                };
                assert!((back - v).abs() <= tol, "{v} -> {back}");
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let s = NormalizationSpec::sentinel1();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.normalize_value(x).unwrap() <= s.normalize_value(y).unwrap());
        }

        #[test]
        fn output_stays_in_target(v in -1e6f64..1e6) {
            for range in [TargetRange::Unit, TargetRange::Symmetric] {
                let s = NormalizationSpec::sentinel2_rgb().with_target(range);
                let (lo, hi) = range.bounds();
                let u = s.normalize_value(v).unwrap();
                prop_assert!(u >= lo && u <= hi);
            }
        }

        #[test]
        fn identity_spec_is_idempotent(u in 0.0f64..=1.0) {
            let s = NormalizationSpec::identity(TargetRange::Unit);
            let once = s.normalize_value(u).unwrap();
            prop_assert_eq!(once, u);
            prop_assert_eq!(s.normalize_value(once).unwrap(), once);
        }
    }
}
