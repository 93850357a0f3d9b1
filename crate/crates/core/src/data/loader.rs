//! Turning manifest entries into normalized samples and tensor batches.

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::raster_io::{read_raster, GeoTags};
use crate::data::{
    labels_from_raw, one_hot, DatasetKind, DatasetManifest, NormalizationSpec, RasterTile,
    TargetRange,
};
use crate::error::{Error, Result};

/// Auxiliary raster fed to the generator's encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRaster {
    Dem,
    Sar,
    None,
}

/// Image type the generator learns to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetImage {
    Rgb,
    Sar,
}

impl FromStr for InputRaster {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dem" => Ok(InputRaster::Dem),
            "sar" => Ok(InputRaster::Sar),
            "none" => Ok(InputRaster::None),
            o => Err(Error::Config(format!("unknown input raster '{o}'"))),
        }
    }
}

impl FromStr for TargetImage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(TargetImage::Rgb),
            "sar" => Ok(TargetImage::Sar),
            o => Err(Error::Config(format!("unknown target image '{o}'"))),
        }
    }
}

impl fmt::Display for InputRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputRaster::Dem => "dem",
            InputRaster::Sar => "sar",
            InputRaster::None => "none",
        })
    }
}

impl fmt::Display for TargetImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetImage::Rgb => "rgb",
            TargetImage::Sar => "sar",
        })
    }
}

/// Reads all rasters of one tile. Sentinel-2 stacks are reduced to B4/B3/B2.
pub fn load_tile(manifest: &DatasetManifest, id: &str) -> Result<RasterTile> {
    let files = manifest.files(id)?;
    let label_raster = read_raster(&files.labels)?;
    let landcover = labels_from_raw(&label_raster.band(0), manifest.num_classes, id)?;
    let mut pixel_size = label_raster
        .geo
        .pixel_size()
        .unwrap_or_else(|| manifest.kind.pixel_size_m());
    if !(pixel_size.is_finite() && pixel_size > 0.0) {
        pixel_size = manifest.kind.pixel_size_m();
    }

    let rgb = match &files.rgb {
        Some(p) => {
            let r = read_raster(p)?;
            Some(match r.bands() {
                3 => r.data,
                n if n >= 4 => ndarray::stack(
                    Axis(0),
                    &[
                        r.data.index_axis(Axis(0), 3),
                        r.data.index_axis(Axis(0), 2),
                        r.data.index_axis(Axis(0), 1),
                    ],
                )
                .map_err(|e| Error::raster(p, e.to_string()))?,
                n => return Err(Error::raster(p, format!("{n} bands cannot form RGB"))),
            })
        }
        None => None,
    };
    let dem = match &files.dem {
        Some(p) => Some(read_raster(p)?.band(0)),
        None => None,
    };
    let sar = match &files.sar {
        Some(p) => Some(read_raster(p)?.data),
        None => None,
    };
    let tile = RasterTile {
        id: id.to_string(),
        pixel_size_m: pixel_size,
        rgb,
        dem,
        sar,
        landcover,
    };
    tile.validate(manifest.num_classes)?;
    Ok(tile)
}

/// Reads the georeferencing of a tile's label raster (for aligned outputs).
pub(crate) fn tile_geotags(manifest: &DatasetManifest, id: &str) -> Result<GeoTags> {
    Ok(read_raster(&manifest.files(id)?.labels)?.geo)
}

/// What a training or synthesis run consumes and produces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub kind: DatasetKind,
    pub input: InputRaster,
    pub target: TargetImage,
    pub num_classes: usize,
    pub target_range: TargetRange,
    /// Subtract the per-tile mean height from the DEM (off by default).
    pub dem_mean_subtract: bool,
    /// 10 for intensity, 20 for amplitude SAR products.
    pub sar_db_factor: f64,
}

impl SampleSpec {
    pub fn new(kind: DatasetKind, input: InputRaster, target: TargetImage) -> Self {
        SampleSpec {
            kind,
            input,
            target,
            num_classes: 10,
            target_range: TargetRange::Unit,
            dem_mean_subtract: false,
            sar_db_factor: 10.0,
        }
    }

    fn sar_norm(&self) -> NormalizationSpec {
        match self.kind {
            DatasetKind::Dfc2020 => NormalizationSpec::sentinel1(),
            _ => NormalizationSpec::terrasar_x().with_db_factor(self.sar_db_factor),
        }
    }

    fn sar_polarizations(&self) -> usize {
        match self.kind {
            DatasetKind::Dfc2020 => 2,
            _ => 1,
        }
    }

    /// Normalization of the generated image type.
    pub fn target_norm(&self) -> NormalizationSpec {
        let spec = match self.target {
            TargetImage::Rgb => match self.kind {
                DatasetKind::Dfc2020 => NormalizationSpec::sentinel2_rgb(),
                _ => NormalizationSpec::aerial_rgb(),
            },
            TargetImage::Sar => self.sar_norm(),
        };
        spec.with_target(self.target_range)
    }

    /// Normalization of the encoder input, if any (the DEM stays in meters).
    pub fn input_norm(&self) -> Option<NormalizationSpec> {
        match self.input {
            InputRaster::Sar => Some(self.sar_norm().with_target(TargetRange::Unit)),
            _ => None,
        }
    }

    pub fn raster_channels(&self) -> usize {
        match self.input {
            InputRaster::Dem => 1,
            InputRaster::Sar => self.sar_polarizations(),
            InputRaster::None => 0,
        }
    }

    pub fn target_channels(&self) -> usize {
        match self.target {
            TargetImage::Rgb => 3,
            TargetImage::Sar => self.sar_polarizations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == InputRaster::Sar && self.target == TargetImage::Sar {
            return Err(Error::Config("SAR cannot be both input and target".into()));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "class count must be in 1..=255, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Builds the encoder input for a tile (no target required).
    pub fn raster_input(&self, tile: &RasterTile) -> Result<Option<Array3<f32>>> {
        Ok(match self.input {
            InputRaster::None => None,
            InputRaster::Dem => {
                let dem = tile.dem.as_ref().ok_or_else(|| {
                    Error::Dataset(format!("tile {} has no DEM", tile.id))
                })?;
                let mut dem = dem.clone();
                if self.dem_mean_subtract {
                    let mean = dem.mean().unwrap_or(0.0);
                    dem.mapv_inplace(|v| v - mean);
                }
                Some(dem.insert_axis(Axis(0)))
            }
            InputRaster::Sar => {
                let sar = tile.sar.as_ref().ok_or_else(|| {
                    Error::Dataset(format!("tile {} has no SAR", tile.id))
                })?;
                Some(self.input_norm().unwrap().normalize(sar)?)
            }
        })
    }

    /// Normalized target image of a tile.
    pub fn target_image(&self, tile: &RasterTile) -> Result<Array3<f32>> {
        let raw = match self.target {
            TargetImage::Rgb => tile.rgb.as_ref(),
            TargetImage::Sar => tile.sar.as_ref(),
        }
        .ok_or_else(|| Error::Dataset(format!("tile {} has no {} target", tile.id, self.target)))?;
        self.target_norm().normalize(raw)
    }

    /// Full sample with target, for training and evaluation.
    pub fn prepare(&self, tile: &RasterTile) -> Result<Sample> {
        Ok(Sample {
            id: tile.id.clone(),
            raster: self.raster_input(tile)?,
            labels: tile.landcover.clone(),
            target: Some(self.target_image(tile)?),
        })
    }

    /// Sample without target (synthesis of edited inputs).
    pub fn prepare_input(&self, tile: &RasterTile) -> Result<Sample> {
        Ok(Sample {
            id: tile.id.clone(),
            raster: self.raster_input(tile)?,
            labels: tile.landcover.clone(),
            target: None,
        })
    }
}

/// One normalized tile ready for batching.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub raster: Option<Array3<f32>>,
    pub labels: Array2<u8>,
    pub target: Option<Array3<f32>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    /// Window `[top, top+size) × [left, left+size)` of every array.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Sample {
        let win3 = |a: &Array3<f32>| {
            a.slice(s![.., top..top + size_h, left..left + size_w])
                .to_owned()
        };
        Sample {
            id: self.id.clone(),
            raster: self.raster.as_ref().map(win3),
            labels: self
                .labels
                .slice(s![top..top + size_h, left..left + size_w])
                .to_owned(),
            target: self.target.as_ref().map(win3),
        }
    }

    pub fn flip_horizontal(&self) -> Sample {
        let flip3 = |a: &Array3<f32>| a.slice(s![.., .., ..;-1]).to_owned();
        Sample {
            id: self.id.clone(),
            raster: self.raster.as_ref().map(flip3),
            labels: self.labels.slice(s![.., ..;-1]).to_owned(),
            target: self.target.as_ref().map(flip3),
        }
    }
}

/// Stacked tensors for one step. Shapes are `N × ch × H × W`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub raster: Option<Tensor>,
    pub onehot: Tensor,
    pub target: Option<Tensor>,
    pub labels: Vec<Array2<u8>>,
}

/// Random-crop/flip batching with a caller-supplied RNG.
#[derive(Debug, Clone, Copy)]
pub struct BatchAssembler {
    pub num_classes: usize,
    pub crop: Option<usize>,
    pub flip: bool,
}

fn stack3(arrays: Vec<Array3<f32>>, device: &Device) -> Result<Tensor> {
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::Shape(e.to_string()))?
        .as_standard_layout()
        .to_owned();
    let shape = stacked.shape().to_vec();
    Ok(Tensor::from_vec(stacked.into_raw_vec_and_offset().0, shape, device)?)
}

impl BatchAssembler {
    pub fn assemble<R: Rng>(&self, samples: &[Sample], rng: &mut R) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let mut windows = Vec::with_capacity(samples.len());
        for s in samples {
            let w = match self.crop {
                Some(size) => {
                    if s.height() < size || s.width() < size {
                        return Err(Error::Shape(format!(
                            "tile {} ({}x{}) is smaller than crop {size}",
                            s.id,
                            s.height(),
                            s.width()
                        )));
                    }
                    let top = rng.random_range(0..=s.height() - size);
                    let left = rng.random_range(0..=s.width() - size);
                    s.crop(top, left, size, size)
                }
                None => s.clone(),
            };
            let w = if self.flip && rng.random_bool(0.5) {
                w.flip_horizontal()
            } else {
                w
            };
            windows.push(w);
        }
        self.stack(windows)
    }

    /// Stacks equally-sized samples without cropping or flipping.
    pub fn stack(&self, windows: Vec<Sample>) -> Result<Batch> {
        let device = Device::Cpu;
        let dims = (windows[0].height(), windows[0].width());
        if windows.iter().any(|w| (w.height(), w.width()) != dims) {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        let ids = windows.iter().map(|w| w.id.clone()).collect();
        let onehot = windows
            .iter()
            .map(|w| one_hot(&w.labels, self.num_classes))
            .collect::<Result<Vec<_>>>()?;
        let onehot = stack3(onehot, &device)?;
        let raster = match windows.iter().map(|w| w.raster.clone()).collect::<Option<Vec<_>>>() {
            Some(r) if !r.is_empty() => Some(stack3(r, &device)?),
            _ => None,
        };
        let target = match windows.iter().map(|w| w.target.clone()).collect::<Option<Vec<_>>>() {
            Some(t) if !t.is_empty() => Some(stack3(t, &device)?),
            _ => None,
        };
        let labels = windows.into_iter().map(|w| w.labels).collect();
        Ok(Batch {
            ids,
            raster,
            onehot,
            target,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(id: &str, h: usize, w: usize) -> Sample {
        Sample {
            id: id.into(),
            raster: Some(Array3::from_shape_fn((1, h, w), |(_, r, c)| (r * w + c) as f32)),
            labels: Array2::from_shape_fn((h, w), |(r, c)| ((r + c) % 10) as u8),
            target: Some(Array3::zeros((3, h, w))),
        }
    }

    #[test]
    fn assemble_crops_to_the_configured_size() {
        let asm = BatchAssembler {
            num_classes: 10,
            crop: Some(8),
            flip: false,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = asm
            .assemble(&[sample("a", 20, 20), sample("b", 20, 16)], &mut rng)
            .unwrap();
        assert_eq!(b.onehot.dims(), &[2, 10, 8, 8]);
        assert_eq!(b.raster.unwrap().dims(), &[2, 1, 8, 8]);
        assert_eq!(b.target.unwrap().dims(), &[2, 3, 8, 8]);
        assert_eq!(b.ids, vec!["a", "b"]);
    }

    #[test]
    fn crop_larger_than_tile_is_an_error() {
        let asm = BatchAssembler {
            num_classes: 10,
            crop: Some(32),
            flip: false,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(asm.assemble(&[sample("a", 16, 16)], &mut rng).is_err());
    }

    #[test]
    fn flip_mirrors_columns() {
        let s = sample("a", 2, 3).flip_horizontal();
        assert_eq!(s.raster.unwrap()[[0, 0, 0]], 2.0);
        assert_eq!(s.labels[[0, 0]], 2);
    }

    #[test]
    fn sample_spec_channels() {
        let geo = SampleSpec::new(DatasetKind::GeoNrw, InputRaster::Dem, TargetImage::Rgb);
        assert_eq!((geo.raster_channels(), geo.target_channels()), (1, 3));
        let dfc = SampleSpec::new(DatasetKind::Dfc2020, InputRaster::None, TargetImage::Sar);
        assert_eq!((dfc.raster_channels(), dfc.target_channels()), (0, 2));
        let bad = SampleSpec::new(DatasetKind::Dfc2020, InputRaster::Sar, TargetImage::Sar);
        assert!(bad.validate().is_err());
    }
}
