//! Tiles, per-sensor normalization, label encoding and dataset manifests.

mod loader;
mod manifest;
mod normalize;
pub mod raster_io;
pub mod synthetic;

pub(crate) use loader::tile_geotags;
pub use loader::{
    load_tile, Batch, BatchAssembler, InputRaster, Sample, SampleSpec, TargetImage,
};
pub use manifest::{load_manifest, ChannelFlags, DatasetKind, DatasetManifest, Split};
pub use normalize::{NormalizationSpec, TargetRange};

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// A co-registered sample: optional imagery and auxiliary rasters plus the
/// land-cover map every tile must carry. Image arrays are band-major.
#[derive(Debug, Clone)]
pub struct RasterTile {
    pub id: String,
    pub pixel_size_m: f64,
    /// `3 × H × W`, native units.
    pub rgb: Option<Array3<f32>>,
    /// `H × W`, meters above sea level.
    pub dem: Option<Array2<f32>>,
    /// `P × H × W`, native units (P = 1 single-pol, 2 dual-pol).
    pub sar: Option<Array3<f32>>,
    /// `H × W` class ids in `[0, C)`.
    pub landcover: Array2<u8>,
}

impl RasterTile {
    pub fn height(&self) -> usize {
        self.landcover.nrows()
    }

    pub fn width(&self) -> usize {
        self.landcover.ncols()
    }

    /// Checks shape agreement, label range and DEM finiteness.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let hw = (self.height(), self.width());
        if !(self.pixel_size_m.is_finite() && self.pixel_size_m > 0.0) {
            return Err(Error::InvalidValue(format!(
                "tile {}: pixel size must be positive, got {}",
                self.id, self.pixel_size_m
            )));
        }
        let check = |name: &str, dims: (usize, usize)| {
            if dims != hw {
                Err(Error::Shape(format!(
                    "tile {}: {name} is {}x{} but land cover is {}x{}",
                    self.id, dims.0, dims.1, hw.0, hw.1
                )))
            } else {
                Ok(())
            }
        };
        if let Some(rgb) = &self.rgb {
            if rgb.shape()[0] != 3 {
                return Err(Error::Shape(format!(
                    "tile {}: rgb has {} bands",
                    self.id,
                    rgb.shape()[0]
                )));
            }
            check("rgb", (rgb.shape()[1], rgb.shape()[2]))?;
        }
        if let Some(dem) = &self.dem {
            check("dem", dem.dim())?;
            if let Some(((r, c), v)) = dem.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "tile {}: non-finite DEM value {v} at ({r}, {c})",
                    self.id
                )));
            }
        }
        if let Some(sar) = &self.sar {
            if !(1..=2).contains(&sar.shape()[0]) {
                return Err(Error::Shape(format!(
                    "tile {}: SAR must have 1 or 2 polarizations, got {}",
                    self.id,
                    sar.shape()[0]
                )));
            }
            check("sar", (sar.shape()[1], sar.shape()[2]))?;
        }
        validate_labels(&self.landcover, num_classes)
    }
}

/// Errors on the first label `>= num_classes`, naming the id and pixel.
pub fn validate_labels(labels: &Array2<u8>, num_classes: usize) -> Result<()> {
    match labels
        .indexed_iter()
        .find(|(_, &id)| usize::from(id) >= num_classes)
    {
        Some(((row, col), &id)) => Err(Error::LabelOutOfRange {
            id: i64::from(id),
            row,
            col,
            classes: num_classes,
        }),
        None => Ok(()),
    }
}

/// Expands a label map into `C × H × W` binary planes.
pub fn one_hot(landcover: &Array2<u8>, num_classes: usize) -> Result<Array3<f32>> {
    validate_labels(landcover, num_classes)?;
    let (h, w) = landcover.dim();
    let mut out = Array3::<f32>::zeros((num_classes, h, w));
    for ((r, c), &id) in landcover.indexed_iter() {
        out[[usize::from(id), r, c]] = 1.0;
    }
    Ok(out)
}

/// Per-pixel argmax over the leading (class) axis. Ties resolve to the lowest id.
pub fn argmax_planes(planes: &Array3<f32>) -> Array2<u8> {
    let (_, h, w) = planes.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let col = planes.index_axis(Axis(1), r);
        let px = col.index_axis(Axis(1), c);
        let mut best = 0usize;
        for (k, &v) in px.iter().enumerate() {
            if v > px[best] {
                best = k;
            }
        }
        best as u8
    })
}

/// Converts raw on-disk label values (1-based, 0 = void) into class ids.
/// Void pixels are rejected rather than silently remapped.
pub fn labels_from_raw(raw: &Array2<f32>, num_classes: usize, tile: &str) -> Result<Array2<u8>> {
    let mut out = Array2::<u8>::zeros(raw.dim());
    for ((r, c), &v) in raw.indexed_iter() {
        if v.fract() != 0.0 || v < 1.0 || v > num_classes as f32 {
            return Err(Error::Dataset(format!(
                "tile {tile}: label value {v} at ({r}, {c}) is void or outside 1..={num_classes}"
            )));
        }
        out[[r, c]] = (v as u8) - 1;
    }
    Ok(out)
}

/// Class names of the GeoNRW land-cover scheme.
pub const GEONRW_CLASSES: [&str; 10] = [
    "forest",
    "water",
    "agricultural",
    "residential/commercial/industrial",
    "grassland/swamp/shrubbery",
    "railway/trainstation",
    "highway/squares",
    "airport/shipyard",
    "roads",
    "buildings",
];

/// Simplified IGBP scheme used by DFC2020; all ten ids are kept even though
/// only eight occur in the data.
pub const DFC2020_CLASSES: [&str; 10] = [
    "forest",
    "shrubland",
    "savanna",
    "grassland",
    "wetlands",
    "croplands",
    "urban/built-up",
    "snow/ice",
    "barren",
    "water",
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_sets_the_labelled_plane() {
        let labels = Array2::from_elem((2, 2), 3u8);
        let planes = one_hot(&labels, 10).unwrap();
        for k in 0..10 {
            let expect = if k == 3 { 1.0 } else { 0.0 };
            assert!(planes.index_axis(Axis(0), k).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn uniform_zero_map_fills_plane_zero() {
        let planes = one_hot(&Array2::zeros((4, 5)), 10).unwrap();
        assert!(planes.index_axis(Axis(0), 0).iter().all(|&v| v == 1.0));
        assert_eq!(planes.sum(), 20.0);
    }

    #[test]
    fn one_hot_names_the_offending_pixel() {
        let mut labels = Array2::zeros((3, 3));
        labels[[1, 2]] = 12u8;
        match one_hot(&labels, 10) {
            Err(Error::LabelOutOfRange { id, row, col, classes }) => {
                assert_eq!((id, row, col, classes), (12, 1, 2, 10));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plane_sums_are_one_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let labels = Array2::from_shape_fn((32, 32), |_| rng.random_range(0..10u8));
            let planes = one_hot(&labels, 10).unwrap();
            let sums = planes.sum_axis(Axis(0));
            assert!(sums.iter().all(|&s| s == 1.0));
        }
    }

    #[test]
    fn raw_labels_reject_void() {
        let raw = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 2.0]).unwrap();
        assert!(labels_from_raw(&raw, 10, "t").is_err());
        let raw = Array2::from_shape_vec((1, 2), vec![1.0, 10.0]).unwrap();
        assert_eq!(labels_from_raw(&raw, 10, "t").unwrap().as_slice().unwrap(), &[0, 9]);
    }

    #[test]
    fn tile_validation_catches_shape_and_dem_problems() {
        let mut tile = RasterTile {
            id: "t".into(),
            pixel_size_m: 1.0,
            rgb: None,
            dem: Some(Array2::zeros((4, 4))),
            sar: None,
            landcover: Array2::zeros((4, 4)),
        };
        tile.validate(10).unwrap();
        tile.dem.as_mut().unwrap()[[0, 1]] = f32::NAN;
        assert!(tile.validate(10).is_err());
        tile.dem = Some(Array2::zeros((4, 3)));
        assert!(matches!(tile.validate(10), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn argmax_inverts_one_hot(values in proptest::collection::vec(0u8..10, 48)) {
            let labels = Array2::from_shape_vec((6, 8), values).unwrap();
            let planes = one_hot(&labels, 10).unwrap();
            prop_assert_eq!(argmax_planes(&planes), labels);
        }
    }
}
