//! What-if editing of generator inputs: flooding everything below a height.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::raster_io::{write_tiff_f32, write_tiff_u8, GeoTags};
use crate::data::{load_tile, tile_geotags, DatasetManifest};
use crate::error::{Error, Result};

/// GeoNRW class id of water.
pub const DEFAULT_WATER_CLASS: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloodSpec {
    /// Water level in meters; pixels at or below it are flooded.
    pub h_min: f64,
    /// Radius of the erosion element in pixels (1 = 3×3 cross).
    pub erosion_radius: usize,
    pub water_class: u8,
}

impl FloodSpec {
    pub fn new(h_min: f64) -> Self {
        FloodSpec {
            h_min,
            erosion_radius: 1,
            water_class: DEFAULT_WATER_CLASS,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !self.h_min.is_finite() {
            return Err(Error::Config(format!("flood level must be finite, got {}", self.h_min)));
        }
        if self.erosion_radius == 0 {
            return Err(Error::Config("erosion radius must be at least 1".into()));
        }
        if usize::from(self.water_class) >= num_classes {
            return Err(Error::Config(format!(
                "water class {} is not below the class count {num_classes}",
                self.water_class
            )));
        }
        Ok(())
    }
}

/// Offsets of the digital disk `dy² + dx² ≤ r²`.
pub fn structuring_element(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut se = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                se.push((dy, dx));
            }
        }
    }
    se
}

/// Binary erosion; pixels outside the map count as background.
pub fn erode(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let se = structuring_element(radius);
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        se.iter().all(|&(dy, dx)| {
            let (y, x) = (r as isize + dy, c as isize + dx);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]]
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodResult {
    pub level: f64,
    pub dem: Array2<f32>,
    pub landcover: Array2<u8>,
    pub mask: Array2<bool>,
}

/// Thresholds the DEM at `h_min`, erodes the mask to drop small speckles,
/// and sets the masked pixels to water at height `h_min`.
///
/// The comparison happens in the DEM's own precision so that editing an
/// edited tile again changes nothing.
pub fn flood_edit(dem: &Array2<f32>, landcover: &Array2<u8>, spec: &FloodSpec) -> Result<FloodResult> {
    if dem.dim() != landcover.dim() {
        return Err(Error::Shape(format!(
            "DEM is {:?} but land cover is {:?}",
            dem.dim(),
            landcover.dim()
        )));
    }
    if spec.erosion_radius == 0 {
        return Err(Error::Config("erosion radius must be at least 1".into()));
    }
    let level = spec.h_min as f32;
    let below = dem.mapv(|v| v <= level);
    let mask = erode(&below, spec.erosion_radius);
    let mut dem_out = dem.clone();
    let mut lc_out = landcover.clone();
    for ((d, l), &m) in dem_out.iter_mut().zip(lc_out.iter_mut()).zip(mask.iter()) {
        if m {
            *d = level;
            *l = spec.water_class;
        }
    }
    Ok(FloodResult {
        level: spec.h_min,
        dem: dem_out,
        landcover: lc_out,
        mask,
    })
}

/// Applies `flood_edit` at every level, in ascending order.
pub fn sweep(dem: &Array2<f32>, landcover: &Array2<u8>, levels: &[f64], spec: &FloodSpec) -> Result<Vec<FloodResult>> {
    let mut sorted = levels.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("flood levels must be finite".into()));
    }
    if sorted.windows(2).any(|w| w[0] > w[1]) {
        log::info!("flood levels were not ascending; sorted them");
        sorted.sort_by(f64::total_cmp);
    }
    sorted
        .into_iter()
        .map(|h| flood_edit(dem, landcover, &FloodSpec { h_min: h, ..*spec }))
        .collect()
}

/// Id suffix of an edited tile, e.g. `_flood_95.5m`.
pub fn level_suffix(level: f64) -> String {
    format!("_flood_{level}m")
}

/// Floods every tile at every level and writes the results as a dataset root
/// in the same layout (`<id><suffix>_{dem,seg}.tif`, SAR and RGB copied
/// when present, every edited tile listed in `test.txt`). Returns the new ids.
pub fn write_flooded_dataset(
    manifest: &DatasetManifest,
    ids: &[String],
    levels: &[f64],
    spec: &FloodSpec,
    out_root: &Path,
) -> Result<Vec<String>> {
    spec.validate(manifest.num_classes)?;
    let mut written = Vec::new();
    for id in ids {
        let tile = load_tile(manifest, id)?;
        let dem = tile
            .dem
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("tile {id} has no DEM to flood")))?;
        let geo = tile_geotags(manifest, id).unwrap_or_else(|_| GeoTags::with_pixel_size(tile.pixel_size_m));
        for result in sweep(dem, &tile.landcover, levels, spec)? {
            let new_id = format!("{id}{}", level_suffix(result.level));
            let base = out_root.join(&new_id);
            if let Some(dir) = base.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let path = |suffix: &str| {
                let mut p = base.clone().into_os_string();
                p.push(suffix);
                std::path::PathBuf::from(p)
            };
            write_tiff_f32(&path("_dem.tif"), &result.dem.clone().insert_axis(Axis(0)), &geo)?;
            let raw = result.landcover.mapv(|v| v + 1).insert_axis(Axis(0));
            write_tiff_u8(&path("_seg.tif"), &raw, &geo)?;
            if let Some(sar) = &tile.sar {
                write_tiff_f32(&path("_sar.tif"), sar, &geo)?;
            }
            if let Some(rgb) = &tile.rgb {
                write_tiff_f32(&path("_rgb.tif"), rgb, &geo)?;
            }
            log::info!(
                "{new_id}: {} pixels flooded",
                result.mask.iter().filter(|&&m| m).count()
            );
            written.push(new_id);
        }
    }
    let write = |name: &str, text: String| {
        let p = out_root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    write("train.txt", String::new())?;
    write("test.txt", written.iter().map(|id| format!("{id}\n")).collect())?;
    write("classes.txt", manifest.class_names.join("\n") + "\n")?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn radius_one_is_a_cross() {
        let mut se = structuring_element(1);
        se.sort();
        assert_eq!(se, vec![(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]);
        assert_eq!(structuring_element(2).len(), 13);
    }

    #[test]
    fn plateau_keeps_only_its_center() {
        let mut dem = Array2::from_elem((5, 5), 10.0f32);
        for r in 1..4 {
            for c in 1..4 {
                dem[[r, c]] = 2.0;
            }
        }
        let lc = Array2::zeros((5, 5));
        let out = flood_edit(&dem, &lc, &FloodSpec::new(3.0)).unwrap();
        let flooded: Vec<(usize, usize)> = out
            .mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(flooded, vec![(2, 2)]);
        assert_eq!(out.landcover[[2, 2]], DEFAULT_WATER_CLASS);
        assert_eq!(out.dem[[2, 2]], 3.0);
        assert_eq!(out.dem[[1, 1]], 2.0);
    }

    #[test]
    fn level_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dem = Array2::from_shape_fn((9, 7), |_| rng.random_range(50.0f32..60.0));
        let lc = Array2::from_shape_fn((9, 7), |_| rng.random_range(0..10u8));
        let low = flood_edit(&dem, &lc, &FloodSpec::new(40.0)).unwrap();
        assert_eq!((low.dem.clone(), low.landcover.clone()), (dem.clone(), lc.clone()));
        assert!(!low.mask.iter().any(|&m| m));

        let high = flood_edit(&dem, &lc, &FloodSpec::new(70.0)).unwrap();
        for ((r, c), &m) in high.mask.indexed_iter() {
            let interior = r >= 1 && r < 8 && c >= 1 && c < 6;
            assert_eq!(m, interior);
            if interior {
                assert_eq!((high.dem[[r, c]], high.landcover[[r, c]]), (70.0, 1));
            } else {
                assert_eq!((high.dem[[r, c]], high.landcover[[r, c]]), (dem[[r, c]], lc[[r, c]]));
            }
        }
    }

    #[test]
    fn sweep_sorts_and_validation_rejects_bad_specs() {
        let dem = Array2::from_shape_fn((6, 6), |(r, c)| (r + c) as f32);
        let lc = Array2::zeros((6, 6));
        let out = sweep(&dem, &lc, &[8.0, 2.0, 5.0], &FloodSpec::new(0.0)).unwrap();
        assert_eq!(out.iter().map(|r| r.level).collect::<Vec<_>>(), vec![2.0, 5.0, 8.0]);
        assert!(FloodSpec { water_class: 10, ..FloodSpec::new(1.0) }.validate(10).is_err());
        assert!(FloodSpec { erosion_radius: 0, ..FloodSpec::new(1.0) }.validate(10).is_err());
        assert!(flood_edit(&dem, &Array2::zeros((5, 6)), &FloodSpec::new(1.0)).is_err());
    }

    #[test]
    fn valley_levels_match_per_pixel_recomputation() {
        let dem = Array2::from_shape_fn((12, 12), |(r, c)| (c as f32 - 5.5).abs() + 0.1 * r as f32);
        let lc = Array2::zeros((12, 12));
        let levels = [1.0, 2.5, 4.0];
        let results = sweep(&dem, &lc, &levels, &FloodSpec::new(0.0)).unwrap();
        for res in &results {
            for ((r, c), &m) in res.mask.indexed_iter() {
                let expected = structuring_element(1).iter().all(|&(dy, dx)| {
                    let (y, x) = (r as isize + dy, c as isize + dx);
                    (0..12).contains(&y) && (0..12).contains(&x) && dem[[y as usize, x as usize]] <= res.level as f32
                });
                assert_eq!(m, expected);
            }
        }
        for w in results.windows(2) {
            assert!(w[0].mask.iter().zip(w[1].mask.iter()).all(|(&a, &b)| !a || b));
        }
        assert!(results[2].mask.iter().filter(|&&m| m).count() > results[0].mask.iter().filter(|&&m| m).count());
    }

    proptest! {
        #[test]
        fn idempotent_and_nested(seed in 0u64..10_000, radius in 1usize..3, a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dem = Array2::from_shape_fn((10, 11), |_| rng.random_range(0.0f32..10.0));
            let lc = Array2::from_shape_fn((10, 11), |_| rng.random_range(0..10u8));
            let spec = FloodSpec { h_min: a, erosion_radius: radius, water_class: 1 };
            let once = flood_edit(&dem, &lc, &spec).unwrap();
            let twice = flood_edit(&once.dem, &once.landcover, &spec).unwrap();
            prop_assert_eq!(&once.mask, &twice.mask);
            prop_assert_eq!(&once.dem, &twice.dem);
            prop_assert_eq!(&once.landcover, &twice.landcover);
            for ((&m, (&d0, &d1)), (&l0, &l1)) in once.mask.iter()
                .zip(dem.iter().zip(once.dem.iter()))
                .zip(lc.iter().zip(once.landcover.iter()))
            {
                if !m {
                    prop_assert_eq!(d0.to_bits(), d1.to_bits());
                    prop_assert_eq!(l0, l1);
                }
            }
            let (lo, hi) = (a.min(b), a.max(b));
            let m_lo = flood_edit(&dem, &lc, &FloodSpec { h_min: lo, ..spec }).unwrap().mask;
            let m_hi = flood_edit(&dem, &lc, &FloodSpec { h_min: hi, ..spec }).unwrap().mask;
            prop_assert!(m_lo.iter().zip(m_hi.iter()).all(|(&x, &y)| !x || y));
        }
    }
}
