//! Small procedurally generated datasets in the GeoNRW directory layout.
//!
//! Tiles are smooth random terrain with water in the valleys, forest on the
//! hills, fields in between, a road and a few buildings that raise the DEM.
//! RGB is a class palette with hill shading; SAR is a per-class backscatter
//! level with slope dependence and speckle. Used for smoke runs and tests.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::raster_io::{write_tiff_f32, write_tiff_u8, GeoTags};
use crate::data::GEONRW_CLASSES;
use crate::error::{Error, Result};

const WATER: u8 = 1;
const FOREST: u8 = 0;
const AGRICULTURE: u8 = 2;
const GRASSLAND: u8 = 4;
const ROADS: u8 = 8;
const BUILDINGS: u8 = 9;

const PALETTE: [[f32; 3]; 10] = [
    [34.0, 85.0, 40.0],    // forest
    [30.0, 60.0, 110.0],   // water
    [170.0, 150.0, 90.0],  // agricultural
    [150.0, 130.0, 120.0], // residential
    [110.0, 150.0, 70.0],  // grassland
    [90.0, 80.0, 80.0],    // railway
    [120.0, 120.0, 125.0], // highway
    [140.0, 140.0, 140.0], // airport
    [95.0, 95.0, 100.0],   // roads
    [180.0, 90.0, 70.0],   // buildings
];

const BACKSCATTER_DB: [f32; 10] = [
    32.0, 12.0, 26.0, 34.0, 27.0, 33.0, 24.0, 25.0, 22.0, 40.0,
];

/// One generated tile: DEM in meters, class ids, 8-bit RGB, linear SAR.
pub struct SyntheticTile {
    pub dem: Array2<f32>,
    pub labels: Array2<u8>,
    pub rgb: Array3<u8>,
    pub sar: Array2<f32>,
}

fn smooth_field<R: Rng>(rng: &mut R, size: usize, bumps: usize, amp: f32) -> Array2<f32> {
    let centers: Vec<(f32, f32, f32, f32)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.0..size as f32),
                rng.random_range(0.0..size as f32),
                rng.random_range(size as f32 / 6.0..size as f32 / 2.0),
                rng.random_range(-amp..amp),
            )
        })
        .collect();
    Array2::from_shape_fn((size, size), |(r, c)| {
        centers
            .iter()
            .map(|&(cy, cx, sigma, a)| {
                let d2 = (r as f32 - cy).powi(2) + (c as f32 - cx).powi(2);
                a * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    })
}

fn quantile(values: &Array2<f32>, q: f32) -> f32 {
    let mut v: Vec<f32> = values.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v[((v.len() - 1) as f32 * q) as usize]
}

pub fn generate_tile<R: Rng>(rng: &mut R, size: usize) -> SyntheticTile {
    let slope = (rng.random_range(-0.1..0.1f32), rng.random_range(-0.1..0.1f32));
    let terrain = smooth_field(rng, size, 5, 15.0);
    let mut dem = Array2::from_shape_fn((size, size), |(r, c)| {
        60.0 + terrain[[r, c]] + slope.0 * r as f32 + slope.1 * c as f32
    });
    let fields = smooth_field(rng, size, 4, 1.0);

    let water_level = quantile(&dem, rng.random_range(0.05..0.25));
    let forest_level = quantile(&dem, rng.random_range(0.6..0.85));
    let mut labels = Array2::from_shape_fn((size, size), |(r, c)| {
        let h = dem[[r, c]];
        if h <= water_level {
            WATER
        } else if h >= forest_level {
            FOREST
        } else if fields[[r, c]] > 0.0 {
            AGRICULTURE
        } else {
            GRASSLAND
        }
    });

    let road_width = rng.random_range(2..4usize).min(size);
    let road_at = rng.random_range(0..size - road_width + 1);
    let horizontal = rng.random_bool(0.5);
    for k in road_at..road_at + road_width {
        for j in 0..size {
            let (r, c) = if horizontal { (k, j) } else { (j, k) };
            if labels[[r, c]] != WATER {
                labels[[r, c]] = ROADS;
            }
        }
    }

    for _ in 0..rng.random_range(1..4) {
        let bh = rng.random_range(3..=(size / 6).max(4)).min(size);
        let bw = rng.random_range(3..=(size / 6).max(4)).min(size);
        let top = rng.random_range(0..=size - bh);
        let left = rng.random_range(0..=size - bw);
        let height = rng.random_range(6.0..20.0f32);
        for r in top..top + bh {
            for c in left..left + bw {
                if labels[[r, c]] != WATER && labels[[r, c]] != ROADS {
                    labels[[r, c]] = BUILDINGS;
                    dem[[r, c]] += height;
                }
            }
        }
    }

    let speckle = Gamma::new(4.0f32, 0.25).unwrap();
    let mut rgb = Array3::<u8>::zeros((3, size, size));
    let mut sar = Array2::<f32>::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            let dy = dem[[(r + 1).min(size - 1), c]] - dem[[r.saturating_sub(1), c]];
            let dx = dem[[r, (c + 1).min(size - 1)]] - dem[[r, c.saturating_sub(1)]];
            let shade = (1.0 - 0.04 * (dx + dy)).clamp(0.6, 1.3);
            let class = labels[[r, c]] as usize;
            for b in 0..3 {
                let v = PALETTE[class][b] * shade + rng.random_range(-6.0..6.0f32);
                rgb[[b, r, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
            let db = BACKSCATTER_DB[class] + 0.5 * dx.clamp(-10.0, 10.0);
            sar[[r, c]] = 10f32.powf(db / 10.0) * speckle.sample(rng);
        }
    }
    SyntheticTile {
        dem,
        labels,
        rgb,
        sar,
    }
}

/// Writes `n_train + n_test` tiles of `size × size` pixels under `root` and
/// returns the tile ids (train first).
pub fn write_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic tile size {size} < 16")));
    }
    let group = "synthetic";
    let dir = root.join(group);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = GeoTags::with_pixel_size(1.0);
    let mut ids = Vec::new();
    let mut train = String::new();
    let mut test = String::new();
    for i in 0..n_train + n_test {
        let stem = format!("tile_{i:04}");
        let tile = generate_tile(&mut rng, size);
        let raw_labels = tile.labels.mapv(|v| v + 1).insert_axis(ndarray::Axis(0));
        write_tiff_u8(&dir.join(format!("{stem}_seg.tif")), &raw_labels, &geo)?;
        write_tiff_u8(&dir.join(format!("{stem}_rgb.tif")), &tile.rgb, &geo)?;
        write_tiff_f32(
            &dir.join(format!("{stem}_dem.tif")),
            &tile.dem.insert_axis(ndarray::Axis(0)),
            &geo,
        )?;
        write_tiff_f32(
            &dir.join(format!("{stem}_sar.tif")),
            &tile.sar.insert_axis(ndarray::Axis(0)),
            &geo,
        )?;
        let id = format!("{group}/{stem}");
        if i < n_train {
            train.push_str(&id);
            train.push('\n');
        } else {
            test.push_str(&id);
            test.push('\n');
        }
        ids.push(id);
    }
    let write = |name: &str, text: &str| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("train.txt", &train)?;
    write("test.txt", &test)?;
    write("classes.txt", &(GEONRW_CLASSES.join("\n") + "\n"))?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, load_tile, DatasetKind};

    #[test]
    fn generated_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let ids = write_dataset(dir.path(), 3, 2, 32, 11).unwrap();
        assert_eq!(ids.len(), 5);
        let m = load_manifest(dir.path(), DatasetKind::Custom).unwrap();
        assert_eq!((m.train.len(), m.test.len()), (3, 2));
        assert!(m.channels.rgb && m.channels.dem && m.channels.sar);
        let tile = load_tile(&m, &ids[0]).unwrap();
        assert_eq!(tile.landcover.dim(), (32, 32));
        assert_eq!(tile.pixel_size_m, 1.0);
        assert!(tile.sar.unwrap().iter().all(|&v| v > 0.0));
        assert!(tile.landcover.iter().any(|&v| v == BUILDINGS));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_tile(&mut ChaCha8Rng::seed_from_u64(5), 24);
        let b = generate_tile(&mut ChaCha8Rng::seed_from_u64(5), 24);
        assert_eq!(a.dem, b.dem);
        assert_eq!(a.rgb, b.rgb);
    }
}
