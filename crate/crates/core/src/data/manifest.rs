use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DFC2020_CLASSES, GEONRW_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// GeoNRW aerial photographs, DEMs and land cover (1 m).
    GeoNrw,
    /// The GeoNRW tiles that also have a TerraSAR-X acquisition.
    GeoNrwSar,
    /// DFC2020 Sentinel-1/Sentinel-2 with high-resolution labels (10 m).
    Dfc2020,
    /// GeoNRW directory layout without fixed split sizes (small or synthetic sets).
    Custom,
}

impl DatasetKind {
    /// `(train, test)` tile counts the published datasets must have.
    pub fn declared_totals(self) -> Option<(usize, usize)> {
        match self {
            DatasetKind::GeoNrw => Some((7297, 485)),
            DatasetKind::GeoNrwSar => Some((2699, 281)),
            DatasetKind::Dfc2020 => Some((5128, 986)),
            DatasetKind::Custom => None,
        }
    }

    pub fn pixel_size_m(self) -> f64 {
        match self {
            DatasetKind::Dfc2020 => 10.0,
            _ => 1.0,
        }
    }

    pub fn default_class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            DatasetKind::Dfc2020 => &DFC2020_CLASSES,
            _ => &GEONRW_CLASSES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geonrw" => Ok(DatasetKind::GeoNrw),
            "geonrw_sar" | "geonrw-sar" => Ok(DatasetKind::GeoNrwSar),
            "dfc2020" => Ok(DatasetKind::Dfc2020),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::GeoNrw => "geonrw",
            DatasetKind::GeoNrwSar => "geonrw_sar",
            DatasetKind::Dfc2020 => "dfc2020",
            DatasetKind::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train or test)"))),
        }
    }
}

/// Which rasters every tile of the manifest provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelFlags {
    pub rgb: bool,
    pub dem: bool,
    pub sar: bool,
}

/// Resolved on-disk paths for one tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileFiles {
    pub rgb: Option<PathBuf>,
    pub dem: Option<PathBuf>,
    pub sar: Option<PathBuf>,
    pub labels: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub channels: ChannelFlags,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub files: BTreeMap<String, TileFiles>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn files(&self, id: &str) -> Result<&TileFiles> {
        self.files
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("tile '{id}' is not in the manifest")))
    }

    /// Line-oriented listing: header comments, then `tile_id<TAB>split`.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# kind={}\n", self.kind));
        out.push_str(&format!("# root={}\n", self.root.display()));
        out.push_str(&format!(
            "# channels=rgb:{},dem:{},sar:{}\n",
            self.channels.rgb, self.channels.dem, self.channels.sar
        ));
        out.push_str(&format!(
            "# classes={}:{}\n",
            self.num_classes,
            self.class_names.join("|")
        ));
        for (split, ids) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            for id in ids {
                out.push_str(&format!("{id}\t{split}\n"));
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    fn check_invariants(&self) -> Result<()> {
        check_splits(&self.train, &self.test)?;
        if let Some((n_train, n_test)) = self.kind.declared_totals() {
            if self.train.len() != n_train || self.test.len() != n_test {
                return Err(Error::Dataset(format!(
                    "{} expects {n_train} train / {n_test} test tiles, found {} / {}",
                    self.kind,
                    self.train.len(),
                    self.test.len()
                )));
            }
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Dataset(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn preview<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let all: Vec<&str> = ids.collect();
    let mut s = all.iter().take(10).copied().collect::<Vec<_>>().join(", ");
    if all.len() > 10 {
        s.push_str(&format!(", ... ({} more)", all.len() - 10));
    }
    s
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn first_existing(base: &Path, stem: &str, suffixes: &[&str]) -> Option<PathBuf> {
    suffixes
        .iter()
        .map(|s| base.join(format!("{stem}{s}")))
        .find(|p| p.is_file())
}

fn check_splits(train_ids: &[String], test_ids: &[String]) -> Result<()> {
    let train: BTreeSet<&String> = train_ids.iter().collect();
    let test: BTreeSet<&String> = test_ids.iter().collect();
    if train.len() != train_ids.len() || test.len() != test_ids.len() {
        return Err(Error::Dataset("duplicate tile ids within a split".into()));
    }
    let overlap: Vec<&String> = train.intersection(&test).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Dataset(format!(
            "train and test splits overlap in {} tiles: {}",
            overlap.len(),
            preview(overlap.iter().map(|s| s.as_str()))
        )));
    }
    Ok(())
}

/// Scans a dataset root and builds the split manifest.
///
/// GeoNRW-style roots hold `<group>/<stem>_{rgb,dem,seg,sar}.*` files plus
/// `train.txt` / `test.txt` listing `<group>/<stem>` ids. DFC2020 roots hold
/// the contest folders; the contest test folders (`*_0`) become the training
/// split and the validation folders the test split.
pub fn load_manifest(root: &Path, kind: DatasetKind) -> Result<DatasetManifest> {
    let class_names = match fs::read_to_string(root.join("classes.txt")) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => kind.default_class_names(),
    };
    let manifest = match kind {
        DatasetKind::Dfc2020 => scan_dfc2020(root, class_names)?,
        _ => scan_geonrw_layout(root, kind, class_names)?,
    };
    manifest.check_invariants()?;
    Ok(manifest)
}

fn scan_geonrw_layout(
    root: &Path,
    kind: DatasetKind,
    class_names: Vec<String>,
) -> Result<DatasetManifest> {
    let mut splits = Vec::new();
    for name in ["train.txt", "test.txt"] {
        let path = root.join(name);
        if !path.is_file() {
            return Err(Error::Dataset(format!(
                "missing split list {}",
                path.display()
            )));
        }
        splits.push(read_id_list(&path)?);
    }
    let mut test = splits.pop().unwrap();
    let mut train = splits.pop().unwrap();
    check_splits(&train, &test)?;

    let mut files = BTreeMap::new();
    let mut missing: Vec<String> = Vec::new();
    let mut sar_missing: BTreeSet<String> = BTreeSet::new();
    let mut counts = (0usize, 0usize, 0usize);
    for id in train.iter().chain(test.iter()) {
        let rel = Path::new(id);
        let dir = root.join(rel.parent().unwrap_or(Path::new("")));
        let stem = rel
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("malformed tile id '{id}'")))?;
        let rgb = first_existing(&dir, stem, &["_rgb.tif", "_rgb.png", "_rgb.jp2"]);
        let dem = first_existing(&dir, stem, &["_dem.tif"]);
        let sar = first_existing(&dir, stem, &["_sar.tif"]);
        let labels = first_existing(&dir, stem, &["_seg.tif"]);
        let required_missing = match kind {
            DatasetKind::Custom => labels.is_none(),
            _ => labels.is_none() || rgb.is_none() || dem.is_none(),
        };
        if required_missing {
            missing.push(id.clone());
            continue;
        }
        counts.0 += rgb.is_some() as usize;
        counts.1 += dem.is_some() as usize;
        counts.2 += sar.is_some() as usize;
        if sar.is_none() {
            sar_missing.insert(id.clone());
        }
        files.insert(
            id.clone(),
            TileFiles {
                rgb,
                dem,
                sar,
                labels: labels.unwrap(),
            },
        );
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} tiles are missing required channel files: {}",
            missing.len(),
            preview(missing.iter().map(|s| s.as_str()))
        )));
    }

    if kind == DatasetKind::GeoNrwSar {
        train.retain(|id| !sar_missing.contains(id));
        test.retain(|id| !sar_missing.contains(id));
        files.retain(|id, _| !sar_missing.contains(id));
    }
    let n = files.len();
    let flag = |count: usize, what: &str| -> Result<bool> {
        if count == 0 {
            Ok(false)
        } else if count == n {
            Ok(true)
        } else if kind == DatasetKind::Custom {
            Err(Error::Dataset(format!(
                "{what} present for only {count} of {n} tiles; missing: {}",
                preview(
                    files
                        .iter()
                        .filter(|(_, f)| match what {
                            "rgb" => f.rgb.is_none(),
                            "dem" => f.dem.is_none(),
                            _ => f.sar.is_none(),
                        })
                        .map(|(id, _)| id.as_str())
                )
            )))
        } else {
            Ok(false)
        }
    };
    let sar_count = if kind == DatasetKind::GeoNrwSar { n } else { counts.2 };
    let channels = ChannelFlags {
        rgb: flag(counts.0, "rgb")?,
        dem: flag(counts.1, "dem")?,
        sar: flag(sar_count, "sar")?,
    };
    Ok(DatasetManifest {
        kind,
        root: root.to_path_buf(),
        train,
        test,
        channels,
        num_classes: class_names.len(),
        class_names,
        files,
    })
}

fn scan_dfc2020(root: &Path, class_names: Vec<String>) -> Result<DatasetManifest> {
    // contest "test" folders feed our training split, "validation" our test split
    let groups = [(Split::Train, "0"), (Split::Test, "validation")];
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut files = BTreeMap::new();
    let mut missing = Vec::new();
    for (split, suffix) in groups {
        let label_dir = root.join(format!("dfc_{suffix}"));
        let entries = fs::read_dir(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .filter(|n| n.ends_with(".tif") && n.contains("_dfc_"))
            .collect();
        names.sort();
        for name in names {
            let id = name.trim_end_matches(".tif").replacen("_dfc_", "_", 1);
            let s1 = root
                .join(format!("s1_{suffix}"))
                .join(name.replacen("_dfc_", "_s1_", 1));
            let s2 = root
                .join(format!("s2_{suffix}"))
                .join(name.replacen("_dfc_", "_s2_", 1));
            if !s1.is_file() || !s2.is_file() {
                missing.push(id.clone());
                continue;
            }
            files.insert(
                id.clone(),
                TileFiles {
                    rgb: Some(s2),
                    dem: None,
                    sar: Some(s1),
                    labels: label_dir.join(&name),
                },
            );
            match split {
                Split::Train => train.push(id),
                Split::Test => test.push(id),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} tiles are missing Sentinel-1/Sentinel-2 files: {}",
            missing.len(),
            preview(missing.iter().map(|s| s.as_str()))
        )));
    }
    Ok(DatasetManifest {
        kind: DatasetKind::Dfc2020,
        root: root.to_path_buf(),
        train,
        test,
        channels: ChannelFlags {
            rgb: true,
            dem: false,
            sar: true,
        },
        num_classes: class_names.len(),
        class_names,
        files,
    })
}
