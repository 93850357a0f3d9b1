//! Segmentation agreement metrics and the Fréchet feature distance.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::raster_io::read_raster;
use crate::data::{load_tile, DatasetManifest, SampleSpec};
use crate::error::{Error, Result};
use crate::segmentation::Segmenter;
use crate::training::output_path;

/// Pixel counts indexed by (reference class, predicted class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Adds the pixels of one aligned (prediction, reference) pair.
    pub fn accumulate(&mut self, pred: &Array2<u8>, reference: &Array2<u8>) -> Result<()> {
        if pred.dim() != reference.dim() {
            return Err(Error::Shape(format!(
                "prediction is {:?} but reference is {:?}",
                pred.dim(),
                reference.dim()
            )));
        }
        for map in [pred, reference] {
            crate::data::validate_labels(map, self.classes)?;
        }
        for (&p, &r) in pred.iter().zip(reference.iter()) {
            self.counts[usize::from(r) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot add {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &Array2<u8>, reference: &Array2<u8>, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, reference)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// `None` for classes absent from both prediction and reference.
    pub iou: Vec<Option<f64>>,
    /// Mean over defined classes only.
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Per-class IoU `TP / (TP + FP + FN)`, their mean over defined classes, and
/// pixel accuracy.
pub fn iou_miou_pixacc(cm: &ConfusionMatrix) -> Result<ClassScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidValue("confusion matrix is empty".into()));
    }
    let c = cm.classes;
    let iou: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|r| cm.get(r, k)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidValue("no class has a defined IoU".into()));
    }
    Ok(ClassScores {
        miou: defined.iter().sum::<f64>() / defined.len() as f64,
        pixel_accuracy: cm.trace() as f64 / total as f64,
        iou,
    })
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl Moments {
    /// Sample moments with the unbiased covariance (biased for one sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::InvalidValue("no feature vectors".into()));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        if n < d {
            log::warn!("{n} feature vectors for dimension {d}: covariance is rank-deficient");
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let cov = centered.transpose() * &centered / denom;
        Ok(Moments { mean, cov, count: n })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^½)`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric product `Σ1^½ Σ2 Σ1^½`, negative eigenvalues clamped to zero.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "moment dimensions disagree: means {} and {}, covariances {:?} and {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    if mu1 == mu2 && cov1 == cov2 {
        return Ok(0.0);
    }
    let (c1, c2) = (symmetrize(cov1), symmetrize(cov2));
    let s1 = psd_sqrt(&c1);
    let inner = symmetrize(&(&s1 * &c2 * &s1));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    if fd < 0.0 {
        if fd < -1e-6 {
            log::warn!("Fréchet distance {fd:e} is negative beyond rounding; clamped to 0");
        }
        return Ok(0.0);
    }
    Ok(fd)
}

pub fn frechet_between(a: &Moments, b: &Moments) -> Result<f64> {
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Segmentation of fakes against the ground-truth land cover.
    VsGroundTruth,
    /// Segmentation of fakes against the segmentation of the real images.
    VsRealSegmentation,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::VsGroundTruth => "vs_ground_truth",
            Protocol::VsRealSegmentation => "vs_real_segmentation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub class_names: Vec<String>,
    pub scores: ClassScores,
    pub frechet_distance: f64,
    /// Tiles contributing to the feature moments.
    pub samples: usize,
}

impl EvalReport {
    pub fn miou(&self) -> f64 {
        self.scores.miou
    }

    pub fn pixel_accuracy(&self) -> f64 {
        self.scores.pixel_accuracy
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// CSV with one row per protocol: `protocol,miou,pixel_accuracy,frechet_distance,samples,iou_<class>...`.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    out.push_str("protocol,miou,pixel_accuracy,frechet_distance,samples");
    for name in &first.class_names {
        out.push_str(&format!(",iou_{}", name.replace([',', ' ', '/'], "_")));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6e},{}",
            r.protocol,
            r.scores.miou,
            r.scores.pixel_accuracy,
            r.frechet_distance,
            r.samples
        ));
        for v in &r.scores.iou {
            out.push_str(&format!(",{}", fmt_opt(*v)));
        }
        out.push('\n');
    }
    out
}

/// Fixed-width table: one column per protocol, rows mIoU, pixel accuracy,
/// FD, then the per-class IoUs.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let label_w = first
        .class_names
        .iter()
        .map(|n| n.len() + 4)
        .chain([18])
        .max()
        .unwrap_or(18);
    let col_w = 22;
    let mut out = format!("{:label_w$}", "");
    for r in reports {
        out.push_str(&format!("{:>col_w$}", r.protocol.to_string()));
    }
    out.push('\n');
    let mut row = |label: &str, cells: Vec<String>| {
        out.push_str(&format!("{label:label_w$}"));
        for c in cells {
            out.push_str(&format!("{c:>col_w$}"));
        }
        out.push('\n');
    };
    row("mIoU", reports.iter().map(|r| format!("{:.4}", r.scores.miou)).collect());
    row(
        "pixel accuracy",
        reports.iter().map(|r| format!("{:.4}", r.scores.pixel_accuracy)).collect(),
    );
    row(
        "Frechet distance",
        reports.iter().map(|r| format!("{:.4e}", r.frechet_distance)).collect(),
    );
    for (k, name) in first.class_names.iter().enumerate() {
        row(
            &format!("IoU {name}"),
            reports
                .iter()
                .map(|r| r.scores.iou.get(k).copied().flatten().map_or("undefined".into(), |v| format!("{v:.4}")))
                .collect(),
        );
    }
    out
}

/// Where the synthesized counterparts of the real tiles come from.
#[derive(Debug, Clone, Copy)]
pub enum FakeSource<'a> {
    /// `<dir>/<id>.tif` in native sensor units, as written by synthesis.
    Directory(&'a Path),
    /// The real images themselves; checks the harness end to end.
    RealCopies,
}

/// Reads a synthesized tile and normalizes it like the real images.
pub fn load_fake(spec: &SampleSpec, dir: &Path, id: &str) -> Result<Array3<f32>> {
    let raster = read_raster(&output_path(dir, id, "tif"))?;
    spec.target_norm().normalize(&raster.data)
}

/// Scores fake tiles against ground truth and against the segmentation of
/// the matching real tiles, plus the feature-space Fréchet distance.
/// Returns one report per protocol.
pub fn evaluate_run(
    seg: &Segmenter,
    manifest: &DatasetManifest,
    ids: &[String],
    fakes: FakeSource,
) -> Result<Vec<EvalReport>> {
    if ids.is_empty() {
        return Err(Error::Dataset("no tiles to evaluate".into()));
    }
    if let FakeSource::Directory(dir) = fakes {
        let missing: Vec<&str> = ids
            .iter()
            .filter(|id| !output_path(dir, id, "tif").is_file())
            .map(|id| id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "{} tiles have no synthesized counterpart in {}: {}",
                missing.len(),
                dir.display(),
                missing.join(", ")
            )));
        }
    }
    let classes = seg.class_names.len();
    let mut vs_gt = ConfusionMatrix::new(classes);
    let mut vs_real = ConfusionMatrix::new(classes);
    let (mut real_feats, mut fake_feats) = (Vec::new(), Vec::new());
    for id in ids {
        let tile = load_tile(manifest, id)?;
        let real = seg.spec.target_image(&tile)?;
        let fake = match fakes {
            FakeSource::Directory(dir) => load_fake(&seg.spec, dir, id)?,
            FakeSource::RealCopies => real.clone(),
        };
        if fake.dim() != real.dim() {
            return Err(Error::Shape(format!(
                "tile {id}: fake {:?} vs real {:?}",
                fake.dim(),
                real.dim()
            )));
        }
        let (maps, mut feats) = seg.segment_batch(&[fake, real])?;
        vs_gt.accumulate(&maps[0], &tile.landcover)?;
        vs_real.accumulate(&maps[0], &maps[1])?;
        real_feats.push(feats.pop().expect("two feature rows"));
        fake_feats.push(feats.pop().expect("two feature rows"));
    }
    let fd = frechet_between(
        &Moments::from_features(&real_feats)?,
        &Moments::from_features(&fake_feats)?,
    )?;
    let report = |protocol, cm: &ConfusionMatrix| -> Result<EvalReport> {
        Ok(EvalReport {
            protocol,
            class_names: seg.class_names.clone(),
            scores: iou_miou_pixacc(cm)?,
            frechet_distance: fd,
            samples: ids.len(),
        })
    };
    Ok(vec![
        report(Protocol::VsGroundTruth, &vs_gt)?,
        report(Protocol::VsRealSegmentation, &vs_real)?,
    ])
}
