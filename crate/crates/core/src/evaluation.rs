//! Confusion matrices and mean intersection-over-union.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_label::{LabelMask, IGNORE};

/// Cityscapes class names in training-index order.
pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Ground truth by prediction counts. Column `C` collects predictions that
/// are not a class index (IGNORE or out of range) under valid ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count of pixels with ground truth `gt` predicted as `pred`.
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.classes + 1) + pred]
    }

    /// Pixels with ground truth `gt` and no valid prediction.
    pub fn invalid_predictions(&self, gt: usize) -> u64 {
        self.get(gt, self.classes)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrices over {} and {} classes",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Adds one image to the matrix. Ground-truth IGNORE pixels are skipped.
pub fn accumulate(cm: &mut ConfusionMatrix, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::invalid(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    gt.check_classes(cm.classes)?;
    let stride = cm.classes + 1;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if g == IGNORE {
            continue;
        }
        let col = if (p as usize) < cm.classes { p as usize } else { cm.classes };
        cm.counts[g as usize * stride + col] += 1;
    }
    Ok(())
}

/// Per-class IoU over the evaluated classes and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `(class index, IoU)`; `None` where TP + FP + FN is zero.
    pub per_class: Vec<(usize, Option<f64>)>,
    pub mean: f64,
}

/// `TP / (TP + FP + FN)` per class; the mean skips undefined classes.
pub fn miou(cm: &ConfusionMatrix, subset: Option<&[usize]>) -> Result<IouReport> {
    let all: Vec<usize> = (0..cm.classes).collect();
    let subset = subset.unwrap_or(&all);
    if let Some(&c) = subset.iter().find(|&&c| c >= cm.classes) {
        return Err(Error::invalid(format!("subset class {c} is not below {}", cm.classes)));
    }
    let mut per_class = Vec::with_capacity(subset.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for &c in subset {
        let tp = cm.get(c, c);
        let fn_ = (0..=cm.classes).map(|p| cm.get(c, p)).sum::<u64>() - tp;
        let fp = (0..cm.classes).map(|g| cm.get(g, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        let iou = (denom > 0).then(|| tp as f64 / denom as f64);
        if let Some(v) = iou {
            sum += v;
            n += 1;
        }
        per_class.push((c, iou));
    }
    if n == 0 {
        return Err(Error::invalid("no evaluated class has any pixels"));
    }
    Ok(IouReport {
        per_class,
        mean: sum / n as f64,
    })
}

/// Resolves `"19"`, `"16"`, `"13"` or a comma-separated index list.
///
/// The named subsets refer to the 19 Cityscapes classes; 16 drops terrain,
/// truck and train, 13 additionally drops wall, fence and pole.
pub fn parse_subset(spec: &str, classes: usize) -> Result<Vec<usize>> {
    let named: Option<&[usize]> = match spec.trim() {
        "19" => Some(&[]),
        "16" => Some(&[9, 14, 16]),
        "13" => Some(&[3, 4, 5, 9, 14, 16]),
        _ => None,
    };
    let out: Vec<usize> = match named {
        Some(excluded) => {
            if classes != 19 {
                return Err(Error::invalid(format!(
                    "named subset `{spec}` needs the 19-class label set, dataset has {classes}"
                )));
            }
            (0..19).filter(|c| !excluded.contains(c)).collect()
        }
        None => spec
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad class index `{t}` in subset")))
            })
            .collect::<Result<_>>()?,
    };
    if out.is_empty() {
        return Err(Error::invalid("empty class subset"));
    }
    if let Some(&c) = out.iter().find(|&&c| c >= classes) {
        return Err(Error::invalid(format!("subset class {c} is not below {classes}")));
    }
    Ok(out)
}

/// Plain-text table with 4-decimal IoUs.
pub fn format_report(report: &IouReport, names: &[String]) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  IoU", "class");
    for &(c, iou) in &report.per_class {
        let name = names.get(c).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => {
                let _ = writeln!(out, "{name:<width$}  {v:.4}");
            }
            None => {
                let _ = writeln!(out, "{name:<width$}  n/a");
            }
        }
    }
    let _ = writeln!(out, "{:<width$}  {:.4}", "mIoU", report.mean);
    out
}

/// Machine-readable twin of [`format_report`].
pub fn report_json(report: &IouReport, names: &[String]) -> serde_json::Value {
    let per_class: Vec<serde_json::Value> = report
        .per_class
        .iter()
        .map(|&(c, iou)| {
            serde_json::json!({
                "index": c,
                "name": names.get(c),
                "iou": iou,
            })
        })
        .collect();
    serde_json::json!({ "per_class": per_class, "miou": report.mean })
}
