//! Greedy IoU matching, all-point average precision, AP50 and mAP.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// A scored box on one image, named by category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub category: String,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub category: String,
    pub bbox: BBox,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn detection_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.image.cmp(&b.image))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// TP/FP flags for the detections of `category`, in ranking order: highest
/// confidence first, ties by image id and then by box coordinates.
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], category: &str, iou_thresh: f64) -> Vec<bool> {
    let mut ranked: Vec<&ScoredBox> = dets.iter().filter(|d| d.category == category).collect();
    ranked.sort_by(|a, b| detection_order(a, b));
    let mut by_image: BTreeMap<usize, Vec<(BBox, bool)>> = BTreeMap::new();
    for g in gts.iter().filter(|g| g.category == category) {
        by_image.entry(g.image).or_default().push((g.bbox, false));
    }
    ranked
        .iter()
        .map(|d| {
            let Some(cands) = by_image.get_mut(&d.image) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= iou_thresh && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    cands[j].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the precision envelope `p̃(r) = max_{r' ≥ r} p(r')`.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Evaluation("average precision is undefined without ground truth".into()));
    }
    let curve = pr_curve(flags, num_gt);
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for i in (0..curve.len()).rev() {
        running = running.max(curve[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    /// AP at each evaluated threshold.
    pub per_threshold: Vec<f64>,
    pub ap50: f64,
    pub ap: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub thresholds: Vec<f64>,
    /// Categories with at least one ground truth, sorted by name.
    pub per_category: BTreeMap<String, CategoryAp>,
    pub ap50: f64,
    pub map: f64,
}

/// Per-category AP at every threshold; `thresholds` must contain 0.5.
pub fn evaluate(dets: &[ScoredBox], gts: &[GroundTruth], categories: &[String], thresholds: &[f64]) -> Result<ApResult> {
    let i50 = thresholds
        .iter()
        .position(|&t| t == 0.5)
        .ok_or_else(|| Error::Validation("thresholds must include 0.5".into()))?;
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Validation(format!("IoU threshold {t} outside [0, 1]")));
    }
    for name in dets.iter().map(|d| &d.category).chain(gts.iter().map(|g| &g.category)) {
        if !categories.contains(name) {
            return Err(Error::Validation(format!("unknown category '{name}'")));
        }
    }
    if let Some(d) = dets.iter().find(|d| !d.confidence.is_finite()) {
        return Err(Error::Validation(format!("detection on image {} has confidence {}", d.image, d.confidence)));
    }
    let mut per_category = BTreeMap::new();
    for name in categories {
        let num_gt = gts.iter().filter(|g| &g.category == name).count();
        if num_gt == 0 {
            continue;
        }
        let per_threshold = thresholds
            .iter()
            .map(|&t| average_precision(&match_detections(dets, gts, name, t), num_gt))
            .collect::<Result<Vec<_>>>()?;
        let ap = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
        per_category.insert(
            name.clone(),
            CategoryAp {
                ap50: per_threshold[i50],
                per_threshold,
                ap,
                num_gt,
            },
        );
    }
    if per_category.is_empty() {
        return Err(Error::Evaluation("no category has ground truth".into()));
    }
    let n = per_category.len() as f64;
    Ok(ApResult {
        thresholds: thresholds.to_vec(),
        ap50: per_category.values().map(|c| c.ap50).sum::<f64>() / n,
        map: per_category.values().map(|c| c.ap).sum::<f64>() / n,
        per_category,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub ap50: f64,
    pub ap: f64,
}

/// The metrics report written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub ap50: f64,
    pub map: f64,
}

impl From<&ApResult> for MetricsReport {
    fn from(r: &ApResult) -> Self {
        Self {
            per_category: r
                .per_category
                .iter()
                .map(|(k, c)| (k.clone(), CategoryMetrics { ap50: c.ap50, ap: c.ap }))
                .collect(),
            ap50: r.ap50,
            map: r.map,
        }
    }
}

/// `category,rank,recall,precision` at IoU 0.5.
pub fn pr_csv(dets: &[ScoredBox], gts: &[GroundTruth], result: &ApResult) -> String {
    let mut out = String::from("category,rank,recall,precision\n");
    for (name, c) in &result.per_category {
        let flags = match_detections(dets, gts, name, 0.5);
        for (i, (r, p)) in pr_curve(&flags, c.num_gt).into_iter().enumerate() {
            out.push_str(&format!("{name},{},{r},{p}\n", i + 1));
        }
    }
    out
}

pub fn write_pr_csv(dets: &[ScoredBox], gts: &[GroundTruth], result: &ApResult, path: &Path) -> Result<()> {
    std::fs::write(path, pr_csv(dets, gts, result)).map_err(|e| Error::io(path, e))
}
