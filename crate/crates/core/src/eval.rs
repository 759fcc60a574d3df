//! Instance-level evaluation against voxelized ground truth.

use std::collections::BTreeMap;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::GroundTruthScene;
use crate::fusion::TimingSummary;
use crate::map::{InstanceId, MapState, VoxelKey};
use crate::uncertainty::semantic_entropy;

pub const REPORT_FORMAT: &str = "voxeland-eval";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("iou_threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("map voxel size {map} differs from ground truth voxel size {gt}")]
    VoxelSize { map: f64, gt: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Restrict evaluation to these categories; all ground-truth categories
    /// when `None`.
    pub classes: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            classes: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_threshold > 0.0 && self.iou_threshold <= 1.0 {
            Ok(())
        } else {
            Err(EvalError::Threshold(self.iou_threshold))
        }
    }

    fn includes(&self, category: &str) -> bool {
        self.classes.as_ref().is_none_or(|c| c.iter().any(|x| x == category))
    }
}

/// A map instance as a detection: its category, confidence and owned voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub id: InstanceId,
    pub category: String,
    pub confidence: f64,
    pub voxels: Vec<VoxelKey>,
    pub semantic_entropy: Option<f64>,
}

/// Instances with a category, each owning the voxels where it is the most
/// likely instance. The category is the declared one when set, otherwise
/// the most probable; confidence is its probability.
pub fn predicted_instances(map: &MapState) -> Vec<PredictedInstance> {
    let mut owned: BTreeMap<InstanceId, Vec<VoxelKey>> = BTreeMap::new();
    for (key, cell) in map.sorted_cells() {
        if let Some(id) = cell.argmax_instance().filter(|id| !id.is_unknown()) {
            owned.entry(id).or_default().push(*key);
        }
    }
    map.instances()
        .filter(|r| !r.id.is_unknown())
        .filter_map(|r| {
            let dist = r.category_distribution().ok()?;
            let (cat, p) = match r.final_category {
                Some(c) => (c, dist.get(c)),
                None => dist.argmax()?,
            };
            Some(PredictedInstance {
                id: r.id,
                category: map.category_label(cat)?.to_owned(),
                confidence: p,
                voxels: owned.remove(&r.id).unwrap_or_default(),
                semantic_entropy: semantic_entropy(r).ok(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub instance: InstanceId,
    pub category: String,
    pub confidence: f64,
    pub voxel_count: usize,
    pub matched_gt: Option<String>,
    pub iou: f64,
    pub true_positive: bool,
}

fn voxel_iou(pred: &[VoxelKey], gt: &FxHashSet<VoxelKey>) -> f64 {
    let inter = pred.iter().filter(|k| gt.contains(k)).count();
    let union = pred.len() + gt.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching in descending confidence (ties: lower instance id). A
/// prediction is a true positive when it reaches the IoU threshold with a
/// still unmatched ground-truth instance of the same category; the best such
/// instance is consumed.
pub fn match_predictions(
    predictions: &[PredictedInstance],
    gt: &GroundTruthScene,
    cfg: &EvalConfig,
) -> Vec<MatchRecord> {
    let gt_sets: Vec<FxHashSet<VoxelKey>> = gt.instances.iter().map(|g| g.voxels.iter().copied().collect()).collect();
    let mut order: Vec<&PredictedInstance> = predictions.iter().filter(|p| cfg.includes(&p.category)).collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    let mut taken = vec![false; gt.instances.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, inst) in gt.instances.iter().enumerate() {
                if taken[g] || inst.category != p.category {
                    continue;
                }
                let iou = voxel_iou(&p.voxels, &gt_sets[g]);
                if iou >= cfg.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            // Report the best overlap with any same-category instance, matched or not.
            let iou = best.map(|b| b.1).unwrap_or_else(|| {
                gt.instances
                    .iter()
                    .zip(&gt_sets)
                    .filter(|(inst, _)| inst.category == p.category)
                    .map(|(_, s)| voxel_iou(&p.voxels, s))
                    .fold(0.0, f64::max)
            });
            MatchRecord {
                instance: p.id,
                category: p.category.clone(),
                confidence: p.confidence,
                voxel_count: p.voxels.len(),
                matched_gt: best.map(|(g, _)| gt.instances[g].id.clone()),
                iou,
                true_positive: best.is_some(),
            }
        })
        .collect()
}

pub fn match_to_ground_truth(map: &MapState, gt: &GroundTruthScene, cfg: &EvalConfig) -> Vec<MatchRecord> {
    match_predictions(&predicted_instances(map), gt, cfg)
}

/// All-point interpolated AP of a ranked TP/FP list. `None` when there is no
/// ground truth for the class.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // Each true positive raises recall by 1/num_gt.
    Some(
        ranked_tp
            .iter()
            .zip(&precision)
            .filter(|(hit, _)| **hit)
            .map(|(_, p)| p / num_gt as f64)
            .sum(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub instances: usize,
}

/// Precision among instances whose semantic entropy is below each threshold.
/// Thresholds with no such instance are omitted.
pub fn precision_vs_entropy(
    predictions: &[PredictedInstance],
    matches: &[MatchRecord],
    thresholds: &[f64],
) -> Vec<CurvePoint> {
    let tp: FxHashMap<InstanceId, bool> = matches.iter().map(|m| (m.instance, m.true_positive)).collect();
    let scored: Vec<(f64, bool)> = predictions
        .iter()
        .filter_map(|p| Some((p.semantic_entropy?, *tp.get(&p.id)?)))
        .collect();
    thresholds
        .iter()
        .filter_map(|&h| {
            let below: Vec<bool> = scored.iter().filter(|(e, _)| *e < h).map(|s| s.1).collect();
            (!below.is_empty()).then(|| CurvePoint {
                threshold: h,
                precision: below.iter().filter(|t| **t).count() as f64 / below.len() as f64,
                instances: below.len(),
            })
        })
        .collect()
}

/// Evenly spaced thresholds from `step` up to just above the largest
/// semantic entropy among the predictions.
pub fn default_thresholds(predictions: &[PredictedInstance], step: f64) -> Vec<f64> {
    let max = predictions
        .iter()
        .filter_map(|p| p.semantic_entropy)
        .fold(0.0, f64::max);
    let n = (max / step).floor() as usize + 1;
    (1..=n).map(|i| i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub iou_threshold: f64,
    /// AP of every evaluated class with at least one ground-truth instance.
    pub per_class_ap: BTreeMap<String, f64>,
    /// Predicted classes without ground truth, excluded from the mean.
    pub absent_classes: Vec<String>,
    pub map_score: f64,
    pub matches: Vec<MatchRecord>,
    pub precision_vs_entropy: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

pub fn evaluate(map: &MapState, gt: &GroundTruthScene, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if (map.voxel_size() - gt.voxel_size).abs() > 1e-12 {
        return Err(EvalError::VoxelSize {
            map: map.voxel_size(),
            gt: gt.voxel_size,
        });
    }
    let predictions = predicted_instances(map);
    let matches = match_predictions(&predictions, gt, cfg);

    let mut num_gt: BTreeMap<&str, usize> = BTreeMap::new();
    for g in gt.instances.iter().filter(|g| cfg.includes(&g.category)) {
        *num_gt.entry(&g.category).or_default() += 1;
    }
    let mut per_class_ap = BTreeMap::new();
    for (&class, &n) in &num_gt {
        let ranked: Vec<bool> = matches.iter().filter(|m| m.category == class).map(|m| m.true_positive).collect();
        per_class_ap.insert(class.to_owned(), average_precision(&ranked, n).expect("n > 0"));
    }
    let mut absent: Vec<String> = matches
        .iter()
        .filter(|m| !num_gt.contains_key(m.category.as_str()))
        .map(|m| m.category.clone())
        .collect();
    absent.sort();
    absent.dedup();
    let map_score = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let thresholds = default_thresholds(&predictions, 0.05);
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        iou_threshold: cfg.iou_threshold,
        per_class_ap,
        absent_classes: absent,
        map_score,
        precision_vs_entropy: precision_vs_entropy(&predictions, &matches, &thresholds),
        matches,
        timing: None,
    })
}
