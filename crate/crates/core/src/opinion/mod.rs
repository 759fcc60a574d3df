//! Subjective opinions: each 2D prediction lifted to a filtered 3D point set
//! plus its category and confidence, and one unknown opinion holding the
//! valid depth that no prediction claims.

mod dbscan;

use std::collections::BTreeMap;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Backprojector, Frame};

pub use dbscan::dbscan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpinionError {
    #[error("opinion rejected: every coarse voxel was classified as noise")]
    Rejected,
    #[error("invalid clustering parameters: {0}")]
    InvalidParams(String),
}

/// Coarse-resolution clustering used to drop stray mask points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringParams {
    /// Edge of the coarse voxels whose centers are clustered, meters.
    pub coarse_voxel: f64,
    /// Neighborhood radius, meters.
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusteringParams {
    /// `coarse_voxel` = 4 map voxels, `eps` = 1.8 coarse voxels, `min_pts` = 4.
    pub fn for_map_voxel(voxel_size: f64) -> Self {
        let coarse_voxel = 4.0 * voxel_size;
        Self {
            coarse_voxel,
            eps: 1.8 * coarse_voxel,
            min_pts: 4,
        }
    }

    pub fn validate(&self) -> Result<(), OpinionError> {
        if self.coarse_voxel > 0.0 && self.eps > 0.0 && self.min_pts >= 1 {
            Ok(())
        } else {
            Err(OpinionError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpinionLabel {
    Unknown,
    Semantic { category: String, confidence: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectiveOpinion {
    /// World-frame points, meters.
    pub points: Vec<Point3<f64>>,
    /// Row-major source pixel of each point.
    pub pixels: Vec<u32>,
    pub label: OpinionLabel,
    pub source_frame: u64,
    /// `(u_min, v_min, u_max, v_max)` of the originating mask; `None` for
    /// the unknown opinion.
    pub pixel_bbox: Option<[u32; 4]>,
}

impl SubjectiveOpinion {
    pub fn is_unknown(&self) -> bool {
        matches!(self.label, OpinionLabel::Unknown)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Indices of the points that survive coarse-voxel clustering, ascending.
///
/// Points are bucketed into coarse voxels, DBSCAN runs on the occupied
/// voxel centers, and only points of the cluster holding the most points
/// are kept (ties go to the lower cluster label).
pub fn filter_indices(points: &[Point3<f64>], params: &ClusteringParams) -> Result<Vec<usize>, OpinionError> {
    params.validate()?;
    let inv = 1.0 / params.coarse_voxel;
    let keys: Vec<[i64; 3]> = points
        .iter()
        .map(|p| {
            [
                (p.x * inv).floor() as i64,
                (p.y * inv).floor() as i64,
                (p.z * inv).floor() as i64,
            ]
        })
        .collect();
    // Sorted buckets make the cluster labels independent of point order.
    let mut buckets: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for k in &keys {
        *buckets.entry(*k).or_default() += 1;
    }
    let half = 0.5 * params.coarse_voxel;
    let centers: Vec<Point3<f64>> = buckets
        .keys()
        .map(|k| {
            Point3::new(
                k[0] as f64 * params.coarse_voxel + half,
                k[1] as f64 * params.coarse_voxel + half,
                k[2] as f64 * params.coarse_voxel + half,
            )
        })
        .collect();
    let labels = dbscan(&centers, params.eps, params.min_pts);

    let mut mass: BTreeMap<usize, usize> = BTreeMap::new();
    for (label, count) in labels.iter().zip(buckets.values()) {
        if let Some(c) = label {
            *mass.entry(*c).or_default() += count;
        }
    }
    let winner = mass
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(c, _)| *c)
        .ok_or(OpinionError::Rejected)?;

    let keep: BTreeMap<[i64; 3], bool> = buckets
        .keys()
        .zip(&labels)
        .map(|(k, l)| (*k, *l == Some(winner)))
        .collect();
    Ok((0..points.len()).filter(|&i| keep[&keys[i]]).collect())
}

/// Removes points outside the dominant coarse cluster.
pub fn filter_geometric_opinion(
    points: &[Point3<f64>],
    params: &ClusteringParams,
) -> Result<Vec<Point3<f64>>, OpinionError> {
    Ok(filter_indices(points, params)?.into_iter().map(|i| points[i]).collect())
}

/// Turns one decoded frame into subjective opinions.
///
/// Semantic opinions come first in prediction order, followed by at most one
/// unknown opinion. Predictions left without valid points, before or after
/// filtering, are dropped.
pub fn build_opinions(frame: &Frame, params: &ClusteringParams, max_range: f64) -> Vec<SubjectiveOpinion> {
    let intr = &frame.intrinsics;
    let depth = &frame.depth.values;
    let proj = Backprojector::new(intr, &frame.pose, max_range);
    let mut claimed = vec![false; intr.pixel_count()];
    let mut opinions = Vec::with_capacity(frame.predictions.len() + 1);

    for pred in &frame.predictions {
        let mut points = Vec::with_capacity(pred.mask.foreground_count());
        let mut pixels = Vec::with_capacity(points.capacity());
        for (start, len) in pred.mask.foreground_runs() {
            claimed[start..start + len].fill(true);
            for idx in start..start + len {
                if let Some(p) = proj.pixel(idx, depth[idx]) {
                    points.push(p);
                    pixels.push(idx as u32);
                }
            }
        }
        if points.is_empty() {
            continue;
        }
        let Ok(keep) = filter_indices(&points, params) else {
            continue;
        };
        opinions.push(SubjectiveOpinion {
            points: keep.iter().map(|&i| points[i]).collect(),
            pixels: keep.iter().map(|&i| pixels[i]).collect(),
            label: OpinionLabel::Semantic {
                category: pred.category.clone(),
                confidence: pred.confidence,
            },
            source_frame: frame.frame_id,
            pixel_bbox: pred.mask.bbox(intr.width),
        });
    }

    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for (idx, (&taken, &d)) in claimed.iter().zip(depth).enumerate() {
        if taken {
            continue;
        }
        if let Some(p) = proj.pixel(idx, d) {
            points.push(p);
            pixels.push(idx as u32);
        }
    }
    if !points.is_empty() {
        opinions.push(SubjectiveOpinion {
            points,
            pixels,
            label: OpinionLabel::Unknown,
            source_frame: frame.frame_id,
            pixel_bbox: None,
        });
    }
    opinions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{CameraIntrinsics, DepthImage, Pose, PredictionInstance, Rle};

    fn params() -> ClusteringParams {
        ClusteringParams::for_map_voxel(0.02)
    }

    fn grid_blob(origin: [f64; 3], side: usize, step: f64) -> Vec<Point3<f64>> {
        let mut v = Vec::new();
        for a in 0..side {
            for b in 0..side {
                for c in 0..side {
                    v.push(Point3::new(
                        origin[0] + a as f64 * step,
                        origin[1] + b as f64 * step,
                        origin[2] + c as f64 * step,
                    ));
                }
            }
        }
        v
    }

    #[test]
    fn defaults_follow_map_voxel() {
        let p = params();
        assert!((p.coarse_voxel - 0.08).abs() < 1e-15);
        assert!((p.eps - 0.144).abs() < 1e-12);
        assert_eq!(p.min_pts, 4);
    }

    #[test]
    fn stray_points_removed() {
        // 500 points spread over a 0.4 m cube plus 5 strays 1 m away.
        let mut pts: Vec<_> = grid_blob([0.0, 0.0, 0.0], 8, 0.05).into_iter().take(500).collect();
        let strays: Vec<_> = (0..5).map(|i| Point3::new(1.4 + 0.01 * i as f64, 0.0, 0.0)).collect();
        pts.extend(&strays);
        let kept = filter_geometric_opinion(&pts, &params()).unwrap();
        assert_eq!(kept.len(), 500);
        assert!(strays.iter().all(|s| !kept.contains(s)));
    }

    #[test]
    fn tight_blob_retained() {
        let pts = grid_blob([0.3, 0.3, 0.3], 6, 0.03);
        assert_eq!(filter_geometric_opinion(&pts, &params()).unwrap(), pts);
    }

    #[test]
    fn isolated_points_rejected() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        assert_eq!(filter_geometric_opinion(&pts, &params()), Err(OpinionError::Rejected));
    }

    fn intr(width: u32, height: u32) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            depth_scale: 0.001,
        }
    }

    fn rect_mask(width: u32, height: u32, u: std::ops::Range<u32>, v: std::ops::Range<u32>) -> Rle {
        let mut m = crate::frame::BinaryMask::new(width, height);
        for y in v {
            for x in u.clone() {
                m.bits[(y * width + x) as usize] = true;
            }
        }
        Rle::encode(&m)
    }

    fn frame(depth: Vec<u16>, predictions: Vec<PredictionInstance>) -> Frame {
        Frame {
            frame_id: 3,
            intrinsics: intr(40, 30),
            pose: Pose::identity(),
            depth: DepthImage::new(40, 30, depth).unwrap(),
            predictions,
            rgb: None,
        }
    }

    #[test]
    fn two_predictions_plus_unknown() {
        let depth = vec![2000u16; 40 * 30];
        let preds = vec![
            PredictionInstance {
                category: "chair".into(),
                confidence: 0.9,
                mask: rect_mask(40, 30, 2..10, 2..10),
            },
            PredictionInstance {
                category: "table".into(),
                confidence: 0.8,
                mask: rect_mask(40, 30, 20..30, 10..20),
            },
        ];
        let ops = build_opinions(&frame(depth, preds), &params(), 4.0);
        assert_eq!(ops.len(), 3);
        assert!(ops[2].is_unknown());
        assert_eq!(ops[0].pixel_bbox, Some([2, 2, 9, 9]));
        assert_eq!(ops[2].pixel_bbox, None);
        assert_eq!(ops[0].len() + ops[1].len() + ops[2].len(), 40 * 30);
    }

    #[test]
    fn prediction_on_invalid_depth_dropped() {
        let mut depth = vec![2000u16; 40 * 30];
        for v in 0..5 {
            for u in 0..5 {
                depth[v * 40 + u] = 0;
            }
        }
        let preds = vec![PredictionInstance {
            category: "chair".into(),
            confidence: 0.9,
            mask: rect_mask(40, 30, 0..5, 0..5),
        }];
        let ops = build_opinions(&frame(depth, preds), &params(), 4.0);
        assert_eq!(ops.len(), 1);
        assert!(ops[0].is_unknown());
        assert_eq!(ops[0].len(), 40 * 30 - 25);
    }

    #[test]
    fn empty_frame_yields_nothing() {
        let ops = build_opinions(&frame(vec![0; 40 * 30], vec![]), &params(), 4.0);
        assert!(ops.is_empty());
    }

    #[test]
    fn opinion_pixels_are_disjoint_from_unknown() {
        let depth = vec![1500u16; 40 * 30];
        let preds = vec![
            PredictionInstance {
                category: "a".into(),
                confidence: 0.5,
                mask: rect_mask(40, 30, 5..15, 5..15),
            },
            PredictionInstance {
                category: "b".into(),
                confidence: 0.5,
                mask: rect_mask(40, 30, 10..20, 10..20),
            },
        ];
        let ops = build_opinions(&frame(depth, preds), &params(), 4.0);
        let unknown: std::collections::HashSet<u32> = ops[2].pixels.iter().copied().collect();
        for op in &ops[..2] {
            assert!(op.pixels.iter().all(|p| !unknown.contains(p)));
        }
        // Overlap pixels belong to both semantic opinions.
        assert!(ops[0].pixels.contains(&(12 * 40 + 12)));
        assert!(ops[1].pixels.contains(&(12 * 40 + 12)));
    }
}
