//! On-disk dataset format: a JSON-lines frame manifest, 16-bit PGM depth
//! images, per-frame prediction sets with RLE masks, and pre-voxelized
//! ground truth.

mod camera;
mod image;
mod rle;

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::VoxelKey;

pub(crate) use camera::Backprojector;
pub use camera::{backproject, project, CameraIntrinsics, Pose};
pub use image::{DepthImage, RgbImage};
pub use rle::{BinaryMask, Rle};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {message}")]
    InFile { path: PathBuf, message: String },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid ground truth: {0}")]
    GroundTruth(String),
}

impl FrameError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        Self::InFile {
            path: path.to_path_buf(),
            message: self.to_string(),
        }
    }
}

/// Serialized pose: row-major rotation and translation, camera-to-world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self {
            rotation: p.rotation_row_major(),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

/// One manifest line as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub frame_id: u64,
    pub depth: String,
    pub predictions: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<String>,
    pub pose: PoseRecord,
    pub intrinsics: CameraIntrinsics,
}

/// A validated manifest entry with paths resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub depth: PathBuf,
    pub predictions: PathBuf,
    pub rgb: Option<PathBuf>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

pub fn load_manifest(path: &Path) -> Result<Vec<FrameRecord>, FrameError> {
    let file = std::fs::File::open(path).map_err(|e| FrameError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut frames = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FrameError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let err = |message: String| FrameError::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: ManifestLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let pose = Pose::from_row_major(raw.pose.rotation, raw.pose.translation)
            .map_err(|e| err(e.to_string()))?;
        raw.intrinsics.validate().map_err(|e| err(e.to_string()))?;
        frames.push(FrameRecord {
            frame_id: raw.frame_id,
            depth: base.join(&raw.depth),
            predictions: base.join(&raw.predictions),
            rgb: raw.rgb.as_ref().map(|p| base.join(p)),
            pose,
            intrinsics: raw.intrinsics,
        });
    }
    Ok(frames)
}

/// One 2D instance prediction from the segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInstance {
    pub category: String,
    pub confidence: f64,
    #[serde(rename = "rle")]
    pub mask: Rle,
}

impl PredictionInstance {
    pub fn validate(&self, pixel_count: usize) -> Result<(), FrameError> {
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(FrameError::Format(format!(
                "confidence {} outside (0, 1]",
                self.confidence
            )));
        }
        if self.category.is_empty() {
            return Err(FrameError::Format("empty category label".into()));
        }
        self.mask.validate(pixel_count)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub instances: Vec<PredictionInstance>,
}

impl PredictionSet {
    pub fn read(path: &Path) -> Result<Self, FrameError> {
        let bytes = std::fs::read(path).map_err(|e| FrameError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| FrameError::json(path, e))
    }
}

/// A fully decoded frame ready for opinion construction.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: u64,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub depth: DepthImage,
    pub predictions: Vec<PredictionInstance>,
    pub rgb: Option<PathBuf>,
}

impl Frame {
    pub fn validate(&self) -> Result<(), FrameError> {
        if self.depth.width != self.intrinsics.width || self.depth.height != self.intrinsics.height {
            return Err(FrameError::Format(format!(
                "depth image is {}x{} but intrinsics say {}x{}",
                self.depth.width, self.depth.height, self.intrinsics.width, self.intrinsics.height
            )));
        }
        let n = self.intrinsics.pixel_count();
        self.predictions.iter().try_for_each(|p| p.validate(n))
    }
}

pub fn load_frame(record: &FrameRecord) -> Result<Frame, FrameError> {
    let depth = DepthImage::read(&record.depth)?;
    let predictions = PredictionSet::read(&record.predictions)?.instances;
    let frame = Frame {
        frame_id: record.frame_id,
        intrinsics: record.intrinsics,
        pose: record.pose,
        depth,
        predictions,
        rgb: record.rgb.clone(),
    };
    frame.validate().map_err(|e| e.in_file(&record.predictions))?;
    Ok(frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub id: String,
    pub category: String,
    pub voxels: Vec<VoxelKey>,
}

/// Ground-truth instances voxelized at map resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub voxel_size: f64,
    pub instances: Vec<GroundTruthInstance>,
}

impl GroundTruthScene {
    pub fn validate(&self) -> Result<(), FrameError> {
        if !(self.voxel_size > 0.0) {
            return Err(FrameError::GroundTruth(format!("voxel_size {}", self.voxel_size)));
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(FrameError::GroundTruth(format!("duplicate id {:?}", inst.id)));
            }
            if inst.voxels.is_empty() {
                return Err(FrameError::GroundTruth(format!("instance {:?} has no voxels", inst.id)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FrameError> {
        let bytes = std::fs::read(path).map_err(|e| FrameError::io(path, e))?;
        let gt: Self = serde_json::from_slice(&bytes).map_err(|e| FrameError::json(path, e))?;
        gt.validate().map_err(|e| e.in_file(path))?;
        Ok(gt)
    }

    pub fn write(&self, path: &Path) -> Result<(), FrameError> {
        let bytes = serde_json::to_vec(self).map_err(|e| FrameError::json(path, e))?;
        std::fs::write(path, bytes).map_err(|e| FrameError::io(path, e))
    }
}
