//! Deterministic synthetic RGB-D sequences of box-shaped objects in a room.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{
    BinaryMask, CameraIntrinsics, DepthImage, Frame, FrameError, GroundTruthInstance, GroundTruthScene, ManifestLine,
    Pose, PoseRecord, PredictionInstance, PredictionSet, RgbImage, Rle,
};
use crate::map::VoxelKey;
use crate::uncertainty::label_color;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a])
    }

    fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] && other.max[a] <= self.max[a])
    }

    fn contains_point(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| self.min[a] < p[a] && p[a] < self.max[a])
    }

    /// Entry and exit ray parameters, if the ray meets the box.
    fn slab(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Voxels whose cells intersect the box surface.
    pub fn surface_voxels(&self, voxel_size: f64) -> Vec<VoxelKey> {
        let lo: Vec<i32> = self.min.iter().map(|v| (v / voxel_size).floor() as i32).collect();
        let hi: Vec<i32> = self.max.iter().map(|v| (v / voxel_size).floor() as i32).collect();
        let mut out = Vec::new();
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let shell = i == lo[0] || i == hi[0] || j == lo[1] || j == hi[1] || k == lo[2] || k == hi[2];
                    if shell {
                        out.push(VoxelKey::new(i, j, k));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: String,
    pub category: String,
    #[serde(flatten)]
    pub bounds: Aabb,
    /// Fraction of frames in which this object is reported as `mislabel_as`.
    #[serde(default)]
    pub mislabel_rate: f64,
    #[serde(default)]
    pub mislabel_as: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub mask_dilation_px: u32,
    pub depth_sigma: f64,
    /// Probability that a prediction carries a random other scene category.
    pub misclassification_rate: f64,
    /// Range of reported confidences.
    pub confidence: [f64; 2],
    /// Objects covering fewer pixels are not reported.
    pub min_mask_pixels: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            mask_dilation_px: 0,
            depth_sigma: 0.0,
            misclassification_rate: 0.0,
            confidence: [0.7, 0.95],
            min_mask_pixels: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Orbit {
    pub center: [f64; 3],
    pub radius: f64,
    /// Camera height above `center`.
    pub height: f64,
    pub frames: usize,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Orbit(Orbit),
    Poses(Vec<PoseRecord>),
}

fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 525.0,
        fy: 525.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
        depth_scale: 0.001,
    }
}

fn default_true() -> bool {
    true
}

fn default_voxel() -> f64 {
    0.02
}

/// Scene description as read from a JSON spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: Aabb,
    pub objects: Vec<SceneObject>,
    pub trajectory: Trajectory,
    #[serde(default = "default_intrinsics")]
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Resolution of the ground-truth voxelization.
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
    #[serde(default = "default_true")]
    pub write_rgb: bool,
}

/// A validated scene with its trajectory expanded into poses.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub poses: Vec<Pose>,
}

impl SceneSpec {
    pub fn read(path: &Path) -> Result<Self, SynthError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| SynthError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn resolve(self) -> Result<SyntheticScene, SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if !self.room.is_valid() {
            return bad("room bounds are empty".into());
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !o.bounds.is_valid() || !self.room.contains_box(&o.bounds) {
                return bad(format!("object {:?} is empty or outside the room", o.id));
            }
            if !ids.insert(o.id.as_str()) {
                return bad(format!("duplicate object id {:?}", o.id));
            }
            if o.category.is_empty() || !(0.0..=1.0).contains(&o.mislabel_rate) {
                return bad(format!("object {:?} has an invalid label setup", o.id));
            }
            if o.mislabel_rate > 0.0 && o.mislabel_as.is_none() {
                return bad(format!("object {:?} sets mislabel_rate without mislabel_as", o.id));
            }
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.misclassification_rate)
            || !(n.depth_sigma >= 0.0)
            || !(0.0 < n.confidence[0] && n.confidence[0] <= n.confidence[1] && n.confidence[1] <= 1.0)
        {
            return bad(format!("noise spec {n:?}"));
        }
        if !(self.voxel_size > 0.0) {
            return bad(format!("voxel_size {}", self.voxel_size));
        }
        self.intrinsics.validate()?;
        let poses = match &self.trajectory {
            Trajectory::Orbit(o) => {
                if o.frames == 0 || !(o.radius > 0.0) {
                    return bad("orbit needs frames > 0 and radius > 0".into());
                }
                let c = Vector3::from(o.center);
                (0..o.frames)
                    .map(|k| {
                        let theta = o.phase + std::f64::consts::TAU * k as f64 / o.frames as f64;
                        let eye = c + Vector3::new(o.radius * theta.cos(), o.radius * theta.sin(), o.height);
                        Pose::look_at(eye, c, Vector3::z())
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
            Trajectory::Poses(list) => list
                .iter()
                .map(|p| Pose::from_row_major(p.rotation, p.translation))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if poses.is_empty() {
            return bad("trajectory is empty".into());
        }
        for p in &poses {
            if !self.room.contains_point(&Point3::from(p.translation)) {
                return bad(format!("camera at {:?} is outside the room", p.translation));
            }
        }
        Ok(SyntheticScene { spec: self, poses })
    }
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> GroundTruthScene {
        GroundTruthScene {
            voxel_size: self.spec.voxel_size,
            instances: self
                .spec
                .objects
                .iter()
                .map(|o| GroundTruthInstance {
                    id: o.id.clone(),
                    category: o.category.clone(),
                    voxels: o.bounds.surface_voxels(self.spec.voxel_size),
                })
                .collect(),
        }
    }

    fn categories(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.spec.objects.iter().map(|o| o.category.as_str()).collect();
        set.into_iter().collect()
    }

    /// Renders frame `index` with its own random stream derived from `seed`.
    pub fn render(&self, index: usize, seed: u64) -> SyntheticFrame {
        let spec = &self.spec;
        let intr = spec.intrinsics;
        let pose = self.poses[index];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);

        let (w, h) = (intr.width as usize, intr.height as usize);
        let origin = Point3::from(pose.translation);
        let mut depth = vec![0u16; w * h];
        // Index into objects, or usize::MAX for the room shell.
        let mut owner = vec![usize::MAX; w * h];
        let mut rgb = spec.write_rgb.then(|| RgbImage::new(intr.width, intr.height));
        let noise = (spec.noise.depth_sigma > 0.0).then(|| Normal::new(0.0, spec.noise.depth_sigma).expect("sigma ≥ 0"));

        for v in 0..h {
            for u in 0..w {
                let dir_cam = Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
                let dir = pose.rotation * dir_cam;
                let mut best_t = f64::INFINITY;
                let mut best = usize::MAX;
                for (i, o) in spec.objects.iter().enumerate() {
                    if let Some((t0, _)) = o.bounds.slab(&origin, &dir) {
                        if t0 > 0.0 && t0 < best_t {
                            best_t = t0;
                            best = i;
                        }
                    }
                }
                let mut face_axis = 3;
                if best == usize::MAX {
                    if let Some((_, t1)) = spec.room.slab(&origin, &dir) {
                        best_t = t1;
                        let hit = origin + dir * t1;
                        face_axis = (0..3)
                            .min_by(|&a, &b| {
                                let da = (hit[a] - spec.room.min[a]).abs().min((hit[a] - spec.room.max[a]).abs());
                                let db = (hit[b] - spec.room.min[b]).abs().min((hit[b] - spec.room.max[b]).abs());
                                da.total_cmp(&db)
                            })
                            .unwrap_or(2);
                    }
                }
                if !best_t.is_finite() {
                    continue;
                }
                let z = best_t + noise.map_or(0.0, |n| n.sample(&mut rng));
                let raw = (z / intr.depth_scale).round();
                let idx = v * w + u;
                depth[idx] = if raw >= 1.0 && raw <= u16::MAX as f64 { raw as u16 } else { 0 };
                owner[idx] = best;
                if let Some(img) = rgb.as_mut() {
                    let color = if best == usize::MAX {
                        [[150, 140, 130], [130, 125, 120], [110, 105, 100], [0, 0, 0]][face_axis]
                    } else {
                        label_color(best as u32 + 1)
                    };
                    img.put(idx, color);
                }
            }
        }

        let categories = self.categories();
        let mut predictions = Vec::new();
        for (i, o) in spec.objects.iter().enumerate() {
            let mut mask = BinaryMask::new(intr.width, intr.height);
            for (idx, &who) in owner.iter().enumerate() {
                mask.bits[idx] = who == i && depth[idx] != 0;
            }
            if mask.count_ones() < spec.noise.min_mask_pixels.max(1) {
                continue;
            }
            if spec.noise.mask_dilation_px > 0 {
                mask = dilate(&mask, spec.noise.mask_dilation_px);
            }
            let mut category = o.category.clone();
            if o.mislabel_rate > 0.0 && rng.random_bool(o.mislabel_rate) {
                category = o.mislabel_as.clone().expect("validated");
            } else if spec.noise.misclassification_rate > 0.0 && rng.random_bool(spec.noise.misclassification_rate) {
                let others: Vec<&&str> = categories.iter().filter(|c| **c != o.category).collect();
                if !others.is_empty() {
                    category = others[rng.random_range(0..others.len())].to_string();
                }
            }
            let [lo, hi] = spec.noise.confidence;
            let confidence = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            predictions.push(PredictionInstance {
                category,
                confidence,
                mask: Rle::encode(&mask),
            });
        }

        SyntheticFrame {
            frame: Frame {
                frame_id: index as u64,
                intrinsics: intr,
                pose,
                depth: DepthImage::new(intr.width, intr.height, depth).expect("sized by construction"),
                predictions,
                rgb: None,
            },
            rgb,
        }
    }
}

/// Square dilation by `r` pixels.
fn dilate(mask: &BinaryMask, r: u32) -> BinaryMask {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let r = r as i64;
    let mut rows = BinaryMask::new(mask.width, mask.height);
    for v in 0..h {
        for u in 0..w {
            if mask.bits[(v * w + u) as usize] {
                for x in (u - r).max(0)..=(u + r).min(w - 1) {
                    rows.bits[(v * w + x) as usize] = true;
                }
            }
        }
    }
    let mut out = BinaryMask::new(mask.width, mask.height);
    for v in 0..h {
        for u in 0..w {
            if rows.bits[(v * w + u) as usize] {
                for y in (v - r).max(0)..=(v + r).min(h - 1) {
                    out.bits[(y * w + u) as usize] = true;
                }
            }
        }
    }
    out
}

pub struct SyntheticFrame {
    pub frame: Frame,
    pub rgb: Option<RgbImage>,
}

/// Writes the scene as a dataset directory: `manifest.jsonl`, `depth/`,
/// `predictions/`, optionally `rgb/`, and `ground_truth.json`.
pub fn generate_synthetic(scene: &SyntheticScene, seed: u64, out: &Path) -> Result<(), SynthError> {
    for sub in ["depth", "predictions"].into_iter().chain(scene.spec.write_rgb.then_some("rgb")) {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let manifest_path = out.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    for index in 0..scene.poses.len() {
        let sf = scene.render(index, seed);
        let f = &sf.frame;
        let name = format!("{index:06}");
        let depth_rel = format!("depth/{name}.pgm");
        f.depth.write(&out.join(&depth_rel))?;
        let pred_rel = format!("predictions/{name}.json");
        let pred_path = out.join(&pred_rel);
        let set = PredictionSet {
            instances: f.predictions.clone(),
        };
        std::fs::write(&pred_path, serde_json::to_vec(&set).expect("serializable")).map_err(io_err(&pred_path))?;
        let rgb_rel = match &sf.rgb {
            Some(img) => {
                let rel = format!("rgb/{name}.ppm");
                img.write(&out.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let line = ManifestLine {
            frame_id: f.frame_id,
            depth: depth_rel,
            predictions: pred_rel,
            rgb: rgb_rel,
            pose: PoseRecord::from(&f.pose),
            intrinsics: f.intrinsics,
        };
        serde_json::to_writer(&mut manifest, &line).expect("serializable");
        manifest.write_all(b"\n").map_err(io_err(&manifest_path))?;
    }
    manifest.flush().map_err(io_err(&manifest_path))?;
    scene.ground_truth().write(&out.join("ground_truth.json"))?;
    Ok(())
}
