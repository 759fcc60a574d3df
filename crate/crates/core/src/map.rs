//! Sparse voxel-hashed map: per-voxel occupancy log-odds and instance
//! evidence, the instance registry and the category registry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::Point3;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::evidence::{CategoricalDistribution, EvidenceError, EvidenceVector};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("instance {0} is not registered")]
    UnregisteredInstance(InstanceId),
    #[error("category {0} is not registered")]
    UnregisteredCategory(CategoryId),
    #[error("evidence count must be at least 1")]
    ZeroCount,
    #[error("non-finite point ({0}, {1}, {2})")]
    NonFinitePoint(f64, f64, f64),
    #[error("semantic evidence cannot be added to the unknown instance")]
    SemanticOnUnknown,
    #[error("the unknown instance cannot be merged")]
    MergeUnknown,
    #[error("invalid voxel size {0}")]
    InvalidVoxelSize(f64),
    #[error("map audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("{path}: {message}")]
    Snapshot { path: String, message: String },
}

/// Integer grid coordinates of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 3]", into = "[i32; 3]")]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl From<[i32; 3]> for VoxelKey {
    fn from(a: [i32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<VoxelKey> for [i32; 3] {
    fn from(k: VoxelKey) -> Self {
        [k.i, k.j, k.k]
    }
}

impl VoxelKey {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    /// Center of the voxel in world coordinates.
    pub fn center(&self, voxel_size: f64) -> Point3<f64> {
        Point3::new(
            (self.i as f64 + 0.5) * voxel_size,
            (self.j as f64 + 0.5) * voxel_size,
            (self.k as f64 + 0.5) * voxel_size,
        )
    }

    #[inline]
    pub(crate) fn from_point_unchecked(p: &Point3<f64>, inv_size: f64) -> Self {
        Self::new(
            (p.x * inv_size).floor() as i32,
            (p.y * inv_size).floor() as i32,
            (p.z * inv_size).floor() as i32,
        )
    }
}

/// Componentwise floor of `point / voxel_size`.
pub fn world_to_key(point: &Point3<f64>, voxel_size: f64) -> Result<VoxelKey, MapError> {
    if !(point.x.is_finite() && point.y.is_finite() && point.z.is_finite()) {
        return Err(MapError::NonFinitePoint(point.x, point.y, point.z));
    }
    Ok(VoxelKey::new(
        (point.x / voxel_size).floor() as i32,
        (point.y / voxel_size).floor() as i32,
        (point.z / voxel_size).floor() as i32,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl InstanceId {
    /// Reserved instance absorbing observed but unrecognized geometry.
    pub const UNKNOWN: InstanceId = InstanceId(0);

    pub fn is_unknown(self) -> bool {
        self == Self::UNKNOWN
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl CategoryId {
    pub const UNKNOWN: CategoryId = CategoryId(0);
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const UNKNOWN_LABEL: &str = "unknown";

/// Binary Bayes filter parameters in probability space plus log-odds clamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyParams {
    pub p_hit: f64,
    pub p_miss: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self {
            p_hit: 0.7,
            p_miss: 0.4,
            l_min: -2.0,
            l_max: 3.5,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl OccupancyParams {
    pub fn l_hit(&self) -> f64 {
        logit(self.p_hit)
    }

    pub fn l_miss(&self) -> f64 {
        logit(self.p_miss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyObservation {
    Hit,
    Miss,
}

/// One voxel: occupancy log-odds and integer point counts per instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoxelCell {
    pub log_odds: f64,
    #[serde(rename = "alpha")]
    counts: SmallVec<[(InstanceId, u32); 2]>,
}

impl VoxelCell {
    /// Applies one hit or miss and clamps the result.
    pub fn update_occupancy(&mut self, obs: OccupancyObservation, params: &OccupancyParams) {
        let delta = match obs {
            OccupancyObservation::Hit => params.l_hit(),
            OccupancyObservation::Miss => params.l_miss(),
        };
        self.log_odds = (self.log_odds + delta).clamp(params.l_min, params.l_max);
    }

    pub fn occupancy_probability(&self) -> f64 {
        1.0 / (1.0 + (-self.log_odds).exp())
    }

    pub fn count(&self, id: InstanceId) -> u32 {
        self.counts
            .binary_search_by(|e| e.0.cmp(&id))
            .map(|pos| self.counts[pos].1)
            .unwrap_or(0)
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.counts.binary_search_by(|e| e.0.cmp(&id)).is_ok()
    }

    /// `(instance, count)` pairs in ascending instance order.
    pub fn instance_counts(&self) -> impl Iterator<Item = (InstanceId, u32)> + '_ {
        self.counts.iter().copied()
    }

    pub fn has_evidence(&self) -> bool {
        !self.counts.is_empty()
    }

    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|e| e.1 as u64).sum()
    }

    /// The instance evidence as a generic evidence vector.
    pub fn instance_evidence(&self) -> EvidenceVector<InstanceId> {
        // Counts are positive by construction.
        EvidenceVector::try_from_pairs(self.counts.iter().map(|&(k, c)| (k, c as f64)))
            .expect("voxel counts are positive")
    }

    pub fn instance_distribution(&self) -> Result<CategoricalDistribution<InstanceId>, EvidenceError> {
        self.instance_evidence().probabilities()
    }

    /// Instance with the largest count; ties go to the lower id.
    pub fn argmax_instance(&self) -> Option<InstanceId> {
        let mut best: Option<(InstanceId, u32)> = None;
        for &(k, c) in &self.counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((k, c));
            }
        }
        best.map(|b| b.0)
    }

    /// Adds `count` for `id`; returns true when `id` was not yet present.
    pub(crate) fn add_count(&mut self, id: InstanceId, count: u32) -> bool {
        match self.counts.binary_search_by(|e| e.0.cmp(&id)) {
            Ok(pos) => {
                self.counts[pos].1 += count;
                false
            }
            Err(pos) => {
                self.counts.insert(pos, (id, count));
                true
            }
        }
    }

    pub(crate) fn remove(&mut self, id: InstanceId) -> Option<u32> {
        self.counts
            .binary_search_by(|e| e.0.cmp(&id))
            .ok()
            .map(|pos| self.counts.remove(pos).1)
    }

    fn is_well_formed(&self) -> bool {
        self.counts.iter().all(|e| e.1 > 0) && self.counts.windows(2).all(|w| w[0].0 < w[1].0)
    }
}

/// A semantic observation integrated into an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub frame_id: u64,
    pub category: CategoryId,
    pub confidence: f64,
    pub pixel_bbox: [u32; 4],
    /// Archived image crop for this observation, when view archiving is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub category_evidence: EvidenceVector<CategoryId>,
    /// Number of voxels holding positive evidence for this instance.
    pub voxel_count: u64,
    pub observations: Vec<ObservationRecord>,
    pub final_category: Option<CategoryId>,
    #[serde(default)]
    pub needs_disambiguation: bool,
}

impl InstanceRecord {
    fn new(id: InstanceId) -> Self {
        Self {
            id,
            category_evidence: EvidenceVector::new(),
            voxel_count: 0,
            observations: Vec::new(),
            final_category: None,
            needs_disambiguation: false,
        }
    }

    pub fn category_distribution(&self) -> Result<CategoricalDistribution<CategoryId>, EvidenceError> {
        self.category_evidence.probabilities()
    }

    /// Most probable category and its probability.
    pub fn top_category(&self) -> Option<(CategoryId, f64)> {
        self.category_distribution().ok()?.argmax()
    }
}

/// The volumetric map together with its instance and category registries.
#[derive(Debug, Clone, PartialEq)]
pub struct MapState {
    voxel_size: f64,
    occupancy: OccupancyParams,
    cells: FxHashMap<VoxelKey, VoxelCell>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
    categories: Vec<String>,
    frames_integrated: u64,
    next_instance_id: u32,
}

impl MapState {
    pub fn new(voxel_size: f64, occupancy: OccupancyParams) -> Result<Self, MapError> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(MapError::InvalidVoxelSize(voxel_size));
        }
        let mut instances = BTreeMap::new();
        instances.insert(InstanceId::UNKNOWN, InstanceRecord::new(InstanceId::UNKNOWN));
        Ok(Self {
            voxel_size,
            occupancy,
            cells: FxHashMap::default(),
            instances,
            categories: vec![UNKNOWN_LABEL.to_string()],
            frames_integrated: 0,
            next_instance_id: 1,
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn occupancy_params(&self) -> &OccupancyParams {
        &self.occupancy
    }

    pub fn key_of(&self, point: &Point3<f64>) -> Result<VoxelKey, MapError> {
        world_to_key(point, self.voxel_size)
    }

    pub fn frames_integrated(&self) -> u64 {
        self.frames_integrated
    }

    pub(crate) fn increment_frames(&mut self) -> u64 {
        self.frames_integrated += 1;
        self.frames_integrated
    }

    pub fn cell(&self, key: &VoxelKey) -> Option<&VoxelCell> {
        self.cells.get(key)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelCell)> {
        self.cells.iter()
    }

    /// Cells in ascending key order.
    pub fn sorted_cells(&self) -> Vec<(&VoxelKey, &VoxelCell)> {
        let mut v: Vec<_> = self.cells.iter().collect();
        v.sort_unstable_by_key(|(k, _)| **k);
        v
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn instance(&self, id: InstanceId) -> Option<&InstanceRecord> {
        self.instances.get(&id)
    }

    pub(crate) fn instance_mut(&mut self, id: InstanceId) -> Option<&mut InstanceRecord> {
        self.instances.get_mut(&id)
    }

    /// Registered instances in ascending id order, including the unknown one.
    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Id the next spawned instance will receive.
    pub fn peek_next_instance_id(&self) -> InstanceId {
        InstanceId(self.next_instance_id)
    }

    pub fn spawn_instance(&mut self) -> InstanceId {
        let id = InstanceId(self.next_instance_id);
        self.next_instance_id += 1;
        self.instances.insert(id, InstanceRecord::new(id));
        id
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_label(&self, id: CategoryId) -> Option<&str> {
        self.categories.get(id.0 as usize).map(String::as_str)
    }

    pub fn category_id(&self, label: &str) -> Option<CategoryId> {
        self.categories
            .iter()
            .position(|c| c == label)
            .map(|p| CategoryId(p as u32))
    }

    /// Returns the id of `label`, extending the category set when new.
    pub fn intern_category(&mut self, label: &str) -> CategoryId {
        if let Some(id) = self.category_id(label) {
            return id;
        }
        self.categories.push(label.to_string());
        CategoryId(self.categories.len() as u32 - 1)
    }

    /// Applies one occupancy observation, creating the cell when missing.
    pub fn update_occupancy(&mut self, key: VoxelKey, obs: OccupancyObservation) {
        let params = self.occupancy;
        self.cells.entry(key).or_default().update_occupancy(obs, &params);
    }

    /// Applies one occupancy observation only when the cell already exists.
    pub(crate) fn update_existing_occupancy(&mut self, key: &VoxelKey, obs: OccupancyObservation) {
        let params = self.occupancy;
        if let Some(cell) = self.cells.get_mut(key) {
            cell.update_occupancy(obs, &params);
        }
    }

    /// Adds `count` registered points of `instance` to the voxel at `key`.
    pub fn add_instance_evidence(
        &mut self,
        key: VoxelKey,
        instance: InstanceId,
        count: u32,
    ) -> Result<(), MapError> {
        if count == 0 {
            return Err(MapError::ZeroCount);
        }
        let record = self
            .instances
            .get_mut(&instance)
            .ok_or(MapError::UnregisteredInstance(instance))?;
        if self.cells.entry(key).or_default().add_count(instance, count) {
            record.voxel_count += 1;
        }
        Ok(())
    }

    pub fn voxel_instance_distribution(
        &self,
        key: &VoxelKey,
    ) -> Result<CategoricalDistribution<InstanceId>, MapError> {
        let cell = self.cells.get(key).ok_or(EvidenceError::NoEvidence)?;
        Ok(cell.instance_distribution()?)
    }

    /// Adds `confidence` to the category evidence of `instance`.
    pub fn add_semantic_evidence(
        &mut self,
        instance: InstanceId,
        category: CategoryId,
        confidence: f64,
    ) -> Result<(), MapError> {
        if instance.is_unknown() {
            return Err(MapError::SemanticOnUnknown);
        }
        if category.0 as usize >= self.categories.len() {
            return Err(MapError::UnregisteredCategory(category));
        }
        let record = self
            .instances
            .get_mut(&instance)
            .ok_or(MapError::UnregisteredInstance(instance))?;
        record.category_evidence.add(category, confidence)?;
        Ok(())
    }

    /// Folds `retire` into `keep`: voxel counts and category evidence are
    /// summed, observation logs concatenated, and `retire` is unregistered.
    pub fn merge_instances(&mut self, keep: InstanceId, retire: InstanceId) -> Result<(), MapError> {
        if keep.is_unknown() || retire.is_unknown() {
            return Err(MapError::MergeUnknown);
        }
        if !self.instances.contains_key(&keep) {
            return Err(MapError::UnregisteredInstance(keep));
        }
        let retired = self
            .instances
            .remove(&retire)
            .ok_or(MapError::UnregisteredInstance(retire))?;
        let mut gained = 0u64;
        for cell in self.cells.values_mut() {
            if let Some(c) = cell.remove(retire) {
                if cell.add_count(keep, c) {
                    gained += 1;
                }
            }
        }
        let target = self.instances.get_mut(&keep).expect("checked above");
        target.voxel_count += gained;
        for (cat, mass) in retired.category_evidence.iter() {
            target.category_evidence.add(cat, mass)?;
        }
        target.observations.extend(retired.observations);
        Ok(())
    }

    /// Recomputes per-instance voxel counts and registry membership from
    /// scratch and compares them with the maintained state.
    pub fn audit(&self) -> Result<(), MapError> {
        let mut counts: BTreeMap<InstanceId, u64> = BTreeMap::new();
        for (key, cell) in &self.cells {
            if !cell.is_well_formed() {
                return Err(MapError::Audit(format!("cell {key:?} is malformed")));
            }
            if !(cell.log_odds >= self.occupancy.l_min && cell.log_odds <= self.occupancy.l_max) {
                return Err(MapError::Audit(format!("cell {key:?} log-odds out of range")));
            }
            for (id, _) in cell.instance_counts() {
                if !self.instances.contains_key(&id) {
                    return Err(MapError::Audit(format!("cell {key:?} references instance {id}")));
                }
                *counts.entry(id).or_default() += 1;
            }
        }
        for (id, record) in &self.instances {
            let actual = counts.get(id).copied().unwrap_or(0);
            if actual != record.voxel_count {
                return Err(MapError::Audit(format!(
                    "instance {id} voxel_count {} but {actual} voxels hold evidence",
                    record.voxel_count
                )));
            }
            if id.0 >= self.next_instance_id && !id.is_unknown() {
                return Err(MapError::Audit(format!("instance {id} beyond id counter")));
            }
            for (cat, _) in record.category_evidence.iter() {
                if cat.0 as usize >= self.categories.len() {
                    return Err(MapError::Audit(format!("instance {id} references category {cat}")));
                }
            }
            if id.is_unknown() && (!record.category_evidence.is_empty() || record.final_category.is_some()) {
                return Err(MapError::Audit("unknown instance carries category evidence".into()));
            }
        }
        if !self.instances.contains_key(&InstanceId::UNKNOWN) {
            return Err(MapError::Audit("unknown instance missing".into()));
        }
        if self.categories.first().map(String::as_str) != Some(UNKNOWN_LABEL) {
            return Err(MapError::Audit("category 0 must be the unknown label".into()));
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            voxel_size: self.voxel_size,
            occupancy: self.occupancy,
            frames_integrated: self.frames_integrated,
            next_instance_id: self.next_instance_id,
            categories: self.categories.clone(),
            instances: self.instances.values().cloned().collect(),
            cells: self
                .sorted_cells()
                .into_iter()
                .map(|(k, c)| CellRecord {
                    key: *k,
                    cell: c.clone(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(s: MapSnapshot) -> Result<Self, MapError> {
        let bad = |message: String| MapError::Snapshot {
            path: String::new(),
            message,
        };
        if s.format != SNAPSHOT_FORMAT || s.version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported snapshot {} v{}", s.format, s.version)));
        }
        let mut map = MapState::new(s.voxel_size, s.occupancy)?;
        map.frames_integrated = s.frames_integrated;
        map.next_instance_id = s.next_instance_id;
        map.categories = s.categories;
        map.instances = BTreeMap::new();
        for inst in s.instances {
            if map.instances.insert(inst.id, inst).is_some() {
                return Err(bad("duplicate instance id".into()));
            }
        }
        let n = s.cells.len();
        map.cells.reserve(n);
        for rec in s.cells {
            if map.cells.insert(rec.key, rec.cell).is_some() {
                return Err(bad("duplicate voxel key".into()));
            }
        }
        map.audit()?;
        Ok(map)
    }

    /// Deterministic JSON encoding: cells sorted by key, instances by id.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_snapshot()).expect("snapshot serialization cannot fail")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, MapError> {
        let snap: MapSnapshot = serde_json::from_slice(bytes).map_err(|e| MapError::Snapshot {
            path: String::new(),
            message: e.to_string(),
        })?;
        Self::from_snapshot(snap)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        std::fs::write(path, self.to_json_bytes()).map_err(|e| MapError::Snapshot {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let bytes = std::fs::read(path).map_err(|e| MapError::Snapshot {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_bytes(&bytes).map_err(|e| match e {
            MapError::Snapshot { message, .. } => MapError::Snapshot {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

const SNAPSHOT_FORMAT: &str = "voxeland-map";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: VoxelKey,
    #[serde(flatten)]
    pub cell: VoxelCell,
}

/// Serialized map document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub format: String,
    pub version: u32,
    pub voxel_size: f64,
    pub occupancy: OccupancyParams,
    pub frames_integrated: u64,
    pub next_instance_id: u32,
    pub categories: Vec<String>,
    pub instances: Vec<InstanceRecord>,
    pub cells: Vec<CellRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn map() -> MapState {
        MapState::new(0.02, OccupancyParams::default()).unwrap()
    }

    #[test]
    fn world_to_key_floor_semantics() {
        assert_eq!(
            world_to_key(&Point3::new(0.03, -0.01, 0.0), 0.02).unwrap(),
            VoxelKey::new(1, -1, 0)
        );
        assert_eq!(world_to_key(&Point3::origin(), 0.02).unwrap(), VoxelKey::new(0, 0, 0));
        assert_eq!(
            world_to_key(&Point3::new(0.02, 0.02, 0.02), 0.02).unwrap(),
            VoxelKey::new(1, 1, 1)
        );
        assert!(world_to_key(&Point3::new(f64::NAN, 0.0, 0.0), 0.02).is_err());
    }

    #[test]
    fn occupancy_hit_and_miss() {
        let params = OccupancyParams::default();
        let mut cell = VoxelCell::default();
        cell.update_occupancy(OccupancyObservation::Hit, &params);
        assert_abs_diff_eq!(cell.log_odds, (0.7f64 / 0.3).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(cell.log_odds, 0.8473, epsilon = 1e-4);
        assert_abs_diff_eq!(cell.occupancy_probability(), 0.7, epsilon = 1e-12);

        let mut cell = VoxelCell::default();
        cell.update_occupancy(OccupancyObservation::Miss, &params);
        assert_abs_diff_eq!(cell.log_odds, -0.4055, epsilon = 1e-4);
        assert_abs_diff_eq!(cell.occupancy_probability(), 0.4, epsilon = 1e-12);

        let mut cell = VoxelCell {
            log_odds: params.l_max,
            ..Default::default()
        };
        cell.update_occupancy(OccupancyObservation::Hit, &params);
        assert_eq!(cell.log_odds, params.l_max);
    }

    #[test]
    fn instance_evidence_accumulates() {
        let mut m = map();
        let k2 = m.spawn_instance();
        let k7 = m.spawn_instance();
        let key = VoxelKey::new(0, 0, 0);
        m.add_instance_evidence(key, k2, 5).unwrap();
        assert_eq!(m.cell(&key).unwrap().count(k2), 5);
        m.add_instance_evidence(key, k2, 3).unwrap();
        assert_eq!(m.cell(&key).unwrap().count(k2), 8);
        assert_eq!(m.instance(k2).unwrap().voxel_count, 1);

        let key = VoxelKey::new(4, 0, 0);
        m.add_instance_evidence(key, k2, 5).unwrap();
        m.add_instance_evidence(key, k7, 1).unwrap();
        let p = m.voxel_instance_distribution(&key).unwrap();
        assert_abs_diff_eq!(p.get(k7), 1.0 / 6.0, epsilon = 1e-15);
        assert_eq!(m.instance(k7).unwrap().voxel_count, 1);
    }

    #[test]
    fn instance_evidence_errors() {
        let mut m = map();
        let key = VoxelKey::new(0, 0, 0);
        assert!(matches!(
            m.add_instance_evidence(key, InstanceId(9), 1),
            Err(MapError::UnregisteredInstance(_))
        ));
        assert!(matches!(
            m.add_instance_evidence(key, InstanceId::UNKNOWN, 0),
            Err(MapError::ZeroCount)
        ));
        assert!(m.voxel_instance_distribution(&key).is_err());
    }

    #[test]
    fn voxel_distribution_examples() {
        let mut m = map();
        let a = m.spawn_instance();
        let b = m.spawn_instance();
        let c = m.spawn_instance();
        let k0 = VoxelKey::new(0, 0, 0);
        m.add_instance_evidence(k0, b, 3).unwrap();
        m.add_instance_evidence(k0, InstanceId::UNKNOWN, 1).unwrap();
        let p = m.voxel_instance_distribution(&k0).unwrap();
        assert_eq!((p.get(b), p.get(InstanceId::UNKNOWN)), (0.75, 0.25));

        let k1 = VoxelKey::new(1, 0, 0);
        m.add_instance_evidence(k1, InstanceId::UNKNOWN, 4).unwrap();
        assert_eq!(m.voxel_instance_distribution(&k1).unwrap().get(InstanceId::UNKNOWN), 1.0);

        let k2 = VoxelKey::new(2, 0, 0);
        m.add_instance_evidence(k2, a, 1).unwrap();
        m.add_instance_evidence(k2, b, 1).unwrap();
        m.add_instance_evidence(k2, c, 2).unwrap();
        let p = m.voxel_instance_distribution(&k2).unwrap();
        assert_eq!((p.get(a), p.get(b), p.get(c)), (0.25, 0.25, 0.5));
        m.audit().unwrap();
    }

    #[test]
    fn semantic_evidence_rules() {
        let mut m = map();
        let k = m.spawn_instance();
        let chair = m.intern_category("chair");
        assert_eq!(m.intern_category("chair"), chair);
        assert_eq!(m.category_id(UNKNOWN_LABEL), Some(CategoryId::UNKNOWN));
        m.add_semantic_evidence(k, chair, 0.9).unwrap();
        assert!(matches!(
            m.add_semantic_evidence(InstanceId::UNKNOWN, chair, 0.9),
            Err(MapError::SemanticOnUnknown)
        ));
        assert!(m.add_semantic_evidence(k, CategoryId(42), 0.9).is_err());
    }

    #[test]
    fn merge_sums_evidence() {
        let mut m = map();
        let a = m.spawn_instance();
        let b = m.spawn_instance();
        let chair = m.intern_category("chair");
        let table = m.intern_category("table");
        m.add_instance_evidence(VoxelKey::new(0, 0, 0), a, 2).unwrap();
        m.add_instance_evidence(VoxelKey::new(0, 0, 0), b, 3).unwrap();
        m.add_instance_evidence(VoxelKey::new(1, 0, 0), b, 4).unwrap();
        m.add_semantic_evidence(a, chair, 0.5).unwrap();
        m.add_semantic_evidence(b, chair, 0.25).unwrap();
        m.add_semantic_evidence(b, table, 0.5).unwrap();
        m.merge_instances(a, b).unwrap();
        assert!(m.instance(b).is_none());
        let rec = m.instance(a).unwrap();
        assert_eq!(rec.voxel_count, 2);
        assert_eq!(rec.category_evidence.get(chair), 0.75);
        assert_eq!(rec.category_evidence.get(table), 0.5);
        assert_eq!(m.cell(&VoxelKey::new(0, 0, 0)).unwrap().count(a), 5);
        m.audit().unwrap();
        assert!(matches!(m.merge_instances(InstanceId::UNKNOWN, a), Err(MapError::MergeUnknown)));
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut m = map();
        let a = m.spawn_instance();
        let chair = m.intern_category("chair");
        m.add_instance_evidence(VoxelKey::new(-3, 2, 9), a, 7).unwrap();
        m.add_instance_evidence(VoxelKey::new(-3, 2, 9), InstanceId::UNKNOWN, 1).unwrap();
        m.update_occupancy(VoxelKey::new(-3, 2, 9), OccupancyObservation::Hit);
        m.add_semantic_evidence(a, chair, 0.123_456_789_012_345_6).unwrap();
        m.instance_mut(a).unwrap().observations.push(ObservationRecord {
            frame_id: 4,
            category: chair,
            confidence: 0.123_456_789_012_345_6,
            pixel_bbox: [1, 2, 3, 4],
            view: Some("views/4_0.ppm".into()),
        });
        let bytes = m.to_json_bytes();
        let back = MapState::from_json_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json_bytes(), bytes);
    }

    #[test]
    fn snapshot_rejects_inconsistent_counts() {
        let mut m = map();
        let a = m.spawn_instance();
        m.add_instance_evidence(VoxelKey::new(0, 0, 0), a, 1).unwrap();
        let mut snap = m.to_snapshot();
        snap.instances[1].voxel_count = 5;
        assert!(MapState::from_snapshot(snap).is_err());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add(i32, u32, u32),
        Spawn,
        Merge(u32, u32),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            6 => (0i32..6, 0u32..6, 1u32..5).prop_map(|(k, i, c)| Op::Add(k, i, c)),
            2 => Just(Op::Spawn),
            1 => (1u32..6, 1u32..6).prop_map(|(a, b)| Op::Merge(a, b)),
        ]
    }

    proptest! {
        #[test]
        fn registry_audit_holds(ops in prop::collection::vec(op(), 0..80)) {
            let mut m = map();
            for op in ops {
                match op {
                    Op::Add(k, i, c) => {
                        let _ = m.add_instance_evidence(VoxelKey::new(k, 0, 0), InstanceId(i), c);
                    }
                    Op::Spawn => {
                        m.spawn_instance();
                    }
                    Op::Merge(a, b) if a < b => {
                        let _ = m.merge_instances(InstanceId(a), InstanceId(b));
                    }
                    Op::Merge(..) => {}
                }
                prop_assert!(m.audit().is_ok());
            }
        }

        #[test]
        fn occupancy_order_independent(hits in 0usize..3, misses in 0usize..3, seed in any::<u64>()) {
            // Small multisets stay inside the clamp range.
            let params = OccupancyParams::default();
            let mut obs: Vec<_> = std::iter::repeat_n(OccupancyObservation::Hit, hits)
                .chain(std::iter::repeat_n(OccupancyObservation::Miss, misses))
                .collect();
            let apply = |obs: &[OccupancyObservation]| {
                let mut c = VoxelCell::default();
                for o in obs {
                    c.update_occupancy(*o, &params);
                }
                c.log_odds
            };
            let forward = apply(&obs);
            let n = obs.len();
            if n > 1 {
                obs.swap(seed as usize % n, (seed >> 8) as usize % n);
            }
            obs.reverse();
            // Float addition is commutative but not associative; allow rounding.
            prop_assert!((apply(&obs) - forward).abs() < 1e-12);
        }

        #[test]
        fn sparse_expansion_matches_dense(
            counts in prop::collection::vec(0u32..20, 1..8),
            new_count in 1u32..20,
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let mut m = map();
            let ids: Vec<_> = counts.iter().map(|_| m.spawn_instance()).collect();
            let key = VoxelKey::new(0, 0, 0);
            for (&id, &c) in ids.iter().zip(&counts) {
                if c > 0 {
                    m.add_instance_evidence(key, id, c).unwrap();
                }
            }
            let fresh = m.spawn_instance();
            m.add_instance_evidence(key, fresh, new_count).unwrap();
            // Dense reference: the extended vector with explicit zeros.
            let mut dense: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            dense.push(new_count as f64);
            let total: f64 = dense.iter().sum();
            let p = m.voxel_instance_distribution(&key).unwrap();
            for (id, want) in ids.iter().chain(std::iter::once(&fresh)).zip(dense) {
                prop_assert!((p.get(*id) - want / total).abs() < 1e-15);
            }
        }
    }
}
