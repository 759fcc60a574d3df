//! Geometric and semantic uncertainty layers, category declaration, and
//! point-cloud export of map layers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{CategoricalDistribution, EvidenceError};
use crate::map::{CategoryId, InstanceId, InstanceRecord, MapState, VoxelCell, VoxelKey};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("instance {0} is not classifiable")]
    NotClassifiable(InstanceId),
    #[error("voxel has no instance evidence")]
    NoEvidence,
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Expected entropy of the voxel's instance evidence.
pub fn geometric_entropy(cell: &VoxelCell) -> Result<f64, UncertaintyError> {
    if !cell.has_evidence() {
        return Err(UncertaintyError::NoEvidence);
    }
    Ok(crate::evidence::expected_entropy(cell.instance_counts().map(|(_, c)| c as f64))?)
}

/// Expected entropy of the instance's category evidence.
pub fn semantic_entropy(record: &InstanceRecord) -> Result<f64, UncertaintyError> {
    if record.id.is_unknown() || record.category_evidence.is_empty() {
        return Err(UncertaintyError::NotClassifiable(record.id));
    }
    Ok(record.category_evidence.expected_entropy()?)
}

/// Scale-free alternative: Shannon entropy of the normalized category
/// evidence.
pub fn semantic_shannon_entropy(record: &InstanceRecord) -> Result<f64, UncertaintyError> {
    if record.id.is_unknown() || record.category_evidence.is_empty() {
        return Err(UncertaintyError::NotClassifiable(record.id));
    }
    Ok(record.category_distribution()?.shannon_entropy())
}

/// Category distribution of each instance, with the unknown instance and
/// never-classified instances as a point mass on the unknown category.
fn instance_category_table(map: &MapState) -> BTreeMap<InstanceId, CategoricalDistribution<CategoryId>> {
    map.instances()
        .map(|r| {
            let dist = match r.category_distribution() {
                Ok(d) if !r.id.is_unknown() => d,
                _ => unknown_point_mass(),
            };
            (r.id, dist)
        })
        .collect()
}

fn unknown_point_mass() -> CategoricalDistribution<CategoryId> {
    CategoricalDistribution::from_pairs([(CategoryId::UNKNOWN, 1.0)]).expect("valid point mass")
}

fn mix(
    cell: &VoxelCell,
    table: &BTreeMap<InstanceId, CategoricalDistribution<CategoryId>>,
) -> Result<CategoricalDistribution<CategoryId>, UncertaintyError> {
    if !cell.has_evidence() {
        return Err(UncertaintyError::NoEvidence);
    }
    let weights = cell.instance_distribution()?;
    let unknown = unknown_point_mass();
    let mut pairs = Vec::new();
    for (id, w) in weights.iter() {
        let dist = table.get(&id).unwrap_or(&unknown);
        pairs.extend(dist.iter().map(|(c, p)| (c, w * p)));
    }
    Ok(CategoricalDistribution::from_pairs(pairs)?)
}

/// Per-voxel category distribution: each instance's category distribution
/// weighted by the voxel's instance probabilities.
pub fn voxel_category_distribution(
    cell: &VoxelCell,
    map: &MapState,
) -> Result<CategoricalDistribution<CategoryId>, UncertaintyError> {
    mix(cell, &instance_category_table(map))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Geometric,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyLayer {
    pub kind: LayerKind,
    #[serde(with = "key_map")]
    pub values: BTreeMap<VoxelKey, f64>,
    pub generated_at_frame: u64,
    /// Upper end of the color scale: ln of the largest support in the layer.
    pub h_max: f64,
}

mod key_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        key: VoxelKey,
        entropy: f64,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<VoxelKey, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter().map(|(&key, &entropy)| Entry { key, entropy }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<VoxelKey, f64>, D::Error> {
        let v: Vec<Entry> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.key, e.entropy)).collect())
    }
}

pub fn geometric_entropy_map(map: &MapState) -> UncertaintyLayer {
    let mut values = BTreeMap::new();
    let mut support = 1;
    for (key, cell) in map.cells() {
        if let Ok(h) = geometric_entropy(cell) {
            support = support.max(cell.support_size());
            values.insert(*key, h);
        }
    }
    UncertaintyLayer {
        kind: LayerKind::Geometric,
        values,
        generated_at_frame: map.frames_integrated(),
        h_max: (support as f64).ln(),
    }
}

pub fn semantic_entropy_map(map: &MapState) -> UncertaintyLayer {
    let table = instance_category_table(map);
    let mut values = BTreeMap::new();
    let mut support = 1;
    for (key, cell) in map.cells() {
        if let Ok(dist) = mix(cell, &table) {
            support = support.max(dist.support_size());
            values.insert(*key, dist.shannon_entropy());
        }
    }
    UncertaintyLayer {
        kind: LayerKind::Semantic,
        values,
        generated_at_frame: map.frames_integrated(),
        h_max: (support as f64).ln(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    pub instance: InstanceId,
    pub final_category: Option<CategoryId>,
    pub flagged: bool,
    /// `None` for never-classified instances.
    pub entropy: Option<f64>,
}

/// Assigns the argmax category to instances whose semantic entropy is below
/// `threshold` and flags the rest for disambiguation.
pub fn declare_categories(map: &mut MapState, threshold: f64) -> Vec<Declaration> {
    let decisions: Vec<Declaration> = map
        .instances()
        .filter(|r| !r.id.is_unknown())
        .map(|r| {
            let entropy = semantic_entropy(r).ok();
            match entropy {
                Some(h) if h < threshold => Declaration {
                    instance: r.id,
                    final_category: r.top_category().map(|c| c.0),
                    flagged: false,
                    entropy,
                },
                _ => Declaration {
                    instance: r.id,
                    final_category: None,
                    flagged: true,
                    entropy,
                },
            }
        })
        .collect();
    for d in &decisions {
        let record = map.instance_mut(d.instance).expect("declared from the registry");
        record.final_category = d.final_category;
        record.needs_disambiguation = d.flagged;
    }
    decisions
}

/// Blue at 0, red at `h_max`, through cyan, green and yellow.
pub fn entropy_color(h: f64, h_max: f64) -> [u8; 3] {
    let t = if h_max > 0.0 { (h / h_max).clamp(0.0, 1.0) } else { 0.0 };
    let ramp = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        ramp(4.0 * t - 2.0),
        ramp(if t < 0.5 { 4.0 * t } else { 4.0 - 4.0 * t }),
        ramp(2.0 - 4.0 * t),
    ]
}

/// A stable, well-spread color for an integer label. Zero is gray.
pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [128, 128, 128];
    }
    let hue = (label as f64 * 0.618_033_988_749_895).fract();
    let h6 = hue * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (55.0 + 200.0 * v).round() as u8;
    [c(r), c(g), c(b)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredVoxel {
    pub key: VoxelKey,
    pub color: [u8; 3],
}

pub fn layer_cloud(layer: &UncertaintyLayer) -> Vec<ColoredVoxel> {
    layer
        .values
        .iter()
        .map(|(&key, &h)| ColoredVoxel {
            key,
            color: entropy_color(h, layer.h_max),
        })
        .collect()
}

/// Voxels colored by their most likely instance.
pub fn instance_cloud(map: &MapState) -> Vec<ColoredVoxel> {
    map.sorted_cells()
        .into_iter()
        .filter_map(|(key, cell)| {
            cell.argmax_instance().map(|id| ColoredVoxel {
                key: *key,
                color: label_color(id.0),
            })
        })
        .collect()
}

/// Voxels colored by their most likely category.
pub fn semantic_cloud(map: &MapState) -> Vec<ColoredVoxel> {
    let table = instance_category_table(map);
    map.sorted_cells()
        .into_iter()
        .filter_map(|(key, cell)| {
            let (cat, _) = mix(cell, &table).ok()?.argmax()?;
            Some(ColoredVoxel {
                key: *key,
                color: label_color(cat.0),
            })
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), UncertaintyError> {
    let io = |source| UncertaintyError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// ASCII PLY of voxel centers with per-vertex color.
pub fn ply_string(voxels: &[ColoredVoxel], voxel_size: f64) -> String {
    let mut s = String::with_capacity(64 + voxels.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", voxels.len());
    s.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for v in voxels {
        let c = v.key.center(voxel_size);
        let _ = writeln!(
            s,
            "{:.5} {:.5} {:.5} {} {} {}",
            c.x, c.y, c.z, v.color[0], v.color[1], v.color[2]
        );
    }
    s
}

pub fn write_ply(path: &Path, voxels: &[ColoredVoxel], voxel_size: f64) -> Result<(), UncertaintyError> {
    write_file(path, ply_string(voxels, voxel_size).as_bytes())
}

/// Sidecar path holding the raw values of a layer exported to `ply_path`.
pub fn sidecar_path(ply_path: &Path) -> PathBuf {
    ply_path.with_extension("json")
}

/// Writes the layer as a colored PLY plus a JSON sidecar with raw entropies.
pub fn export_layer(layer: &UncertaintyLayer, voxel_size: f64, ply_path: &Path) -> Result<(), UncertaintyError> {
    write_ply(ply_path, &layer_cloud(layer), voxel_size)?;
    let json = serde_json::to_vec_pretty(layer).expect("layer serializes");
    write_file(&sidecar_path(ply_path), &json)
}
