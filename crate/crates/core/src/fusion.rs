//! Data association, evidential integration and periodic instance merging.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::Point3;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::map::{
    InstanceId, MapError, MapState, ObservationRecord, OccupancyObservation, OccupancyParams, VoxelKey,
};
use crate::opinion::{build_opinions, ClusteringParams, OpinionError, OpinionLabel, SubjectiveOpinion};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Opinion(#[from] OpinionError),
    #[error("invalid association config: {0}")]
    InvalidConfig(String),
    #[error("semantic evidence requires a semantic opinion")]
    NotSemantic,
}

/// Thresholds for opinion-to-instance and instance-to-instance matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub tau_iou: f64,
    pub tau_ios: f64,
    /// Instances are merged among themselves every this many frames.
    pub refine_every: u64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            tau_iou: 0.4,
            tau_ios: 0.7,
            refine_every: 30,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let unit = |t: f64| t > 0.0 && t <= 1.0;
        if unit(self.tau_iou) && unit(self.tau_ios) && self.refine_every >= 1 {
            Ok(())
        } else {
            Err(FusionError::InvalidConfig(format!("{self:?}")))
        }
    }

    fn passes(&self, iou: f64, ios: f64) -> bool {
        iou >= self.tau_iou || ios >= self.tau_ios
    }
}

/// Intersection over union where the opinion is measured in points and the
/// instance in voxels. Zero when the denominator vanishes.
pub fn iou_from_counts(intersection: u64, opinion_size: u64, instance_size: u64) -> f64 {
    let denom = (opinion_size + instance_size) as f64 - intersection as f64;
    if denom <= 0.0 {
        0.0
    } else {
        intersection as f64 / denom
    }
}

/// Intersection over the smaller of the two sizes.
pub fn ios_from_counts(intersection: u64, opinion_size: u64, instance_size: u64) -> f64 {
    let smaller = opinion_size.min(instance_size);
    if smaller == 0 {
        0.0
    } else {
        intersection as f64 / smaller as f64
    }
}

/// Opinion points grouped by map voxel, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelHistogram {
    bins: Vec<(VoxelKey, u32)>,
    points: u64,
}

impl VoxelHistogram {
    pub fn from_points(points: &[Point3<f64>], voxel_size: f64) -> Self {
        let inv = 1.0 / voxel_size;
        let mut counts: FxHashMap<VoxelKey, u32> = FxHashMap::default();
        for p in points {
            *counts.entry(VoxelKey::from_point_unchecked(p, inv)).or_default() += 1;
        }
        let mut bins: Vec<_> = counts.into_iter().collect();
        bins.sort_unstable_by_key(|b| b.0);
        Self {
            bins,
            points: points.len() as u64,
        }
    }

    pub fn bins(&self) -> &[(VoxelKey, u32)] {
        &self.bins
    }

    pub fn point_count(&self) -> u64 {
        self.points
    }

    /// Points falling in voxels where each instance holds evidence.
    fn intersections(&self, map: &MapState) -> BTreeMap<InstanceId, u64> {
        let mut out = BTreeMap::new();
        for (key, n) in &self.bins {
            if let Some(cell) = map.cell(key) {
                for (id, _) in cell.instance_counts() {
                    *out.entry(id).or_default() += *n as u64;
                }
            }
        }
        out
    }

    fn intersection_with(&self, map: &MapState, id: InstanceId) -> u64 {
        self.bins
            .iter()
            .filter(|(key, _)| map.cell(key).is_some_and(|c| c.contains(id)))
            .map(|(_, n)| *n as u64)
            .sum()
    }
}

/// Number of opinion points lying in voxels where `instance` has evidence.
pub fn intersection_count(opinion: &SubjectiveOpinion, instance: InstanceId, map: &MapState) -> u64 {
    VoxelHistogram::from_points(&opinion.points, map.voxel_size()).intersection_with(map, instance)
}

fn instance_size(map: &MapState, instance: InstanceId) -> u64 {
    map.instance(instance).map_or(0, |r| r.voxel_count)
}

pub fn iou(opinion: &SubjectiveOpinion, instance: InstanceId, map: &MapState) -> f64 {
    iou_from_counts(
        intersection_count(opinion, instance, map),
        opinion.len() as u64,
        instance_size(map, instance),
    )
}

pub fn ios(opinion: &SubjectiveOpinion, instance: InstanceId, map: &MapState) -> f64 {
    ios_from_counts(
        intersection_count(opinion, instance, map),
        opinion.len() as u64,
        instance_size(map, instance),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub opinion: usize,
    pub instance: InstanceId,
    pub iou: f64,
    pub ios: f64,
}

/// How one frame's opinions map onto map instances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationOutcome {
    pub matches: Vec<Match>,
    /// `(opinion index, id the new instance receives)`.
    pub spawned: Vec<(usize, InstanceId)>,
}

impl AssociationOutcome {
    /// Instance each opinion is assigned to, in opinion order.
    pub fn assignments(&self, n: usize) -> Vec<InstanceId> {
        let mut out = vec![InstanceId::UNKNOWN; n];
        for m in &self.matches {
            out[m.opinion] = m.instance;
        }
        for &(j, id) in &self.spawned {
            out[j] = id;
        }
        out
    }
}

/// Associates opinions against the current map without mutating it.
///
/// The unknown opinion always goes to the unknown instance. A semantic
/// opinion matches the passing instance with the highest IoU (then IoS, then
/// lowest id); otherwise it is marked for spawning, with ids assigned in
/// opinion order starting at [`MapState::peek_next_instance_id`].
pub fn associate(opinions: &[SubjectiveOpinion], map: &MapState, cfg: &AssociationConfig) -> AssociationOutcome {
    let hists: Vec<_> = opinions
        .iter()
        .map(|o| VoxelHistogram::from_points(&o.points, map.voxel_size()))
        .collect();
    associate_histograms(opinions, &hists, map, cfg)
}

fn associate_histograms(
    opinions: &[SubjectiveOpinion],
    hists: &[VoxelHistogram],
    map: &MapState,
    cfg: &AssociationConfig,
) -> AssociationOutcome {
    let mut outcome = AssociationOutcome::default();
    let mut next = map.peek_next_instance_id().0;
    for (j, (op, hist)) in opinions.iter().zip(hists).enumerate() {
        let n = hist.point_count();
        if op.is_unknown() {
            let inter = hist.intersection_with(map, InstanceId::UNKNOWN);
            let size = instance_size(map, InstanceId::UNKNOWN);
            outcome.matches.push(Match {
                opinion: j,
                instance: InstanceId::UNKNOWN,
                iou: iou_from_counts(inter, n, size),
                ios: ios_from_counts(inter, n, size),
            });
            continue;
        }
        let mut best: Option<Match> = None;
        for (id, inter) in hist.intersections(map) {
            if id.is_unknown() {
                continue;
            }
            let size = instance_size(map, id);
            let (iou, ios) = (iou_from_counts(inter, n, size), ios_from_counts(inter, n, size));
            if !cfg.passes(iou, ios) {
                continue;
            }
            // Ids iterate ascending, so strict comparison keeps the lowest on ties.
            let better = best
                .as_ref()
                .is_none_or(|b| iou > b.iou || (iou == b.iou && ios > b.ios));
            if better {
                best = Some(Match {
                    opinion: j,
                    instance: id,
                    iou,
                    ios,
                });
            }
        }
        match best {
            Some(m) => outcome.matches.push(m),
            None => {
                outcome.spawned.push((j, InstanceId(next)));
                next += 1;
            }
        }
    }
    outcome
}

/// Adds the opinion's per-voxel point counts to `instance`. Returns the
/// voxels touched; occupancy is updated separately, once per frame.
pub fn integrate_geometric(
    opinion: &SubjectiveOpinion,
    instance: InstanceId,
    map: &mut MapState,
) -> Result<Vec<VoxelKey>, MapError> {
    let hist = VoxelHistogram::from_points(&opinion.points, map.voxel_size());
    integrate_histogram(&hist, instance, map)
}

fn integrate_histogram(hist: &VoxelHistogram, instance: InstanceId, map: &mut MapState) -> Result<Vec<VoxelKey>, MapError> {
    for &(key, n) in hist.bins() {
        map.add_instance_evidence(key, instance, n)?;
    }
    Ok(hist.bins().iter().map(|b| b.0).collect())
}

/// Adds the opinion's confidence to the instance's category evidence and
/// logs the observation. Returns the index of the new observation.
pub fn integrate_semantic(
    opinion: &SubjectiveOpinion,
    instance: InstanceId,
    map: &mut MapState,
) -> Result<usize, FusionError> {
    let OpinionLabel::Semantic { category, confidence } = &opinion.label else {
        return Err(FusionError::NotSemantic);
    };
    if instance.is_unknown() {
        return Err(MapError::SemanticOnUnknown.into());
    }
    if map.instance(instance).is_none() {
        return Err(MapError::UnregisteredInstance(instance).into());
    }
    let cat = map.intern_category(category);
    map.add_semantic_evidence(instance, cat, *confidence)?;
    let record = map.instance_mut(instance).expect("checked above");
    record.observations.push(ObservationRecord {
        frame_id: opinion.source_frame,
        category: cat,
        confidence: *confidence,
        pixel_bbox: opinion.pixel_bbox.unwrap_or_default(),
        view: None,
    });
    Ok(record.observations.len() - 1)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// `(kept, retired)` in the order the merges were applied.
    pub merges: Vec<(InstanceId, InstanceId)>,
    pub rounds: usize,
}

/// Shared voxel counts for every pair of non-unknown instances that overlap.
fn pairwise_overlaps(map: &MapState) -> BTreeMap<(InstanceId, InstanceId), u64> {
    let mut shared = BTreeMap::new();
    for (_, cell) in map.cells() {
        if cell.support_size() < 2 {
            continue;
        }
        let ids: smallvec::SmallVec<[InstanceId; 4]> =
            cell.instance_counts().map(|e| e.0).filter(|id| !id.is_unknown()).collect();
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                *shared.entry((ids[a], ids[b])).or_default() += 1;
            }
        }
    }
    shared
}

fn find(parent: &mut BTreeMap<InstanceId, InstanceId>, x: InstanceId) -> InstanceId {
    let mut root = x;
    while let Some(&p) = parent.get(&root) {
        if p == root {
            break;
        }
        root = p;
    }
    let mut cur = x;
    while cur != root {
        let next = parent[&cur];
        parent.insert(cur, root);
        cur = next;
    }
    root
}

/// Merges map instances whose voxel footprints pass the association
/// thresholds, until no pair passes. The older (smaller) id survives.
pub fn refine(map: &mut MapState, cfg: &AssociationConfig) -> Result<MergeReport, MapError> {
    let mut report = MergeReport::default();
    loop {
        let mut parent: BTreeMap<InstanceId, InstanceId> = BTreeMap::new();
        for ((a, b), shared) in pairwise_overlaps(map) {
            let sa = instance_size(map, a);
            let sb = instance_size(map, b);
            if cfg.passes(iou_from_counts(shared, sa, sb), ios_from_counts(shared, sa, sb)) {
                parent.entry(a).or_insert(a);
                parent.entry(b).or_insert(b);
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    let (keep, child) = if ra < rb { (ra, rb) } else { (rb, ra) };
                    parent.insert(child, keep);
                }
            }
        }
        if parent.is_empty() {
            break;
        }
        report.rounds += 1;
        let ids: Vec<InstanceId> = parent.keys().copied().collect();
        for id in ids {
            let root = find(&mut parent, id);
            if root != id {
                map.merge_instances(root, id)?;
                report.merges.push((root, id));
            }
        }
    }
    Ok(report)
}

/// Everything that shapes map construction from frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub voxel_size: f64,
    pub occupancy: OccupancyParams,
    pub clustering: ClusteringParams,
    pub max_range: f64,
    pub association: AssociationConfig,
    /// Apply occupancy misses along sampled camera rays.
    pub carve_free_space: bool,
    /// Pixel stride of the carving rays.
    pub carve_stride: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let voxel_size = 0.02;
        Self {
            voxel_size,
            occupancy: OccupancyParams::default(),
            clustering: ClusteringParams::for_map_voxel(voxel_size),
            max_range: 4.0,
            association: AssociationConfig::default(),
            carve_free_space: false,
            carve_stride: 8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        self.association.validate()?;
        self.clustering.validate()?;
        if !(self.max_range > 0.0) || self.carve_stride == 0 {
            return Err(FusionError::InvalidConfig(format!(
                "max_range {} carve_stride {}",
                self.max_range, self.carve_stride
            )));
        }
        Ok(())
    }
}

/// Wall-clock time spent per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageDurations {
    pub opinions_generation: Duration,
    pub data_association: Duration,
    pub map_integration: Duration,
    /// `None` when refinement did not run for this frame.
    pub map_refinement: Option<Duration>,
}

#[derive(Debug, Clone, Default)]
pub struct FrameReport {
    pub frame_id: u64,
    pub outcome: AssociationOutcome,
    /// `(instance, observation index)` of each semantic observation logged.
    pub observations: Vec<(InstanceId, usize)>,
    pub refinement: Option<MergeReport>,
    pub timing: StageDurations,
}

/// Integrates already-built opinions of one frame into the map.
pub fn integrate_frame(
    map: &mut MapState,
    cfg: &FusionConfig,
    frame_id: u64,
    camera_origin: Point3<f64>,
    opinions: &[SubjectiveOpinion],
) -> Result<FrameReport, FusionError> {
    let mut report = FrameReport {
        frame_id,
        ..Default::default()
    };

    let t = Instant::now();
    let hists: Vec<_> = opinions
        .iter()
        .map(|o| VoxelHistogram::from_points(&o.points, map.voxel_size()))
        .collect();
    let outcome = associate_histograms(opinions, &hists, map, &cfg.association);
    report.timing.data_association = t.elapsed();

    let t = Instant::now();
    let assignments = outcome.assignments(opinions.len());
    for &(_, expected) in &outcome.spawned {
        let id = map.spawn_instance();
        debug_assert_eq!(id, expected);
    }
    let mut touched: FxHashSet<VoxelKey> = FxHashSet::default();
    for (j, (op, hist)) in opinions.iter().zip(&hists).enumerate() {
        let id = assignments[j];
        touched.extend(integrate_histogram(hist, id, map)?);
        if !op.is_unknown() {
            let obs = integrate_semantic(op, id, map)?;
            report.observations.push((id, obs));
        }
    }
    let mut touched: Vec<VoxelKey> = touched.into_iter().collect();
    touched.sort_unstable();
    for key in &touched {
        map.update_occupancy(*key, OccupancyObservation::Hit);
    }
    if cfg.carve_free_space {
        carve(map, cfg, camera_origin, opinions, &touched);
    }
    report.outcome = outcome;
    report.timing.map_integration = t.elapsed();

    if map.increment_frames().is_multiple_of(cfg.association.refine_every) {
        let t = Instant::now();
        report.refinement = Some(refine(map, &cfg.association)?);
        report.timing.map_refinement = Some(t.elapsed());
    }
    Ok(report)
}

/// Builds opinions for `frame` and integrates them.
pub fn process_frame(frame: &Frame, map: &mut MapState, cfg: &FusionConfig) -> Result<FrameReport, FusionError> {
    let t = Instant::now();
    let opinions = build_opinions(frame, &cfg.clustering, cfg.max_range);
    let generation = t.elapsed();
    let origin = Point3::from(frame.pose.translation);
    let mut report = integrate_frame(map, cfg, frame.frame_id, origin, &opinions)?;
    report.timing.opinions_generation = generation;
    Ok(report)
}

/// Applies one miss per existing voxel crossed by sampled rays from the
/// camera to observed points, skipping voxels hit in this frame.
fn carve(
    map: &mut MapState,
    cfg: &FusionConfig,
    origin: Point3<f64>,
    opinions: &[SubjectiveOpinion],
    hit: &[VoxelKey],
) {
    let mut missed: FxHashSet<VoxelKey> = FxHashSet::default();
    for op in opinions {
        for (p, &px) in op.points.iter().zip(&op.pixels) {
            if !(px as usize).is_multiple_of(cfg.carve_stride) {
                continue;
            }
            traverse_ray(&origin, p, map.voxel_size(), |k| {
                missed.insert(k);
            });
        }
    }
    let mut missed: Vec<_> = missed.into_iter().filter(|k| hit.binary_search(k).is_err()).collect();
    missed.sort_unstable();
    for key in missed {
        map.update_existing_occupancy(&key, OccupancyObservation::Miss);
    }
}

/// Visits voxels crossed by the segment `from → to`, excluding the voxel
/// containing `to` (3D DDA).
pub(crate) fn traverse_ray(from: &Point3<f64>, to: &Point3<f64>, voxel_size: f64, mut visit: impl FnMut(VoxelKey)) {
    let inv = 1.0 / voxel_size;
    let start = VoxelKey::from_point_unchecked(from, inv);
    let end = VoxelKey::from_point_unchecked(to, inv);
    let dir = to - from;
    let mut cur = [start.i, start.j, start.k];
    let target = [end.i, end.j, end.k];
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let d = dir[a];
        if d > 0.0 {
            step[a] = 1;
            t_max[a] = ((cur[a] + 1) as f64 * voxel_size - from[a]) / d;
            t_delta[a] = voxel_size / d;
        } else if d < 0.0 {
            step[a] = -1;
            t_max[a] = (cur[a] as f64 * voxel_size - from[a]) / d;
            t_delta[a] = -voxel_size / d;
        }
    }
    let max_steps = target.iter().zip(&cur).map(|(t, c)| (t - c).unsigned_abs()).sum::<u32>() + 3;
    for _ in 0..max_steps {
        if cur == target {
            return;
        }
        visit(VoxelKey::new(cur[0], cur[1], cur[2]));
        let a = if t_max[0] < t_max[1] {
            if t_max[0] < t_max[2] { 0 } else { 2 }
        } else if t_max[1] < t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > 1.0 {
            return;
        }
        cur[a] += step[a];
        t_max[a] += t_delta[a];
    }
}

/// Accumulated stage times over a run, in the categories the timing report
/// prints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub frames: u64,
    pub refinements: u64,
    pub opinions_generation_ms: f64,
    pub data_association_ms: f64,
    pub map_integration_ms: f64,
    pub map_refinement_ms: f64,
    /// End-to-end wall time of the run, which may be shorter than the sum of
    /// stages when opinion generation overlaps integration.
    pub wall_ms: f64,
}

impl StageTimings {
    pub fn record(&mut self, d: &StageDurations) {
        self.frames += 1;
        self.opinions_generation_ms += d.opinions_generation.as_secs_f64() * 1e3;
        self.data_association_ms += d.data_association.as_secs_f64() * 1e3;
        self.map_integration_ms += d.map_integration.as_secs_f64() * 1e3;
        if let Some(r) = d.map_refinement {
            self.refinements += 1;
            self.map_refinement_ms += r.as_secs_f64() * 1e3;
        }
    }

    /// Per-stage mean milliseconds. Refinement is averaged over the runs
    /// where it happened.
    pub fn summary(&self) -> TimingSummary {
        let per_frame = |ms: f64| if self.frames == 0 { 0.0 } else { ms / self.frames as f64 };
        TimingSummary {
            frames: self.frames,
            opinions_generation_ms: per_frame(self.opinions_generation_ms),
            data_association_ms: per_frame(self.data_association_ms),
            map_integration_ms: per_frame(self.map_integration_ms),
            map_refinement_ms: if self.refinements == 0 {
                0.0
            } else {
                self.map_refinement_ms / self.refinements as f64
            },
            refinements: self.refinements,
            frame_rate_hz: if self.wall_ms > 0.0 {
                self.frames as f64 / (self.wall_ms / 1e3)
            } else {
                0.0
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub frames: u64,
    pub opinions_generation_ms: f64,
    pub data_association_ms: f64,
    pub map_integration_ms: f64,
    pub map_refinement_ms: f64,
    pub refinements: u64,
    pub frame_rate_hz: f64,
}

impl std::fmt::Display for TimingSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Stage                  Mean time (ms)")?;
        writeln!(f, "Opinions generation    {:>10.2}", self.opinions_generation_ms)?;
        writeln!(f, "Data association       {:>10.2}", self.data_association_ms)?;
        writeln!(f, "Map integration        {:>10.2}", self.map_integration_ms)?;
        writeln!(
            f,
            "Map refinement         {:>10.2}  ({} runs)",
            self.map_refinement_ms, self.refinements
        )?;
        write!(f, "Frame-rate             {:>10.2} Hz over {} frames", self.frame_rate_hz, self.frames)
    }
}
