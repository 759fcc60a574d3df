//! Sequence-level map building and on-disk artifacts.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use nalgebra::Point3;
use thiserror::Error;

use crate::config::Config;
use crate::frame::{load_manifest, load_frame, Frame, FrameError, RgbImage};
use crate::fusion::{integrate_frame, FrameReport, FusionError, StageTimings};
use crate::map::{InstanceId, MapError, MapState};
use crate::opinion::{build_opinions, SubjectiveOpinion};
use crate::uncertainty::{
    declare_categories, export_layer, geometric_entropy_map, instance_cloud, semantic_cloud, semantic_entropy_map,
    write_ply, Declaration, UncertaintyError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub struct BuildOutput {
    pub map: MapState,
    pub timings: StageTimings,
    pub declarations: Vec<Declaration>,
    pub reports: Vec<FrameReport>,
}

struct Prepared {
    frame_id: u64,
    origin: Point3<f64>,
    opinions: Vec<SubjectiveOpinion>,
    rgb: Option<PathBuf>,
    generation: Duration,
}

/// Where archived observation crops go: `root/views/…`, recorded relative to
/// `root`.
#[derive(Debug, Clone, Copy)]
pub struct ViewStore<'a> {
    pub root: &'a Path,
}

impl ViewStore<'_> {
    pub const SUBDIR: &'static str = "views";

    /// Crops every observation of `frame_id` that has no view yet. Scans the
    /// registry rather than the frame report because refinement may already
    /// have moved the observations to a surviving instance.
    fn archive(&self, map: &mut MapState, frame_id: u64, rgb_path: &Path) -> Result<(), PipelineError> {
        let pending: Vec<(InstanceId, usize)> = map
            .instances()
            .flat_map(|r| {
                r.observations
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.frame_id == frame_id && o.view.is_none())
                    .map(move |(i, _)| (r.id, i))
            })
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let dir = self.root.join(Self::SUBDIR);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let rgb = RgbImage::read(rgb_path)?;
        for (id, obs) in pending {
            let record = map.instance_mut(id).expect("listed from the registry");
            let o = &mut record.observations[obs];
            let name = format!("f{frame_id:06}_i{}_o{obs}.ppm", id.0);
            rgb.crop(o.pixel_bbox).write(&dir.join(&name))?;
            o.view = Some(format!("{}/{name}", Self::SUBDIR));
        }
        Ok(())
    }
}

/// Builds a map from a frame sequence. Opinion generation runs on a worker
/// thread one frame ahead of association and integration.
pub fn build_sequence<I>(frames: I, cfg: &Config, views: Option<ViewStore<'_>>) -> Result<BuildOutput, PipelineError>
where
    I: Iterator<Item = Result<Frame, FrameError>> + Send,
{
    let fusion = cfg.fusion();
    fusion.validate()?;
    let mut map = MapState::new(cfg.voxel_size, fusion.occupancy)?;
    let mut timings = StageTimings::default();
    let mut reports = Vec::new();
    let start = Instant::now();

    std::thread::scope(|s| -> Result<(), PipelineError> {
        let (tx, rx) = mpsc::sync_channel::<Result<Prepared, FrameError>>(2);
        s.spawn(move || {
            for frame in frames {
                let prepared = frame.map(|f| {
                    let t = Instant::now();
                    let opinions = build_opinions(&f, &fusion.clustering, fusion.max_range);
                    Prepared {
                        frame_id: f.frame_id,
                        origin: Point3::from(f.pose.translation),
                        opinions,
                        rgb: f.rgb,
                        generation: t.elapsed(),
                    }
                });
                let failed = prepared.is_err();
                if tx.send(prepared).is_err() || failed {
                    break;
                }
            }
        });
        for prepared in rx {
            let p = prepared?;
            let mut report = integrate_frame(&mut map, &fusion, p.frame_id, p.origin, &p.opinions)?;
            report.timing.opinions_generation = p.generation;
            if let (Some(store), Some(rgb)) = (views, p.rgb.as_deref()) {
                store.archive(&mut map, p.frame_id, rgb)?;
            }
            timings.record(&report.timing);
            reports.push(report);
        }
        Ok(())
    })?;

    timings.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let declarations = declare_categories(&mut map, cfg.entropy_threshold);
    Ok(BuildOutput {
        map,
        timings,
        declarations,
        reports,
    })
}

/// Builds from a dataset directory containing `manifest.jsonl`.
pub fn build_dataset(dataset: &Path, cfg: &Config, views: Option<ViewStore<'_>>) -> Result<BuildOutput, PipelineError> {
    let records = load_manifest(&dataset.join("manifest.jsonl"))?;
    build_sequence(records.into_iter().map(|r| load_frame(&r)), cfg, views)
}

pub const MAP_FILE: &str = "map.json";

/// Removes everything it tracked unless disarmed.
struct Cleanup {
    dir: PathBuf,
    remove_dir: bool,
    files: Vec<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        if self.remove_dir {
            let _ = std::fs::remove_dir_all(&self.dir);
        } else {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
            let _ = std::fs::remove_dir_all(self.dir.join(ViewStore::SUBDIR));
        }
    }
}

/// `build` end to end: map snapshot, uncertainty layers, PLY exports,
/// declarations and timing in `out`. On failure nothing new is left behind.
pub fn build_to_dir(dataset: &Path, cfg: &Config, out: &Path) -> Result<BuildOutput, PipelineError> {
    let existed = out.exists();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut cleanup = Cleanup {
        dir: out.to_path_buf(),
        remove_dir: !existed,
        files: Vec::new(),
        armed: true,
    };
    let views = cfg.archive_views.then_some(ViewStore { root: out });
    let output = build_dataset(dataset, cfg, views)?;

    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), PipelineError> {
        let path = out.join(name);
        cleanup.files.push(path.clone());
        write_atomic(&path, &bytes)
    };
    put(MAP_FILE, output.map.to_json_bytes())?;
    put("declarations.json", serde_json::to_vec_pretty(&output.declarations).expect("serializable"))?;
    put("timing.json", serde_json::to_vec_pretty(&output.timings.summary()).expect("serializable"))?;
    let vs = output.map.voxel_size();
    for (name, layer) in [
        ("geom_entropy.ply", geometric_entropy_map(&output.map)),
        ("sem_entropy.ply", semantic_entropy_map(&output.map)),
    ] {
        let path = out.join(name);
        cleanup.files.push(path.clone());
        cleanup.files.push(crate::uncertainty::sidecar_path(&path));
        export_layer(&layer, vs, &path)?;
    }
    for (name, cloud) in [
        ("instances.ply", instance_cloud(&output.map)),
        ("semantics.ply", semantic_cloud(&output.map)),
    ] {
        let path = out.join(name);
        cleanup.files.push(path.clone());
        write_ply(&path, &cloud, vs)?;
    }
    cleanup.armed = false;
    Ok(output)
}
