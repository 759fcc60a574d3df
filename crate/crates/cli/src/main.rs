use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use voxeland::config::Config;
use voxeland::disambiguation::{disambiguate_all, ArgmaxClient, DecisionClient, HttpClient, MockClient};
use voxeland::eval::evaluate;
use voxeland::frame::GroundTruthScene;
use voxeland::fusion::TimingSummary;
use voxeland::map::MapState;
use voxeland::pipeline::{build_to_dir, write_atomic, MAP_FILE};
use voxeland::synth::{generate_synthetic, SceneSpec};
use voxeland::uncertainty::{
    geometric_entropy_map, instance_cloud, layer_cloud, ply_string, semantic_cloud, semantic_entropy_map,
    sidecar_path,
};

#[derive(Parser)]
#[command(name = "voxeland", version, about = "Instance-aware semantic voxel mapping with evidential uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a map from a dataset directory.
    Build {
        #[arg(long)]
        dataset: PathBuf,
        /// TOML config; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a map snapshot against ground truth.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `timing.json` from `build`, copied into the report.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Render a synthetic dataset from a scene description.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolve flagged instances with a decision service.
    Disambiguate {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_enum)]
        client: ClientKind,
        /// Scripted responses for the mock client.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Updated snapshot; defaults to overwriting `--snapshot`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to `disambiguation.json` next to the output snapshot.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write one layer of a snapshot as a colored point cloud.
    Export {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_enum)]
        layer: Layer,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientKind {
    Mock,
    Http,
    /// Picks the most probable candidate.
    Argmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layer {
    Instances,
    Semantics,
    GeomEntropy,
    SemEntropy,
}

/// Deletes the listed paths on drop unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Cleanup {
    /// Tracks `paths` that do not exist yet.
    fn new<I: IntoIterator<Item = PathBuf>>(paths: I) -> Self {
        Self(paths.into_iter().filter(|p| !p.exists()).collect())
    }

    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else {
                std::fs::remove_file(p)
            };
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn build(dataset: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let output = build_to_dir(dataset, &cfg, out).with_context(|| format!("building from {}", dataset.display()))?;
    let flagged = output.declarations.iter().filter(|d| d.flagged).count();
    println!(
        "{} frames, {} voxels, {} instances ({flagged} flagged for disambiguation)",
        output.map.frames_integrated(),
        output.map.cell_count(),
        output.map.instance_count() - 1
    );
    println!("{}", output.timings.summary());
    println!("wrote {}", out.join(MAP_FILE).display());
    Ok(())
}

fn eval(snapshot: &Path, gt: &Path, out: &Path, config: Option<&Path>, timing: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let map = MapState::load(snapshot)?;
    let gt = GroundTruthScene::read(gt)?;
    let mut report = evaluate(&map, &gt, &cfg.eval())?;
    if let Some(t) = timing {
        let bytes = std::fs::read(t).with_context(|| format!("reading {}", t.display()))?;
        let summary: TimingSummary = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", t.display()))?;
        report.timing = Some(summary);
    }
    for (class, ap) in &report.per_class_ap {
        println!("{class:<20} AP {ap:.4}");
    }
    println!("mAP {:.4}", report.map_score);
    write_atomic(out, &serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<()> {
    let scene = SceneSpec::read(spec)?.resolve()?;
    let guard = if out.exists() {
        Cleanup::new(
            ["manifest.jsonl", "depth", "predictions", "rgb", "ground_truth.json"]
                .into_iter()
                .map(|n| out.join(n)),
        )
    } else {
        Cleanup::new([out.to_path_buf()])
    };
    generate_synthetic(&scene, seed, out)?;
    guard.disarm();
    println!("wrote {} frames to {}", scene.poses.len(), out.display());
    Ok(())
}

fn disambiguate(
    snapshot: &Path,
    kind: ClientKind,
    fixtures: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let mut map = MapState::load(snapshot)?;
    let client: Box<dyn DecisionClient> = match kind {
        ClientKind::Mock => {
            let Some(f) = fixtures else { bail!("--client mock needs --fixtures") };
            Box::new(MockClient::load(f)?)
        }
        ClientKind::Http => Box::new(HttpClient::new(cfg.http_client())?),
        ClientKind::Argmax => Box::new(ArgmaxClient),
    };
    // Archived views are recorded relative to the build directory.
    let view_root = snapshot.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let report = disambiguate_all(&mut map, client.as_ref(), &cfg.disambiguation(), Some(view_root));

    for d in &report.decisions {
        info!("instance {}: {}", d.instance_id.0, d.chosen_label);
    }
    for (kind, failures) in [
        ("skipped", &report.skipped),
        ("unparsed", &report.parse_failures),
        ("client error", &report.client_failures),
    ] {
        for f in failures {
            eprintln!("instance {} {kind}: {}", f.instance_id.0, f.message);
        }
    }
    println!(
        "{} decided, {} skipped, {} unparsed, {} client errors",
        report.decisions.len(),
        report.skipped.len(),
        report.parse_failures.len(),
        report.client_failures.len()
    );

    let out = out.unwrap_or(snapshot);
    let report_path = match report_path {
        Some(p) => p.to_path_buf(),
        None => out.with_file_name("disambiguation.json"),
    };
    let guard = Cleanup::new([report_path.clone()]);
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(out, &map.to_json_bytes())?;
    guard.disarm();
    if !report.client_failures.is_empty() && report.decisions.is_empty() {
        bail!("every request to the decision service failed");
    }
    Ok(())
}

fn export(snapshot: &Path, layer: Layer, out: &Path) -> Result<()> {
    let map = MapState::load(snapshot)?;
    let vs = map.voxel_size();
    let (cloud, sidecar) = match layer {
        Layer::Instances => (instance_cloud(&map), None),
        Layer::Semantics => (semantic_cloud(&map), None),
        Layer::GeomEntropy | Layer::SemEntropy => {
            let l = match layer {
                Layer::GeomEntropy => geometric_entropy_map(&map),
                _ => semantic_entropy_map(&map),
            };
            (layer_cloud(&l), Some(serde_json::to_vec_pretty(&l)?))
        }
    };
    let guard = Cleanup::new([out.to_path_buf()]);
    write_atomic(out, ply_string(&cloud, vs).as_bytes())?;
    if let Some(bytes) = sidecar {
        write_atomic(&sidecar_path(out), &bytes)?;
    }
    guard.disarm();
    println!("wrote {} voxels to {}", cloud.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build { dataset, config, out } => build(&dataset, config.as_deref(), &out),
        Command::Eval {
            snapshot,
            gt,
            out,
            config,
            timing,
        } => eval(&snapshot, &gt, &out, config.as_deref(), timing.as_deref()),
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Disambiguate {
            snapshot,
            client,
            fixtures,
            config,
            out,
            report,
        } => disambiguate(&snapshot, client, fixtures.as_deref(), config.as_deref(), out.as_deref(), report.as_deref()),
        Command::Export { snapshot, layer, out } => export(&snapshot, layer, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
