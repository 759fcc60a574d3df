#![allow(dead_code)]

pub mod dbscan;

use voxeland::config::Config;
use voxeland::frame::CameraIntrinsics;
use voxeland::pipeline::{build_sequence, BuildOutput};
use voxeland::synth::{Aabb, NoiseSpec, Orbit, SceneObject, SceneSpec, SyntheticScene, Trajectory};

fn object(id: &str, category: &str, min: [f64; 3], max: [f64; 3]) -> SceneObject {
    SceneObject {
        id: id.into(),
        category: category.into(),
        bounds: Aabb { min, max },
        mislabel_rate: 0.0,
        mislabel_as: None,
    }
}

/// Five boxes of three categories on the floor of a 5 m room. Every face
/// sits on a voxel-center plane of the 2 cm grid.
pub fn desk_scene(frames: usize, width: u32, height: u32) -> SceneSpec {
    SceneSpec {
        room: Aabb {
            min: [-2.51, -2.51, 0.01],
            max: [2.51, 2.51, 2.51],
        },
        objects: vec![
            object("table_1", "table", [-0.79, -0.79, 0.01], [-0.31, -0.31, 0.51]),
            object("table_2", "table", [0.31, 0.31, 0.01], [0.79, 0.79, 0.51]),
            object("chair_1", "chair", [0.41, -0.71, 0.01], [0.71, -0.41, 0.61]),
            object("chair_2", "chair", [-0.71, 0.41, 0.01], [-0.41, 0.71, 0.61]),
            object("cabinet", "cabinet", [-0.15, -0.15, 0.01], [0.15, 0.15, 0.91]),
        ],
        trajectory: Trajectory::Orbit(Orbit {
            center: [0.0, 0.0, 0.3],
            radius: 1.8,
            height: 1.2,
            frames,
            phase: 0.1,
        }),
        intrinsics: CameraIntrinsics {
            fx: 525.0 * width as f64 / 640.0,
            fy: 525.0 * height as f64 / 480.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            depth_scale: 0.001,
        },
        noise: NoiseSpec::default(),
        voxel_size: 0.02,
        write_rgb: false,
    }
}

pub fn build_in_memory(scene: &SyntheticScene, seed: u64, cfg: &Config) -> BuildOutput {
    let frames = (0..scene.poses.len()).map(move |i| Ok(scene.render(i, seed).frame));
    build_sequence(frames, cfg, None).expect("build succeeds")
}

/// Digamma from its series ψ(x) = −γ + Σ_{n≥0} (1/(n+1) − 1/(n+x)), summed
/// to N terms with compensation, plus the Euler–Maclaurin tail of the
/// remainder. Independent of the library's recurrence + asymptotic method.
pub fn digamma_oracle(x: f64) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    const N: usize = 4000;
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for n in 0..N {
        let nf = n as f64;
        let term = 1.0 / (nf + 1.0) - 1.0 / (nf + x);
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    // Σ_{n≥N} f(n) with f(n) = 1/(n+1) − 1/(n+x):
    // ∫_N^∞ f + f(N)/2 − f'(N)/12 + f'''(N)/720.
    let (a, b) = (N as f64 + 1.0, N as f64 + x);
    let integral = (b / a).ln();
    let f = 1.0 / a - 1.0 / b;
    let f1 = -1.0 / (a * a) + 1.0 / (b * b);
    let f3 = -6.0 / a.powi(4) + 6.0 / b.powi(4);
    -EULER_GAMMA + sum + integral + f / 2.0 - f1 / 12.0 + f3 / 720.0
}

/// Expected entropy of a Dirichlet evidence vector evaluated with the oracle
/// digamma.
pub fn expected_entropy_oracle(alpha: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    digamma_oracle(s) - alpha.iter().map(|&a| a * digamma_oracle(a)).sum::<f64>() / s
}

use nalgebra::Point3;
use rand::Rng;
use voxeland::map::{InstanceId, MapState, OccupancyParams, VoxelKey};
use voxeland::opinion::{OpinionLabel, SubjectiveOpinion};

/// Unit-voxel map with `instances` instances scattered over a `grid`³ block,
/// each with random category evidence drawn from `categories`.
pub fn random_map(rng: &mut impl Rng, instances: u32, grid: i32, categories: &[&str]) -> MapState {
    let mut map = MapState::new(1.0, OccupancyParams::default()).unwrap();
    let ids: Vec<InstanceId> = (0..instances).map(|_| map.spawn_instance()).collect();
    for &id in &ids {
        for _ in 0..rng.random_range(1..=3) {
            let cat = map.intern_category(categories[rng.random_range(0..categories.len())]);
            map.add_semantic_evidence(id, cat, rng.random_range(0.05..1.0)).unwrap();
        }
    }
    let cells = rng.random_range(1..=(grid * grid * grid) as usize);
    for _ in 0..cells {
        let key = VoxelKey::new(rng.random_range(0..grid), rng.random_range(0..grid), rng.random_range(0..grid));
        let id = if rng.random_bool(0.15) {
            InstanceId::UNKNOWN
        } else {
            ids[rng.random_range(0..ids.len())]
        };
        map.add_instance_evidence(key, id, rng.random_range(1..20)).unwrap();
    }
    map
}

pub fn semantic_opinion(points: Vec<Point3<f64>>, category: &str, confidence: f64) -> SubjectiveOpinion {
    SubjectiveOpinion {
        pixels: (0..points.len() as u32).collect(),
        points,
        label: OpinionLabel::Semantic {
            category: category.into(),
            confidence,
        },
        source_frame: 0,
        pixel_bbox: Some([0, 0, 10, 10]),
    }
}

pub fn unknown_opinion(points: Vec<Point3<f64>>) -> SubjectiveOpinion {
    SubjectiveOpinion {
        label: OpinionLabel::Unknown,
        pixel_bbox: None,
        ..semantic_opinion(points, "-", 1.0)
    }
}

pub fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
            )
        })
        .collect()
}

pub fn alpha_total(map: &MapState) -> u64 {
    map.cells().map(|(_, c)| c.total_count()).sum()
}

/// Σ over instances of their total category evidence, summed in id order.
pub fn beta_total(map: &MapState) -> f64 {
    map.instances().map(|r| r.category_evidence.total()).sum()
}

/// The desk scene at 320×240 with `chair_1` reported as a table in a
/// fraction `rate` of its detections.
pub fn mislabeled_scene(frames: usize, rate: f64) -> SyntheticScene {
    let mut spec = desk_scene(frames, 320, 240);
    let chair = spec.objects.iter_mut().find(|o| o.id == "chair_1").unwrap();
    chair.mislabel_rate = rate;
    chair.mislabel_as = Some("table".into());
    spec.resolve().unwrap()
}

pub fn evaluate_build(scene: &SyntheticScene, seed: u64, cfg: &Config) -> (BuildOutput, voxeland::eval::EvalReport) {
    let out = build_in_memory(scene, seed, cfg);
    let report = voxeland::eval::evaluate(&out.map, &scene.ground_truth(), &cfg.eval()).unwrap();
    (out, report)
}
