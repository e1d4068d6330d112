use std::time::Instant;

use splatvox::fit::{
    fit_stage1, fit_stage2, FitConfig, PropagationMode, Stage1Config, Stage2Config,
};
use splatvox::scene::{BoxSpec, CameraSpec, EgoSpec, GridSpec, LidarSpec, SceneSpec, SyntheticScene};

fn small_scene_spec(frames: usize, moving: bool) -> SceneSpec {
    SceneSpec {
        grid: GridSpec {
            origin: [0.0, 0.0, 0.0],
            voxel_size: [0.25, 0.25, 0.25],
            dims: [32, 32, 8],
            class_count: 3,
        },
        frames,
        frame_dt: 0.5,
        ego: EgoSpec {
            start: [4.0, 1.2, 1.0],
            velocity: [0.25, 0.2, 0.0],
            yaw_rate: 0.0,
        },
        elements: vec![
            BoxSpec { min: [0.0, 0.0, 0.0], max: [8.0, 8.0, 0.25], class: 0, velocity: [0.0; 3] },
            BoxSpec { min: [1.5, 4.5, 0.25], max: [3.0, 6.0, 1.25], class: 1, velocity: [0.0; 3] },
            BoxSpec {
                min: [4.5, 5.0, 0.25],
                max: [5.75, 6.25, 1.0],
                class: 2,
                velocity: if moving { [0.45, 0.0, 0.0] } else { [0.0; 3] },
            },
        ],
        cameras: vec![
            CameraSpec { fx: 14.0, fy: 14.0, cx: 14.0, cy: 10.0, width: 28, height: 20,
                position: [0.0, 0.0, 0.3], look_at: [1.0, 1.5, 0.0] },
        ],
        lidar: LidarSpec {
            rings: 20,
            azimuth_steps: 120,
            elevation_range_deg: [-50.0, 10.0],
            max_range: 15.0,
            offset: [0.0, 0.0, 0.5],
        },
    }
}

fn base_cfg(seed: u64) -> FitConfig {
    FitConfig {
        seed,
        queries: 48,
        children_per_query: 4,
        scale_max: 0.8,
        stage1: Stage1Config {
            steps: 150,
            ..Stage1Config::default()
        },
        stage2: Stage2Config {
            steps_per_frame: 300,
            ..Stage2Config::default()
        },
        ..FitConfig::default()
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "opacity".into());
    match which.as_str() {
        "opacity" => {
            // Opacity-weighted vs unweighted occupancy (IoU direction).
            let scale_min: f64 = std::env::var("SMIN").ok().and_then(|v| v.parse().ok()).unwrap_or(0.05);
            let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(300);
            let scene = SyntheticScene::generate(&small_scene_spec(1, false), 42).unwrap();
            for seed in [0u64, 1, 2] {
                let t = Instant::now();
                let mut on = base_cfg(seed);
                on.scale_min = scale_min;
                on.stage2.steps_per_frame = steps;
                on.opacity_weighted = true;
                let (_, r_on) = fit_stage2(&scene, None, &on).unwrap();
                let mut off = base_cfg(seed);
                off.scale_min = scale_min;
                off.stage2.steps_per_frame = steps;
                off.opacity_weighted = false;
                let (_, r_off) = fit_stage2(&scene, None, &off).unwrap();
                println!(
                    "seed {}: weighted IoU {:.4} mIoU {:.4} | unweighted IoU {:.4} mIoU {:.4}  ({:?})",
                    seed, r_on.mean_iou, r_on.mean_miou, r_off.mean_iou, r_off.mean_miou, t.elapsed()
                );
            }
        }
        "stream" => {
            // Propagation modes over an 8-frame sequence.
            let scene = SyntheticScene::generate(&small_scene_spec(8, true), 42).unwrap();
            for seed in [0u64, 1, 2] {
                let t = Instant::now();
                let run = |mode: PropagationMode| {
                    let mut cfg = base_cfg(seed);
                    cfg.stage2.steps_per_frame = 120;
                    cfg.stage2.propagation = mode;
                    let (_, r) = fit_stage2(&scene, None, &cfg).unwrap();
                    (r.frames.last().unwrap().voxel.miou, r.mean_miou)
                };
                let delta = run(PropagationMode::DeltaTopK);
                let topk = run(PropagationMode::TopK);
                let none = run(PropagationMode::None);
                println!(
                    "seed {}: delta last/mean {:.4}/{:.4} | topk {:.4}/{:.4} | none {:.4}/{:.4}  ({:?})",
                    seed, delta.0, delta.1, topk.0, topk.1, none.0, none.1, t.elapsed()
                );
            }
        }
        "velocity" => {
            // Velocity modeling on vs off on a moving-box scene.
            let scene = SyntheticScene::generate(&small_scene_spec(3, true), 42).unwrap();
            for seed in [0u64, 1, 2] {
                let t = Instant::now();
                let run = |on: bool| {
                    let mut cfg = base_cfg(seed);
                    cfg.stage1.velocity_learnable = on;
                    cfg.stage2.velocity_learnable = on;
                    let stage1 = fit_stage1(&scene, &cfg).unwrap();
                    let (_, r) = fit_stage2(&scene, Some(&stage1[0].params), &cfg).unwrap();
                    (r.mean_miou, stage1[0].report.final_depth_mae)
                };
                let on = run(true);
                let off = run(false);
                println!(
                    "seed {}: velocity-on mIoU {:.4} (mae {:.4}) | off {:.4} (mae {:.4})  ({:?})",
                    seed, on.0, on.1, off.0, off.1, t.elapsed()
                );
            }
        }
        other => eprintln!("unknown ablation {other}"),
    }
}
